use ensyth_core::data::synth_blobs;
use ensyth_core::ensemble::generate_pool;
use ensyth_core::metrics::{param_count, spearman, weight_nnz};
use ensyth_core::network::{train, PerLayer};
use ensyth_core::pruner::{collect_layer_data, prune_network, default_grid, GRID_EPSILONS};
use ensyth_core::tensor::{matmul_tn, relu};
use ensyth_core::{Dataset, PruneConfig, ReluNetwork, TrainConfig};

fn trained() -> (ReluNetwork, Dataset) {
    let data = synth_blobs(5, 60, 3, 8, 0.35).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 16,
        learning_rate: 0.05,
        l1: PerLayer::Scalar(0.0),
        l2: PerLayer::Scalar(0.0),
        dropout_keep: PerLayer::Scalar(1.0),
        seed: 2,
    };
    let net = train(&ReluNetwork::init(&[8, 24, 12, 3], 1).unwrap(), &data, &cfg).unwrap();
    (net, data)
}

#[test]
fn grid_members_are_feasible_sparser_and_trend_with_epsilon() {
    let (net, data) = trained();
    let grid: Vec<PruneConfig> = default_grid(net.depth()).into_iter().take(12).collect();
    let pool = generate_pool(&net, &grid, &data, "base").unwrap();
    assert_eq!(pool.len(), 12);

    let base_params = param_count(&net);
    for m in pool.members() {
        assert_eq!(m.feasibility.layers.len(), net.depth());
        for (l, f) in m.feasibility.layers.iter().enumerate() {
            assert!(f.residual_ok(), "eps {} layer {l}: {f:?}", m.config.epsilon_gain);
            assert!(f.objective_ok(), "eps {} layer {l}: {f:?}", m.config.epsilon_gain);
            assert!(f.inactive_excess <= 1e-6 * (1.0 + f.target_norm), "{f:?}");
        }
        assert!(param_count(&m.network) <= base_params);
        assert_eq!(m.parent_hash, "base");
    }

    let eps: Vec<f64> = pool.members().iter().map(|m| m.config.epsilon_gain).collect();
    assert_eq!(eps, GRID_EPSILONS);
    let nnz: Vec<f64> = pool.members().iter().map(|m| weight_nnz(&m.network) as f64).collect();
    let rho = spearman(&eps, &nnz).unwrap();
    assert!(rho <= -0.8, "spearman {rho}, nnz {nnz:?}");
}

/// Recomputes the stored residuals from the pruned weights and the
/// baseline's own activations.
#[test]
fn stored_reports_match_recomputed_residuals() {
    let (net, data) = trained();
    let m = prune_network(&net, &data, &PruneConfig::new("set1", 0.2), "base").unwrap();
    let layers = collect_layer_data(&net, data.features()).unwrap();
    let last = net.depth() - 1;
    for (l, (ld, f)) in layers.iter().zip(&m.feasibility.layers).enumerate() {
        let u = m.network.augmented_weight(l);
        let z = matmul_tn(&u, &ld.x_in).unwrap();
        let out = if l == last { z } else { relu(&z) };
        let mut sq = 0.0;
        let mut target = 0.0;
        for ((&o, &t), &active) in out.as_slice().iter().zip(ld.x_out.as_slice()).zip(&ld.active_mask) {
            if active {
                sq += (o - t) * (o - t);
                target += t * t;
            }
        }
        let (residual, target) = (sq.sqrt(), target.sqrt());
        assert!((residual - f.residual).abs() <= 1e-9 * (1.0 + target), "layer {l}");
        assert!((target - f.target_norm).abs() <= 1e-9 * (1.0 + target), "layer {l}");
        assert!((f.epsilon - 0.2 * f.target_norm).abs() <= 1e-12 * (1.0 + target));
    }
}

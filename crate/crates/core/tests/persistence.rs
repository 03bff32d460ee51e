use ensyth_core::metrics::{bundle_size, param_count, sparsity};
use ensyth_core::pool_store::{self, load_bundle, save_pruned};
use ensyth_core::pruner::{FeasibilityReport, LayerFeasibility};
use ensyth_core::{DenseMatrix, ModelBundle, PruneConfig, PrunedModel, ReluNetwork, StoredModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `net` with roughly `zero_frac` of its weights set to exactly zero.
fn sparsify(net: &ReluNetwork, zero_frac: f64, seed: u64) -> PrunedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<DenseMatrix> = net
        .weights()
        .iter()
        .map(|w| {
            let (r, c) = w.shape();
            let data = w
                .as_slice()
                .iter()
                .map(|&v| if rng.random_bool(zero_frac) { 0.0 } else { v })
                .collect();
            DenseMatrix::new(r, c, data).unwrap()
        })
        .collect();
    let network = ReluNetwork::new(net.layer_dims().to_vec(), weights, net.biases().to_vec()).unwrap();
    PrunedModel {
        masks: network.weights().iter().map(|w| w.map(|v| (v != 0.0) as u8 as f64)).collect(),
        layer_epsilons: vec![0.1; network.depth()],
        config: PruneConfig::new("set1", 0.1),
        parent_hash: "cd".repeat(32),
        feasibility: FeasibilityReport {
            layers: network
                .weights()
                .iter()
                .zip(net.weights())
                .map(|(u, w)| LayerFeasibility {
                    target_norm: 1.0,
                    epsilon: 0.1,
                    residual: 0.05,
                    inactive_excess: 0.0,
                    l1_baseline: w.l1_norm(),
                    l1_pruned: u.l1_norm(),
                    nnz_baseline: w.count_nonzero(0.0),
                    nnz_pruned: u.count_nonzero(0.0),
                    neurons_kept_baseline: w.cols(),
                    neurons_unconverged: 0,
                })
                .collect(),
        },
        network,
    }
}

fn bits(net: &ReluNetwork) -> Vec<u64> {
    net.weights()
        .iter()
        .flat_map(|w| w.as_slice().iter().map(|v| v.to_bits()))
        .chain(net.biases().iter().flatten().map(|v| v.to_bits()))
        .collect()
}

fn dims() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(1usize..=12, 2..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pruned_round_trip_is_bitwise(dims in dims(), seed in any::<u64>(), frac in 0.0f64..1.0, scale_exp in -300i32..300) {
        let base = ReluNetwork::init(&dims, seed).unwrap();
        let scale = 2f64.powi(scale_exp);
        let scaled = ReluNetwork::new(
            dims.clone(),
            base.weights().iter().map(|w| w.map(|v| v * scale)).collect(),
            base.biases().to_vec(),
        )
        .unwrap();
        let model = sparsify(&scaled, frac, seed ^ 1);
        let bundle = ModelBundle::from_pruned(&model).unwrap();
        let bytes = bundle.to_bytes().unwrap();
        let back = ModelBundle::from_bytes(&bytes, Some(&bundle.digest().unwrap())).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        match back.decode().unwrap() {
            StoredModel::Pruned(m) => {
                prop_assert_eq!(bits(&m.network), bits(&model.network));
                prop_assert_eq!(m.masks, model.masks);
                prop_assert_eq!(m.layer_epsilons, model.layer_epsilons);
                prop_assert_eq!(m.parent_hash, model.parent_hash);
                prop_assert_eq!(m.feasibility, model.feasibility);
            }
            StoredModel::Baseline { .. } => prop_assert!(false, "decoded as baseline"),
        }
    }

    #[test]
    fn baseline_round_trip_is_bitwise(dims in dims(), seed in any::<u64>()) {
        let net = ReluNetwork::init(&dims, seed).unwrap();
        let bundle = ModelBundle::from_network(&net, None).unwrap();
        let back = ModelBundle::from_bytes(&bundle.to_bytes().unwrap(), None).unwrap();
        match back.decode().unwrap() {
            StoredModel::Baseline { network, train_config } => {
                prop_assert_eq!(bits(&network), bits(&net));
                prop_assert!(train_config.is_none());
            }
            StoredModel::Pruned(_) => prop_assert!(false, "decoded as pruned"),
        }
    }
}

#[test]
fn sparse_bundles_are_smaller_than_the_dense_baseline() {
    let base = ReluNetwork::init(&[64, 32, 10], 3).unwrap();
    let dense = bundle_size(&ModelBundle::from_network(&base, None).unwrap()).unwrap();
    for frac in [0.5, 0.9] {
        let m = sparsify(&base, frac, 9);
        assert!(sparsity(&m.network) >= frac - 0.05);
        let sparse = bundle_size(&ModelBundle::from_pruned(&m).unwrap()).unwrap();
        assert!(sparse < dense, "sparsity {frac}: {sparse} >= {dense}");
    }
}

#[test]
fn file_round_trip_preserves_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ezip");
    let m = sparsify(&ReluNetwork::init(&[8, 6, 3], 1).unwrap(), 0.7, 2);
    let digest = save_pruned(&m, &path).unwrap();
    let on_disk = std::fs::metadata(&path).unwrap().len();
    let bundle = load_bundle(&path, Some(&digest)).unwrap();
    assert_eq!(bundle_size(&bundle).unwrap(), on_disk);
    let StoredModel::Pruned(back) = pool_store::load_model(&path).unwrap() else {
        panic!("expected a pruned model");
    };
    assert_eq!(param_count(&back.network), param_count(&m.network));
    assert_eq!(sparsity(&back.network), sparsity(&m.network));
}

#[test]
fn corruption_is_detected() {
    let m = sparsify(&ReluNetwork::init(&[5, 4, 3], 4).unwrap(), 0.3, 5);
    let bundle = ModelBundle::from_pruned(&m).unwrap();
    let digest = bundle.digest().unwrap();

    // one ulp in one weight changes the digest
    let mut w = m.network.weights().to_vec();
    let v = w[0].as_slice()[1];
    w[0] = {
        let mut data = w[0].as_slice().to_vec();
        data[1] = f64::from_bits(v.to_bits() ^ 1);
        DenseMatrix::new(5, 4, data).unwrap()
    };
    let mut tweaked = m.clone();
    tweaked.network = ReluNetwork::new(vec![5, 4, 3], w, m.network.biases().to_vec()).unwrap();
    assert_ne!(ModelBundle::from_pruned(&tweaked).unwrap().digest().unwrap(), digest);

    // with the digest pinned, a flipped byte either fails to load or leaves
    // the content untouched (zip padding, timestamps)
    let bytes = bundle.to_bytes().unwrap();
    let mut rejected = 0;
    for i in (0..bytes.len()).step_by(7) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        match ModelBundle::from_bytes(&bad, Some(&digest)) {
            Err(_) => rejected += 1,
            Ok(b) => assert_eq!(b.digest().unwrap(), digest, "byte {i} changed content silently"),
        }
    }
    assert!(rejected > 0);
}

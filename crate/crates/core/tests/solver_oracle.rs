mod common;

use common::oracle::{self, OracleProblem};
use common::random_layer;
use ensyth_core::pruner::{layer_feasibility, prune_layer, LayerData, GRID_EPSILONS};
use ensyth_core::tensor::{matmul_tn, DenseMatrix};

fn l1_without_bias(u: &DenseMatrix) -> f64 {
    let (rows, cols) = u.shape();
    (0..rows - 1)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|rc| u[rc].abs())
        .sum()
}

#[test]
fn identity_inputs_at_zero_epsilon_keep_positive_part() {
    let w = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![-3.0, 4.0]]).unwrap();
    // Zero bias row: the bias coefficient multiplies nothing, so it drops out.
    let w_aug = w.append_row(0.0);
    let x_in = DenseMatrix::identity(2).append_row(0.0);
    let x_out = matmul_tn(&w_aug, &x_in).unwrap().map(|v| v.max(0.0));
    let active_mask = x_out.as_slice().iter().map(|&v| v > 0.0).collect();
    let data = LayerData {
        x_in,
        x_out,
        active_mask,
        hidden: true,
    };
    let pruned = prune_layer(&w_aug, &data, 0.0).unwrap();

    // LP oracle: with identity inputs each coordinate is its own problem,
    // pinned to w when active, and min |u| s.t. u <= 0 (so 0) when inactive.
    for r in 0..2 {
        for c in 0..2 {
            let active = w[(r, c)] > 0.0;
            let lp = if active { w[(r, c)] } else { 0.0 };
            assert!(
                (pruned.u[(r, c)] - lp).abs() < 1e-6,
                "U[{r},{c}] = {} vs {lp}",
                pruned.u[(r, c)]
            );
        }
    }
    assert!(l1_without_bias(&pruned.u) < l1_without_bias(&w_aug));
}

#[test]
fn six_by_four_layer_matches_reference() {
    let mut found = None;
    for seed in 0.. {
        let (w, d) = random_layer(1000 + seed, 6, 4, 24, true);
        if w.shape() == (7, 4) && d.x_in.cols() == 24 {
            found = Some((w, d));
            break;
        }
        if seed > 100_000 {
            break;
        }
    }
    let (w_aug, data) = found.expect("fixture with the requested shape");
    let pruned = prune_layer(&w_aug, &data, 0.1).unwrap();
    let admm = l1_without_bias(&pruned.u);
    let reference = oracle::layer_optimum(&w_aug, &data, 0.1);
    assert!(
        (admm - reference).abs() <= 0.02 * reference + w_aug.cols() as f64 * oracle::GAP_BOUND,
        "admm {admm} vs reference {reference}"
    );
}

#[test]
fn random_layers_match_reference() {
    for i in 0..20u64 {
        let (w_aug, data) = random_layer(i, 8, 8, 32, i % 4 != 3);
        let eps = GRID_EPSILONS[(i as usize * 5) % GRID_EPSILONS.len()];
        let pruned = prune_layer(&w_aug, &data, eps).unwrap();
        let admm = l1_without_bias(&pruned.u);
        let reference = oracle::layer_optimum(&w_aug, &data, eps);
        assert!(
            (admm - reference).abs() <= 0.02 * reference + w_aug.cols() as f64 * oracle::GAP_BOUND,
            "layer {i} eps {eps}: admm {admm} vs reference {reference}"
        );
        let report = layer_feasibility(&w_aug, &pruned.u, &data, eps, &pruned.neurons).unwrap();
        assert!(
            report.residual_ok() && report.objective_ok(),
            "layer {i}: {report:?}"
        );
    }
}

#[test]
fn reference_solution_is_feasible_and_no_worse_than_baseline() {
    let (w_aug, data) = random_layer(77, 6, 3, 20, true);
    for m in 0..w_aug.cols() {
        let problem = OracleProblem::from_layer(&data, m, 0.2);
        let w = w_aug.column(m);
        let (obj, u) = oracle::solve(&problem, &w);
        let resid: f64 = problem
            .ball
            .iter()
            .zip(&problem.y)
            .map(|(a, y)| (a.iter().zip(&u).map(|(x, v)| x * v).sum::<f64>() - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(resid <= problem.radius * (1.0 + 1e-9));
        for a in &problem.halfspaces {
            assert!(a.iter().zip(&u).map(|(x, v)| x * v).sum::<f64>() <= problem.slack + 1e-9);
        }
        let base: f64 = w[..w.len() - 1].iter().map(|v| v.abs()).sum();
        assert!(obj <= base + 1e-9);
    }
}

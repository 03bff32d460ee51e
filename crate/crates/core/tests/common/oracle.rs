//! Reference solver for the per-neuron sparse refit, independent of ADMM.
//!
//! Solves the equivalent smooth program
//!
//! ```text
//! minimize   Σ t_i
//! subject to -t_i <= u_i <= t_i                (non-bias entries)
//!            |A_ball u - y_ball|² <= r²
//!            a_k·u <= s                         (inactive samples)
//! ```
//!
//! with a log-barrier interior-point method: damped Newton steps with a
//! feasibility-preserving backtracking line search, barrier weight grown by
//! 10x until the duality gap bound m/τ is negligible.

use ensyth_core::pruner::LayerData;
use ensyth_core::tensor::DenseMatrix;
use nalgebra::{DMatrix, DVector};

/// Stopping bound on the duality gap `m/τ`: the returned objective is
/// within this of the true optimum, per neuron.
pub const GAP_BOUND: f64 = 1e-10;

pub struct OracleProblem {
    /// Rows of `X_inᵀ` constrained through the ball.
    pub ball: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub radius: f64,
    /// Rows constrained by `a·u <= slack`.
    pub halfspaces: Vec<Vec<f64>>,
    pub slack: f64,
}

impl OracleProblem {
    pub fn from_layer(data: &LayerData, neuron: usize, eps: f64) -> Self {
        let p = data.x_out.cols();
        let mut ball = Vec::new();
        let mut y = Vec::new();
        let mut halfspaces = Vec::new();
        for k in 0..p {
            let row = data.x_in.column(k);
            if data.active_mask[neuron * p + k] {
                ball.push(row);
                y.push(data.x_out[(neuron, k)]);
            } else {
                halfspaces.push(row);
            }
        }
        let radius = eps * y.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self {
            ball,
            y,
            radius,
            halfspaces,
            slack: radius,
        }
    }

    fn dim(&self) -> usize {
        self.ball
            .first()
            .or(self.halfspaces.first())
            .map_or(0, Vec::len)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `(optimal |u|₁ without bias, u)`. `start` must be strictly
/// feasible for the ball and halfspaces (the baseline column is, whenever
/// `radius > 0`).
pub fn solve(problem: &OracleProblem, start: &[f64]) -> (f64, Vec<f64>) {
    let n = problem.dim();
    let nt = n - 1;
    let dim = n + nt;
    let mut x = DVector::<f64>::zeros(dim);
    for i in 0..n {
        x[i] = start[i];
    }
    for i in 0..nt {
        x[n + i] = start[i].abs() + 1.0;
    }
    let constraints = 2 * nt + 1 + problem.halfspaces.len();

    // Slacks of every constraint at x; None if any is non-positive.
    let slacks = |x: &DVector<f64>| -> Option<(Vec<f64>, f64, Vec<f64>)> {
        let u = &x.as_slice()[..n];
        let mut box_s = Vec::with_capacity(2 * nt);
        for i in 0..nt {
            box_s.push(x[n + i] - u[i]);
            box_s.push(x[n + i] + u[i]);
        }
        let resid: f64 = problem
            .ball
            .iter()
            .zip(&problem.y)
            .map(|(a, y)| (dot(a, u) - y).powi(2))
            .sum();
        let ball_s = problem.radius * problem.radius - resid;
        let half_s: Vec<f64> = problem
            .halfspaces
            .iter()
            .map(|a| problem.slack - dot(a, u))
            .collect();
        if box_s.iter().chain(&half_s).any(|&s| s <= 0.0) || ball_s <= 0.0 {
            return None;
        }
        Some((box_s, ball_s, half_s))
    };

    let objective = |x: &DVector<f64>, tau: f64| -> Option<f64> {
        let (box_s, ball_s, half_s) = slacks(x)?;
        let t_sum: f64 = x.as_slice()[n..].iter().sum();
        let barrier: f64 = box_s.iter().chain(&half_s).map(|s| s.ln()).sum::<f64>() + ball_s.ln();
        Some(tau * t_sum - barrier)
    };

    assert!(
        slacks(&x).is_some(),
        "oracle start point is not strictly feasible"
    );
    let mut tau = 1.0;
    loop {
        for _ in 0..200 {
            let (box_s, ball_s, half_s) = slacks(&x).unwrap();
            let u = &x.as_slice()[..n];
            let mut grad = DVector::<f64>::zeros(dim);
            let mut hess = DMatrix::<f64>::zeros(dim, dim);
            for i in 0..nt {
                grad[n + i] += tau;
                // t - u >= 0 and t + u >= 0
                for (sign, s) in [(-1.0, box_s[2 * i]), (1.0, box_s[2 * i + 1])] {
                    // constraint value f = -(t + sign*u), barrier -ln(-f)
                    let (cu, ct) = (-sign, -1.0);
                    grad[i] += cu / s;
                    grad[n + i] += ct / s;
                    hess[(i, i)] += cu * cu / (s * s);
                    hess[(i, n + i)] += cu * ct / (s * s);
                    hess[(n + i, i)] += cu * ct / (s * s);
                    hess[(n + i, n + i)] += ct * ct / (s * s);
                }
            }
            let mut gq = vec![0.0; n];
            let mut hq = DMatrix::<f64>::zeros(n, n);
            for (a, y) in problem.ball.iter().zip(&problem.y) {
                let r = dot(a, u) - y;
                for i in 0..n {
                    gq[i] += 2.0 * r * a[i];
                    for j in 0..n {
                        hq[(i, j)] += 2.0 * a[i] * a[j];
                    }
                }
            }
            for i in 0..n {
                grad[i] += gq[i] / ball_s;
                for j in 0..n {
                    hess[(i, j)] += hq[(i, j)] / ball_s + gq[i] * gq[j] / (ball_s * ball_s);
                }
            }
            for (a, s) in problem.halfspaces.iter().zip(&half_s) {
                for i in 0..n {
                    grad[i] += a[i] / s;
                    for j in 0..n {
                        hess[(i, j)] += a[i] * a[j] / (s * s);
                    }
                }
            }
            for i in 0..dim {
                hess[(i, i)] += 1e-14;
            }
            let step = hess
                .clone()
                .lu()
                .solve(&(-&grad))
                .expect("barrier Hessian is nonsingular");
            let decrement = -grad.dot(&step);
            if decrement / 2.0 <= 1e-12 {
                break;
            }
            let f0 = objective(&x, tau).unwrap();
            let mut alpha = 1.0;
            loop {
                let cand = &x + &step * alpha;
                if let Some(f) = objective(&cand, tau) {
                    if f <= f0 - 0.25 * alpha * decrement {
                        x = cand;
                        break;
                    }
                }
                alpha *= 0.5;
                if alpha < 1e-14 {
                    break;
                }
            }
            if alpha < 1e-14 {
                break;
            }
        }
        if constraints as f64 / tau < GAP_BOUND {
            break;
        }
        tau *= 10.0;
    }
    let u: Vec<f64> = x.as_slice()[..n].to_vec();
    (u[..nt].iter().map(|v| v.abs()).sum(), u)
}

/// Reference optimum summed over every neuron of a layer.
pub fn layer_optimum(w_aug: &DenseMatrix, data: &LayerData, eps: f64) -> f64 {
    (0..w_aug.cols())
        .map(|m| solve(&OracleProblem::from_layer(data, m, eps), &w_aug.column(m)).0)
        .sum()
}

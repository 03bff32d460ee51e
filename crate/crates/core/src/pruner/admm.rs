//! ADMM for the per-neuron sparse refit
//!
//! ```text
//! minimize   |u without bias|₁
//! subject to |A_act u - y_act|₂ <= eps        (active samples)
//!            A_inact u <= slack                (inactive samples, hidden layers)
//! ```
//!
//! where `A = X_inᵀ`. The problem is split as `v = z1` (L1 term) and
//! `A v = z2` (constraint set), so every neuron of a layer shares one
//! Cholesky factor of `I + AᵀA`. The variables are rescaled so that
//! `|A|₂ = 1` and the least-squares fit of the ball targets has unit
//! max-magnitude; that fit is also the starting point. Iterations use
//! over-relaxation and residual balancing of `rho`.
//!
//! ADMM only gets close. The best iterate seeds an exact active-set descent
//! (see `polish`), whose result is what gets returned.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::polish::Polisher;
use crate::tensor::DenseMatrix;

/// Relative slack allowed on the constraints when accepting an iterate.
/// Half of the reported tolerance, leaving room for thresholding and for
/// summing per-neuron residuals into a layer residual.
pub(crate) const ACCEPT_SLACK: f64 = 5e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmSettings {
    pub rho: f64,
    pub max_iterations: usize,
    /// Relative primal/dual residual tolerance.
    pub tolerance: f64,
    /// Iterations between feasibility checks of the sparse iterate.
    pub check_every: usize,
    /// Over-relaxation factor in `[1, 2)`; 1 is plain ADMM.
    pub relaxation: f64,
    /// Residual balancing: rescale `rho` by 2 when the primal and dual
    /// residuals differ by more than 10x. `rho` is then the starting value.
    pub adaptive_rho: bool,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iterations: 300,
            tolerance: 1e-4,
            check_every: 5,
            relaxation: 1.6,
            adaptive_rho: true,
        }
    }
}

/// One neuron's constraint data in original units.
pub(crate) struct NeuronTargets<'a> {
    pub y: &'a [f64],
    pub active: &'a [bool],
    pub radius: f64,
    pub slack: f64,
    /// Hidden layers split samples into active/inactive; the output layer
    /// constrains every sample through the ball.
    pub hidden: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronOutcome {
    pub u: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// True when no iterate beat the baseline weights.
    pub kept_baseline: bool,
}

/// Shared per-layer state: the data matrix, its scale, and the factor.
pub(crate) struct LayerSystem<'a> {
    x_in: &'a DenseMatrix,
    /// `|X_in|₂`; `A' = X_inᵀ / norm`.
    norm: f64,
    chol: Option<Cholesky<f64, Dyn>>,
    settings: AdmmSettings,
}

impl<'a> LayerSystem<'a> {
    pub fn new(x_in: &'a DenseMatrix, settings: AdmmSettings) -> Self {
        let n = x_in.rows();
        let gram = DMatrix::from_fn(n, n, |i, j| dot(x_in.row(i), x_in.row(j)));
        let norm = spectral_norm(&gram).sqrt();
        let chol = (norm > 0.0).then(|| {
            let scaled = DMatrix::identity(n, n) + &gram / (norm * norm);
            Cholesky::new(scaled).expect("I + AᵀA is positive definite")
        });
        Self {
            x_in,
            norm,
            chol,
            settings,
        }
    }

    fn dim(&self) -> usize {
        self.x_in.rows()
    }

    fn samples(&self) -> usize {
        self.x_in.cols()
    }

    /// `X_inᵀ v` in original units.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &x) in out.iter_mut().zip(self.x_in.row(i)) {
                *o += x * vi;
            }
        }
    }

    /// `X_in q` in original units.
    fn apply_t(&self, q: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.x_in.row(i), q);
        }
    }

    /// Feasibility of `u` against the targets with the acceptance slack.
    /// `scratch` receives `X_inᵀ u`.
    pub fn is_feasible(&self, u: &[f64], t: &NeuronTargets<'_>, scratch: &mut [f64]) -> bool {
        self.within(u, t, ACCEPT_SLACK, scratch)
    }

    fn within(&self, u: &[f64], t: &NeuronTargets<'_>, rel: f64, scratch: &mut [f64]) -> bool {
        self.apply(u, scratch);
        let (ball_sq, worst_excess) = constraint_residuals(scratch, t);
        let floor = 1e-12 * (1.0 + norm(t.y));
        let radius = t.radius * (1.0 + rel) + floor;
        ball_sq.sqrt() <= radius && worst_excess <= t.radius * rel + floor
    }

    /// Solves one neuron starting from the baseline column `w` (bias last).
    pub fn solve(&self, w: &[f64], t: &NeuronTargets<'_>) -> NeuronOutcome {
        let n = self.dim();
        let p = self.samples();
        let bias = n - 1;
        let baseline_l1 = l1_no_bias(w);
        let mut scratch = vec![0.0; p];

        let keep_baseline = |iterations, converged| NeuronOutcome {
            u: w.to_vec(),
            iterations,
            converged,
            kept_baseline: true,
        };
        let Some(chol) = &self.chol else {
            // All-zero inputs: only the bias matters and it is unpenalized.
            let mut u = vec![0.0; n];
            u[bias] = w[bias];
            return if self.is_feasible(&u, t, &mut scratch) {
                NeuronOutcome {
                    u,
                    iterations: 0,
                    converged: true,
                    kept_baseline: false,
                }
            } else {
                keep_baseline(0, true)
            };
        };
        if baseline_l1 == 0.0 {
            return keep_baseline(0, true);
        }

        // u = c v, constraint space divided by c |X_in|₂
        // Scale by the minimum-norm fit of the ball targets, which tracks the
        // solution size better than the baseline does when few samples fire.
        let polisher = Polisher::new(self.x_in, t);
        let all: Vec<usize> = (0..n).collect();
        let start = polisher
            .solve(&all, &vec![0.0; n], &[])
            .map(|fit| fit.center)
            .filter(|u| u[..bias].iter().any(|v| *v != 0.0))
            .unwrap_or_else(|| w.to_vec());
        let c = start[..bias].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let kappa = c * self.norm;
        let y: Vec<f64> = t.y.iter().map(|v| v / kappa).collect();
        let radius = t.radius / kappa;
        let slack = t.slack / kappa;
        let to_scaled = 1.0 / self.norm;

        let mut v: Vec<f64> = start.iter().map(|x| x / c).collect();
        let mut z1 = v.clone();
        let mut av = vec![0.0; p];
        self.apply(&v, &mut av);
        av.iter_mut().for_each(|a| *a *= to_scaled);
        let mut z2 = av.clone();
        let mut w1 = vec![0.0; n];
        let mut w2 = vec![0.0; p];

        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut rhs = DVector::zeros(n);
        let mut tmp_n = vec![0.0; n];
        let mut q = vec![0.0; p];
        let (mut z1_old, mut hat1) = (vec![0.0; n], vec![0.0; n]);
        let (mut z2_old, mut hat2) = (vec![0.0; p], vec![0.0; p]);
        let mut converged = false;
        let mut iterations = 0;

        // Candidates are in original units.
        let consider =
            |u: Vec<f64>, best: &mut Option<(f64, Vec<f64>)>, scratch: &mut [f64]| -> bool {
                let l1 = l1_no_bias(&u);
                if l1 >= baseline_l1 || best.as_ref().is_some_and(|(b, _)| l1 >= *b) {
                    return false;
                }
                let ok = self.is_feasible(&u, t, scratch);
                if ok {
                    *best = Some((l1, u));
                }
                ok
            };

        let alpha = self.settings.relaxation;
        let mut rho = self.settings.rho;
        for it in 0..self.settings.max_iterations {
            iterations = it + 1;
            // v-update: (I + A'ᵀA') v = (z1 - w1) + A'ᵀ (z2 - w2); rho cancels
            for (qi, (a, b)) in q.iter_mut().zip(z2.iter().zip(&w2)) {
                *qi = a - b;
            }
            self.apply_t(&q, &mut tmp_n);
            for i in 0..n {
                rhs[i] = (z1[i] - w1[i]) + tmp_n[i] * to_scaled;
            }
            let sol = chol.solve(&rhs);
            v.copy_from_slice(sol.as_slice());
            self.apply(&v, &mut av);
            av.iter_mut().for_each(|a| *a *= to_scaled);

            // z-updates on the relaxed point
            z1_old.copy_from_slice(&z1);
            z2_old.copy_from_slice(&z2);
            for i in 0..n {
                hat1[i] = alpha * v[i] + (1.0 - alpha) * z1_old[i];
                let s = hat1[i] + w1[i];
                z1[i] = if i == bias {
                    s
                } else {
                    soft_threshold(s, 1.0 / rho)
                };
            }
            for k in 0..p {
                hat2[k] = alpha * av[k] + (1.0 - alpha) * z2_old[k];
                q[k] = hat2[k] + w2[k];
            }
            project(&q, &y, t.active, radius, slack, t.hidden, &mut z2);

            // dual updates and residuals
            let mut r_sq = 0.0;
            for i in 0..n {
                w1[i] += hat1[i] - z1[i];
                r_sq += (v[i] - z1[i]).powi(2);
            }
            for k in 0..p {
                w2[k] += hat2[k] - z2[k];
                r_sq += (av[k] - z2[k]).powi(2);
            }
            for k in 0..p {
                q[k] = z2[k] - z2_old[k];
            }
            self.apply_t(&q, &mut tmp_n);
            let mut s_sq = 0.0;
            for i in 0..n {
                let d = rho * ((z1[i] - z1_old[i]) + tmp_n[i] * to_scaled);
                s_sq += d * d;
            }
            let primal_scale = (norm_sq(&v) + norm_sq(&av))
                .max(norm_sq(&z1) + norm_sq(&z2))
                .sqrt();
            // v carries no objective, so `w1 + A'ᵀw2` vanishes at the optimum;
            // scale the dual residual by the stacked dual instead.
            let dual_scale = rho * (norm_sq(&w1) + norm_sq(&w2)).sqrt();
            let tol = self.settings.tolerance;
            let (r, s_norm) = (r_sq.sqrt(), s_sq.sqrt());
            converged = r <= tol * primal_scale + 1e-12 && s_norm <= tol * dual_scale + 1e-12;

            let check = it % self.settings.check_every == self.settings.check_every - 1;
            if converged || check {
                let u: Vec<f64> = z1.iter().map(|x| x * c).collect();
                consider(u, &mut best, &mut scratch);
            }
            if converged {
                break;
            }
            if check && self.settings.adaptive_rho {
                // compare residuals relative to their scales
                let rel_r = r / primal_scale.max(1e-300);
                let rel_s = s_norm / dual_scale.max(1e-300);
                let factor = if rel_r > 10.0 * rel_s {
                    2.0
                } else if rel_s > 10.0 * rel_r {
                    0.5
                } else {
                    1.0
                };
                if factor != 1.0 {
                    rho *= factor;
                    w1.iter_mut()
                        .chain(w2.iter_mut())
                        .for_each(|x| *x /= factor);
                }
            }
        }

        // Exact descent from the furthest strictly feasible point on the way
        // from the baseline to the best iterate (or the last one). Its result
        // is preferred over a slack-feasible iterate unless clearly worse.
        let target = match best.as_ref() {
            Some((_, u)) => u.clone(),
            None => z1.iter().map(|x| x * c).collect(),
        };
        let start = self.blend_to_boundary(w, &target, t, &mut scratch);
        let refined = polisher.refine(start, &v, t);
        let refined_l1 = l1_no_bias(&refined);
        let exact = self.within(&refined, t, 1e-9, &mut scratch);
        match best.as_ref() {
            Some((b, _)) if exact && refined_l1 <= b + 1e-3 * baseline_l1 => {
                best = Some((refined_l1, refined))
            }
            None if exact && refined_l1 < baseline_l1 => best = Some((refined_l1, refined)),
            _ => {
                consider(refined, &mut best, &mut scratch);
            }
        }

        match best {
            Some((_, u)) => NeuronOutcome {
                u,
                iterations,
                converged,
                kept_baseline: false,
            },
            None => keep_baseline(iterations, converged),
        }
    }

    /// Furthest feasible point on the segment from the feasible `anchor`
    /// toward `target`.
    fn blend_to_boundary(
        &self,
        anchor: &[f64],
        target: &[f64],
        t: &NeuronTargets<'_>,
        scratch: &mut [f64],
    ) -> Vec<f64> {
        let at = |s: f64| -> Vec<f64> {
            anchor
                .iter()
                .zip(target)
                .map(|(a, b)| a + s * (b - a))
                .collect()
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            if self.within(&at(mid), t, 0.0, scratch) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        at(lo)
    }
}

/// `|A u - y|² over ball samples` and the largest excess over the slack on
/// inactive samples (0 when none).
pub(crate) fn constraint_residuals(au: &[f64], t: &NeuronTargets<'_>) -> (f64, f64) {
    let mut ball = 0.0;
    let mut excess = 0.0f64;
    for (k, &v) in au.iter().enumerate() {
        if !t.hidden || t.active[k] {
            ball += (v - t.y[k]).powi(2);
        } else {
            excess = excess.max(v - t.slack);
        }
    }
    (ball, excess)
}

fn project(
    q: &[f64],
    y: &[f64],
    active: &[bool],
    radius: f64,
    slack: f64,
    hidden: bool,
    out: &mut [f64],
) {
    let in_ball = |k: usize| !hidden || active[k];
    let mut dist_sq = 0.0;
    for k in 0..q.len() {
        if in_ball(k) {
            dist_sq += (q[k] - y[k]).powi(2);
        }
    }
    let dist = dist_sq.sqrt();
    let shrink = if dist > radius { radius / dist } else { 1.0 };
    for k in 0..q.len() {
        out[k] = if in_ball(k) {
            y[k] + (q[k] - y[k]) * shrink
        } else {
            q[k].min(slack)
        };
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

fn spectral_norm(gram: &DMatrix<f64>) -> f64 {
    gram.clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |m, v| m.max(*v))
}

pub(super) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub(super) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub(crate) fn l1_no_bias(u: &[f64]) -> f64 {
    u[..u.len() - 1].iter().map(|v| v.abs()).sum()
}

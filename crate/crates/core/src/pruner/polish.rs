//! Exact refinement of the per-neuron program on a support.
//!
//! With the support, the signs, and a set of binding halfspaces fixed, the
//! program reduces to minimizing a linear function over an ellipsoid slice,
//! which has a closed form. An active-set loop on top of it walks from a
//! feasible point to the optimum.

use nalgebra::{DMatrix, DVector};

use super::admm::{dot, norm_sq, NeuronTargets};
use crate::tensor::DenseMatrix;

/// Closed-form minimizer of `σᵀu` over the ball constraint with `u`
/// restricted to a support and to the affine set `a_k·u = slack` for the
/// halfspaces in `binding`. Writing `u = u_p + P z` with `P` the projector
/// onto the null space of those rows, the ball is the ellipsoid
/// `(z - z_ls)ᵀ G' (z - z_ls) <= r² - resid²`, so the minimizer is
/// `z_ls - sqrt(budget / σ'ᵀG'⁺σ') G'⁺σ'`.
pub(crate) struct Polisher<'a> {
    x_in: &'a DenseMatrix,
    /// `Σ x xᵀ` over ball samples.
    gram: DMatrix<f64>,
    /// `Σ x y` over ball samples.
    xy: Vec<f64>,
    yy: f64,
    radius: f64,
    slack: f64,
}

impl<'a> Polisher<'a> {
    pub fn new(x_in: &'a DenseMatrix, t: &NeuronTargets<'_>) -> Self {
        let n = x_in.rows();
        let p = x_in.cols();
        let ball: Vec<usize> = (0..p).filter(|&k| !t.hidden || t.active[k]).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| ball.iter().map(|&k| x_in[(i, k)]).collect())
            .collect();
        let yb: Vec<f64> = ball.iter().map(|&k| t.y[k]).collect();
        let mut gram = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let g = dot(&rows[i], &rows[j]);
                gram[(i, j)] = g;
                gram[(j, i)] = g;
            }
        }
        Self {
            x_in,
            gram,
            xy: rows.iter().map(|r| dot(r, &yb)).collect(),
            yy: norm_sq(&yb),
            radius: t.radius,
            slack: t.slack,
        }
    }

    /// None when the restricted set misses the ball.
    pub fn solve(&self, support: &[usize], signs: &[f64], binding: &[usize]) -> Option<PolishFit> {
        let k = support.len();
        if k == 0 {
            return None;
        }
        let g = DMatrix::from_fn(k, k, |a, b| self.gram[(support[a], support[b])]);
        let b = DVector::from_iterator(k, support.iter().map(|&i| self.xy[i]));
        let c = DVector::from_column_slice(signs);

        let mut rows_t = None;
        let (u_p, proj) = if binding.is_empty() {
            (DVector::zeros(k), DMatrix::identity(k, k))
        } else {
            let e = DMatrix::from_fn(binding.len(), k, |j, a| self.x_in[(support[a], binding[j])]);
            let f = DVector::from_element(binding.len(), self.slack);
            rows_t = Some(e.transpose());
            let svd = e.clone().svd(true, true);
            let top = svd.singular_values.iter().fold(0.0f64, |m, v| m.max(*v));
            let u_p = svd.solve(&f, top * 1e-10).ok()?;
            if (&e * &u_p - &f).norm() > 1e-9 * (1.0 + f.norm()) {
                return None;
            }
            let v_t = svd.v_t.as_ref()?;
            let mut proj = DMatrix::identity(k, k);
            for (r, sv) in svd.singular_values.iter().enumerate() {
                if *sv > top * 1e-10 {
                    let v = v_t.row(r).transpose();
                    proj -= &v * v.transpose();
                }
            }
            (u_p, proj)
        };

        let g_p = &g * &u_p;
        let g2 = &proj * &g * &proj;
        let b2 = &proj * (&b - &g_p);
        let yy2 = self.yy - 2.0 * u_p.dot(&b) + u_p.dot(&g_p);
        let c2 = &proj * &c;

        let eig = g2.symmetric_eigen();
        let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
        // A zero slice Gram (fully pinned by the binding rows) leaves every
        // direction flat.
        let cut = (top * 1e-12).max(f64::MIN_POSITIVE);
        let pinv = |v: &DVector<f64>| -> DVector<f64> {
            let mut coef = eig.eigenvectors.transpose() * v;
            for (c, l) in coef.iter_mut().zip(eig.eigenvalues.iter()) {
                *c = if *l > cut { *c / l } else { 0.0 };
            }
            &eig.eigenvectors * coef
        };
        // Objective directions the ball does not see: the slice is unbounded
        // along them until a sign or halfspace constraint stops it.
        let mut flat = DVector::zeros(k);
        for (j, l) in eig.eigenvalues.iter().enumerate() {
            if *l <= cut {
                let q = eig.eigenvectors.column(j);
                flat += q * q.dot(&c2);
            }
        }
        let flat = &proj * flat;
        let ray = (flat.norm() > 1e-9 * (1.0 + c2.norm())).then(|| {
            let mut r = vec![0.0; self.gram.nrows()];
            for (a, &i) in support.iter().enumerate() {
                r[i] = -flat[a];
            }
            r
        });
        let center = pinv(&b2);
        let resid_sq = (yy2 - center.dot(&b2)).max(0.0);
        let r_sq = self.radius * self.radius;
        if resid_sq > r_sq + 1e-12 * (self.yy + r_sq) {
            return None;
        }
        let direction = pinv(&c2);
        let q = direction.dot(&c2);
        let step = if q > 0.0 {
            ((r_sq - resid_sq).max(0.0) / q).sqrt() * (1.0 - 1e-9)
        } else {
            0.0
        };
        let z = &center - &direction * step;
        let u_s = &u_p + &proj * z;
        let c_s = &u_p + &proj * center;

        // Multipliers from σ + 2ν(G u - b) + Eᵀμ = 0, with ν taken from the
        // null-space component.
        let grad = (&g * &u_s - &b) * 2.0;
        let pg = &proj * &grad;
        let determined = pg.norm_squared() > 1e-24 * (1.0 + grad.norm_squared());
        let nu = if determined {
            -c2.dot(&pg) / pg.norm_squared()
        } else {
            0.0
        };
        let (nu, multipliers) = match rows_t {
            None => (nu, Vec::new()),
            Some(e_t) if determined => {
                let rhs = -(&c + &grad * nu);
                (nu, signed_multipliers(e_t, &rhs)?.iter().copied().collect())
            }
            Some(e_t) => {
                // The slice is a point: recover ν and μ together.
                let m = e_t.ncols();
                let joint =
                    DMatrix::from_fn(
                        k,
                        m + 1,
                        |r, j| if j == 0 { grad[r] } else { e_t[(r, j - 1)] },
                    );
                let sol = signed_multipliers(joint, &(-&c))?;
                (sol[0].max(0.0), sol.iter().skip(1).copied().collect())
            }
        };

        let n = self.gram.nrows();
        let mut u = vec![0.0; n];
        let mut cen = vec![0.0; n];
        for (a, &i) in support.iter().enumerate() {
            u[i] = u_s[a];
            cen[i] = c_s[a];
        }
        (u.iter().chain(&cen).all(|v| v.is_finite())).then_some(PolishFit {
            u,
            center: cen,
            nu,
            multipliers,
            ray,
        })
    }
}

fn least_squares(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let top = svd.singular_values.iter().fold(0.0f64, |m, v| m.max(*v));
    svd.solve(rhs, top * 1e-10).ok()
}

/// Solves `a λ = rhs`. When the rows of `aᵀ` are dependent the least-squares
/// solution is one of many, so a nonnegative exact solution is preferred if
/// there is one; otherwise negative entries mark constraints to release.
fn signed_multipliers(a: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let ls = least_squares(&a, rhs)?;
    let scale = 1.0 + ls.amax();
    if ls.iter().all(|&v| v >= -1e-9 * scale) {
        return Some(ls);
    }
    let fit = (&a * &ls - rhs).norm();
    let nn = nnls(&a, rhs);
    let nn_fit = (&a * &nn - rhs).norm();
    Some(if nn_fit <= fit + 1e-9 * (1.0 + rhs.norm()) {
        nn
    } else {
        ls
    })
}

/// Lawson-Hanson nonnegative least squares.
fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let m = a.ncols();
    let mut x = DVector::zeros(m);
    let mut passive = vec![false; m];
    let tol = 1e-12 * (1.0 + a.amax() * b.amax()) * m as f64;
    for _ in 0..3 * m + 10 {
        let w = a.transpose() * (b - a * &x);
        let Some(j) = (0..m)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&p, &q| w[p].total_cmp(&w[q]))
        else {
            break;
        };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..m).filter(|&j| passive[j]).collect();
            let sub = DMatrix::from_fn(a.nrows(), idx.len(), |r, c| a[(r, idx[c])]);
            let Some(z) = least_squares(&sub, b) else {
                return x;
            };
            if z.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (c, &j) in idx.iter().enumerate() {
                    x[j] = z[c];
                }
                break;
            }
            let mut step = 1.0f64;
            for (c, &j) in idx.iter().enumerate() {
                if z[c] <= 0.0 {
                    step = step.min(x[j] / (x[j] - z[c]));
                }
            }
            for (c, &j) in idx.iter().enumerate() {
                x[j] += step * (z[c] - x[j]);
                if x[j] <= 1e-15 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    x
}

pub(crate) struct PolishFit {
    pub u: Vec<f64>,
    /// Least-squares center of the restricted ellipsoid.
    pub center: Vec<f64>,
    /// Ball multiplier, scaling `2(G u - b)`.
    pub nu: f64,
    /// One per binding halfspace; negative means the constraint should be
    /// released.
    pub multipliers: Vec<f64>,
    /// Descent ray when the slice is unbounded; `u` is then not a minimizer.
    pub ray: Option<Vec<f64>>,
}

enum Block {
    Sign(usize),
    Halfspace(usize),
}

impl Polisher<'_> {
    fn apply(&self, u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (i, &ui) in u.iter().enumerate() {
            if ui == 0.0 {
                continue;
            }
            for (o, &x) in out.iter_mut().zip(self.x_in.row(i)) {
                *o += x * ui;
            }
        }
    }

    /// Primal active-set descent from the feasible point `x` (bias last).
    /// Halfspaces and the sign constraints `σ_i u_i >= 0` are the linear
    /// inequalities; entries at zero re-enter when `|g_i| > 1`, taking the
    /// sign that lowers the Lagrangian. `hint` supplies signs for entries
    /// that start at zero. Every iterate stays feasible.
    pub fn refine(&self, mut x: Vec<f64>, hint: &[f64], t: &NeuronTargets<'_>) -> Vec<f64> {
        let n = x.len();
        let p = self.x_in.cols();
        let bias = n - 1;
        let mut sign: Vec<f64> = (0..n)
            .map(|i| match i {
                _ if i == bias => 0.0,
                _ if x[i] != 0.0 => x[i].signum(),
                _ => hint[i].signum(),
            })
            .collect();
        let mut free: Vec<bool> = (0..n).map(|i| i == bias || x[i] != 0.0).collect();
        let mut binding: Vec<usize> = Vec::new();
        let mut zx = vec![0.0; p];
        let mut zd = vec![0.0; p];
        let tol = 1e-9;

        for _ in 0..10 * (n + 20) {
            let support: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
            let signs: Vec<f64> = support.iter().map(|&i| sign[i]).collect();
            let Some(fit) = self.solve(&support, &signs, &binding) else {
                break;
            };
            let (d, mut alpha) = match &fit.ray {
                Some(r) => (r.clone(), f64::INFINITY),
                None => {
                    let mut d: Vec<f64> = (0..n).map(|i| fit.u[i] - x[i]).collect();
                    // Already at the face optimum up to rounding.
                    if norm_sq(&d).sqrt() <= 1e-12 * (1.0 + norm_sq(&x).sqrt()) {
                        d.fill(0.0);
                    }
                    (d, 1.0)
                }
            };

            let mut block = None;
            for &i in &support {
                if i != bias && sign[i] * d[i] < 0.0 {
                    let a = (-x[i] / d[i]).max(0.0);
                    if a < alpha {
                        alpha = a;
                        block = Some(Block::Sign(i));
                    }
                }
            }
            if t.hidden {
                self.apply(&x, &mut zx);
                self.apply(&d, &mut zd);
                // Rounding noise along a face must not count as leaving it.
                let noise = 1e-12 * zd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for k in 0..p {
                    if !t.active[k] && zd[k] > noise && !binding.contains(&k) {
                        let a = ((t.slack - zx[k]) / zd[k]).max(0.0);
                        if a < alpha {
                            alpha = a;
                            block = Some(Block::Halfspace(k));
                        }
                    }
                }
            }
            if !alpha.is_finite() {
                break;
            }
            for i in 0..n {
                x[i] += alpha * d[i];
            }
            match block {
                Some(Block::Sign(i)) => {
                    x[i] = 0.0;
                    free[i] = false;
                    continue;
                }
                Some(Block::Halfspace(k)) => {
                    binding.push(k);
                    continue;
                }
                None if fit.ray.is_some() => break,
                None => {}
            }

            let mu_top = fit.multipliers.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let release = (0..binding.len())
                .filter(|&j| fit.multipliers[j] < -tol * (1.0 + mu_top))
                .min_by(|&a, &b| fit.multipliers[a].total_cmp(&fit.multipliers[b]));
            if let Some(j) = release {
                binding.remove(j);
                continue;
            }
            // Reduced gradient of the constraint terms at fixed-zero entries.
            let enter = (0..bias)
                .filter(|&i| !free[i])
                .map(|i| {
                    let gu: f64 = (0..n).map(|j| self.gram[(i, j)] * x[j]).sum();
                    let hs: f64 = binding
                        .iter()
                        .zip(&fit.multipliers)
                        .map(|(&k, m)| m * self.x_in[(i, k)])
                        .sum();
                    (i, 2.0 * fit.nu * (gu - self.xy[i]) + hs)
                })
                .filter(|(_, g)| g.abs() > 1.0 + tol)
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
            let Some((i, g)) = enter else {
                break;
            };
            free[i] = true;
            sign[i] = -g.signum();
        }
        x
    }
}

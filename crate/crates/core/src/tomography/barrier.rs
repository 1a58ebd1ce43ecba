//! Independent reference solver for small reconstructions.
//!
//! Recasts the problem as a second-order cone program in `(Theta, s)`:
//!
//! ```text
//! minimise s + eps * S(Theta)   s.t.  ||F Theta - P||_F <= s,  Theta >= 0,  rows of Theta sum to 1
//! ```
//!
//! and follows the central path of the log barrier
//! `t (s + eps S) - log(s^2 - ||r||^2) - sum log theta` with equality
//! constrained Newton steps on the dense KKT system. It shares no code with
//! the production solver beyond matrix storage, so agreement of the two is a
//! meaningful check. Cost is cubic in the number of entries of `Theta`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Largest number of POVM entries accepted.
pub const MAX_ENTRIES: usize = 2000;
/// Newton steps allowed per barrier parameter.
const MAX_INNER_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierOptions {
    /// Stop once the duality-gap bound `(n + 2) / t` falls below this.
    pub gap_tolerance: f64,
    pub max_newton_steps: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self {
            gap_tolerance: 1e-13,
            max_newton_steps: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierSolution {
    pub theta: DMatrix<f64>,
    /// `||F Theta - P||_F + eps S(Theta)` at the returned point.
    pub objective: f64,
    pub newton_steps: usize,
    pub converged: bool,
}

struct Barrier<'a> {
    f: &'a DMatrix<f64>,
    p: &'a DMatrix<f64>,
    gram: DMatrix<f64>,
    eps: f64,
    m: usize,
    n_out: usize,
}

impl Barrier<'_> {
    fn theta(&self, z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.m, self.n_out, &z.as_slice()[..self.m * self.n_out])
    }

    fn smoothness(&self, theta: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for n in 0..self.n_out {
            for i in 0..self.m.saturating_sub(1) {
                s += (theta[(i, n)] - theta[(i + 1, n)]).powi(2);
            }
        }
        s
    }

    fn true_objective(&self, z: &DVector<f64>) -> f64 {
        let theta = self.theta(z);
        (self.f * &theta - self.p).norm() + self.eps * self.smoothness(&theta)
    }

    /// Barrier value, or `None` outside the domain.
    fn value(&self, z: &DVector<f64>, t: f64) -> Option<f64> {
        let nx = self.m * self.n_out;
        let s = z[nx];
        if s <= 0.0 || z.rows(0, nx).iter().any(|&v| v <= 0.0) {
            return None;
        }
        let theta = self.theta(z);
        let r2 = (self.f * &theta - self.p).norm_squared();
        let w = s * s - r2;
        if w <= 0.0 {
            return None;
        }
        let logs: f64 = z.rows(0, nx).iter().map(|v| v.ln()).sum();
        Some(t * (s + self.eps * self.smoothness(&theta)) - w.ln() - logs)
    }

    fn grad_hess(&self, z: &DVector<f64>, t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let (m, nn) = (self.m, self.n_out);
        let nx = m * nn;
        let s = z[nx];
        let theta = self.theta(z);
        let r = self.f * &theta - self.p;
        let w = s * s - r.norm_squared();
        let atr = self.f.transpose() * &r;

        let mut grad = DVector::zeros(nx + 1);
        let mut hess = DMatrix::zeros(nx + 1, nx + 1);
        for n in 0..nn {
            for i in 0..m {
                let k = i + n * m;
                let mut dd = 0.0;
                if i > 0 {
                    dd += theta[(i, n)] - theta[(i - 1, n)];
                    hess[(k, k - 1)] -= 2.0 * t * self.eps;
                    hess[(k, k)] += 2.0 * t * self.eps;
                }
                if i + 1 < m {
                    dd += theta[(i, n)] - theta[(i + 1, n)];
                    hess[(k, k + 1)] -= 2.0 * t * self.eps;
                    hess[(k, k)] += 2.0 * t * self.eps;
                }
                let x = z[k];
                grad[k] = 2.0 * t * self.eps * dd + 2.0 * atr[(i, n)] / w - 1.0 / x;
                hess[(k, k)] += 1.0 / (x * x);
                for i2 in 0..m {
                    hess[(k, i2 + n * m)] += 2.0 * self.gram[(i, i2)] / w;
                }
            }
        }
        grad[nx] = t - 2.0 * s / w;
        // Rank-one part from the gradient of w = s^2 - ||r||^2.
        let mut gw = DVector::zeros(nx + 1);
        for k in 0..nx {
            gw[k] = -2.0 * atr[k];
        }
        gw[nx] = 2.0 * s;
        hess.ger(1.0 / (w * w), &gw, &gw, 1.0);
        hess[(nx, nx)] -= 2.0 / w;
        (grad, hess)
    }
}

/// Solves the reconstruction problem to high accuracy by the barrier method.
pub fn solve_reference(
    f: &DMatrix<f64>,
    p: &DMatrix<f64>,
    eps: f64,
    opts: &BarrierOptions,
) -> Result<BarrierSolution> {
    if f.nrows() != p.nrows() {
        return Err(Error::Dimension(format!(
            "probe matrix has {} rows, outcome matrix {}",
            f.nrows(),
            p.nrows()
        )));
    }
    let (m, n_out) = (f.ncols(), p.ncols());
    let nx = m * n_out;
    if nx > MAX_ENTRIES {
        return Err(Error::Resource(format!(
            "reference solver limited to {MAX_ENTRIES} POVM entries, got {nx}"
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::Config(format!(
            "epsilon must be non-negative, got {eps}"
        )));
    }
    let b = Barrier {
        f,
        p,
        gram: f.transpose() * f,
        eps,
        m,
        n_out,
    };

    let mut z = DVector::from_element(nx + 1, 1.0 / n_out as f64);
    z[nx] = (f * b.theta(&z) - p).norm() + 1.0;

    let mut t = 1.0;
    let mut steps = 0;
    let mut converged = false;
    let n_constraints = (nx + 2) as f64;
    'outer: loop {
        let mut inner = 0;
        loop {
            if steps >= opts.max_newton_steps {
                break 'outer;
            }
            let (grad, hess) = b.grad_hess(&z, t);
            let size = nx + 1 + m;
            let mut kkt = DMatrix::zeros(size, size);
            kkt.view_mut((0, 0), (nx + 1, nx + 1)).copy_from(&hess);
            for n in 0..n_out {
                for i in 0..m {
                    kkt[(nx + 1 + i, i + n * m)] = 1.0;
                    kkt[(i + n * m, nx + 1 + i)] = 1.0;
                }
            }
            let mut rhs = DVector::zeros(size);
            rhs.rows_mut(0, nx + 1).copy_from(&(-&grad));
            let sol = kkt
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Domain("singular KKT matrix in barrier solver".into()))?;
            let dz = sol.rows(0, nx + 1).into_owned();
            let slope = grad.dot(&dz);
            steps += 1;
            inner += 1;
            let phi = b.value(&z, t).expect("iterate stays interior");
            // The decrement bounds the barrier suboptimality; below this
            // level it is dominated by rounding in the barrier value, and
            // its effect on the objective is about `1e-10 f`.
            if -slope / 2.0 < 1e-10 * phi.abs().max(1.0) || inner > MAX_INNER_STEPS {
                break;
            }
            let mut alpha = 1.0;
            loop {
                let trial = &z + &dz * alpha;
                if let Some(v) = b.value(&trial, t) {
                    if v <= phi + 0.25 * alpha * slope {
                        z = trial;
                        break;
                    }
                }
                alpha *= 0.5;
                if alpha < 1e-20 {
                    break;
                }
            }
            if alpha < 1e-20 {
                break;
            }
        }
        if n_constraints / t < opts.gap_tolerance {
            converged = true;
            break;
        }
        t *= 10.0;
    }

    let theta = b.theta(&z);
    Ok(BarrierSolution {
        objective: b.true_objective(&z),
        theta,
        newton_steps: steps,
        converged,
    })
}

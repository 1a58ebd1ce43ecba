//! Objective, gradient and curvature of the smoothed least-squares problem
//!
//! ```text
//! f(Theta) = ||F Theta - P||_F + eps * sum_n sum_i (theta[i, n] - theta[i+1, n])^2
//! ```
//!
//! with every Fock row of `Theta` on the probability simplex. `Theta` is
//! stored column-major, so each outcome column is a contiguous chain in `i`.

use nalgebra::DMatrix;
use rayon::prelude::*;

/// Residual norm below which the norm is treated as non-differentiable and
/// its gradient is taken as zero.
pub const RESIDUAL_FLOOR: f64 = 1e-12;

/// Probe-matrix entries below this fraction of their row maximum are
/// dropped from the banded copy. They change products by less than one ulp.
const BAND_CUTOFF: f64 = 1e-30;

/// Work above which column-parallel products pay off.
const PARALLEL_WORK: usize = 1 << 18;

/// Row-banded copy of the probe matrix. Poisson rows are negligible far from
/// their mean, so each row keeps one contiguous window of Fock indices.
#[derive(Debug, Clone)]
pub(crate) struct Banded {
    start: Vec<usize>,
    rows: Vec<Vec<f64>>,
    n_cols: usize,
}

impl Banded {
    pub fn new(f: &DMatrix<f64>) -> Self {
        let mut start = Vec::with_capacity(f.nrows());
        let mut rows = Vec::with_capacity(f.nrows());
        for row in f.row_iter() {
            let max = row.iter().copied().fold(0.0, f64::max);
            let keep = |v: f64| v > 0.0 && v >= max * BAND_CUTOFF;
            match row.iter().position(|&v| keep(v)) {
                Some(lo) => {
                    let hi = row.iter().rposition(|&v| keep(v)).unwrap();
                    start.push(lo);
                    rows.push((lo..=hi).map(|i| row[i]).collect());
                }
                None => {
                    start.push(0);
                    rows.push(Vec::new());
                }
            }
        }
        Self {
            start,
            rows,
            n_cols: f.ncols(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `F x` for one column.
    fn apply_col(&self, x: &[f64], out: &mut [f64]) {
        for (d, (row, &s)) in self.rows.iter().zip(&self.start).enumerate() {
            out[d] = row
                .iter()
                .zip(&x[s..s + row.len()])
                .map(|(a, b)| a * b)
                .sum();
        }
    }

    /// `F^T r` for one column.
    fn adjoint_col(&self, r: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (d, (row, &s)) in self.rows.iter().zip(&self.start).enumerate() {
            let rd = r[d];
            if rd != 0.0 {
                for (o, a) in out[s..s + row.len()].iter_mut().zip(row) {
                    *o += a * rd;
                }
            }
        }
    }

    /// `sum_d F[d, i]^2` for every Fock index.
    pub fn column_norms_sq(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for (row, &s) in self.rows.iter().zip(&self.start) {
            for (o, a) in out[s..s + row.len()].iter_mut().zip(row) {
                *o += a * a;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut f = DMatrix::zeros(self.rows.len(), self.n_cols);
        for (d, (row, &s)) in self.rows.iter().zip(&self.start).enumerate() {
            for (a, &v) in row.iter().enumerate() {
                f[(d, s + a)] = v;
            }
        }
        f
    }

    /// Dense `F^T F`, only used for small problems.
    #[cfg(test)]
    pub fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.n_cols, self.n_cols);
        for (row, &s) in self.rows.iter().zip(&self.start) {
            for (a, &va) in row.iter().enumerate() {
                for (b, &vb) in row.iter().enumerate() {
                    g[(s + a, s + b)] += va * vb;
                }
            }
        }
        g
    }
}

/// Evaluated objective at one point.
#[derive(Debug, Clone)]
pub(crate) struct Eval {
    /// `||r|| + eps S`.
    pub objective: f64,
    pub residual: f64,
    pub penalty: f64,
    /// `F Theta - P`.
    pub resid: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Problem {
    pub f: Banded,
    pub p: DMatrix<f64>,
    pub eps: f64,
    pub n_fock: usize,
    pub n_out: usize,
    parallel: bool,
}

impl Problem {
    pub fn new(f: &DMatrix<f64>, p: &DMatrix<f64>, eps: f64) -> Self {
        let band = Banded::new(f);
        let parallel = band.nnz() * p.ncols() >= PARALLEL_WORK;
        Self {
            n_fock: f.ncols(),
            n_out: p.ncols(),
            f: band,
            p: p.clone(),
            eps,
            parallel,
        }
    }

    fn n_probes(&self) -> usize {
        self.p.nrows()
    }

    /// Runs `op` on every outcome column, writing into matching columns of
    /// `out`. Results do not depend on the thread count.
    fn per_column<F>(&self, input: &DMatrix<f64>, out: &mut DMatrix<f64>, op: F)
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let in_len = input.nrows();
        let out_len = out.nrows();
        let src = input.as_slice();
        let dst = out.as_mut_slice();
        if self.parallel {
            dst.par_chunks_mut(out_len)
                .zip(src.par_chunks(in_len))
                .for_each(|(o, x)| op(x, o));
        } else {
            dst.chunks_mut(out_len)
                .zip(src.chunks(in_len))
                .for_each(|(o, x)| op(x, o));
        }
    }

    /// `F X`.
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_probes(), self.n_out);
        self.per_column(x, &mut out, |c, o| self.f.apply_col(c, o));
        out
    }

    /// `F^T R`.
    pub fn adjoint(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_fock, self.n_out);
        self.per_column(r, &mut out, |c, o| self.f.adjoint_col(c, o));
        out
    }

    pub fn penalty(&self, theta: &DMatrix<f64>) -> f64 {
        theta
            .column_iter()
            .map(|c| {
                c.as_slice()
                    .windows(2)
                    .map(|w| (w[0] - w[1]).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }

    /// `out += scale * D^T D x`, column by column.
    pub fn add_second_difference(&self, x: &DMatrix<f64>, scale: f64, out: &mut DMatrix<f64>) {
        if scale == 0.0 || self.n_fock < 2 {
            return;
        }
        let m = self.n_fock;
        for (xc, mut oc) in x.column_iter().zip(out.column_iter_mut()) {
            for i in 0..m {
                let mut v = 0.0;
                if i > 0 {
                    v += xc[i] - xc[i - 1];
                }
                if i + 1 < m {
                    v += xc[i] - xc[i + 1];
                }
                oc[i] += scale * v;
            }
        }
    }

    pub fn eval(&self, theta: &DMatrix<f64>) -> Eval {
        let resid = self.forward(theta) - &self.p;
        let residual = resid.norm();
        let penalty = self.penalty(theta);
        let objective = residual + self.eps * penalty;
        Eval {
            objective,
            residual,
            penalty,
            resid,
        }
    }

    #[cfg(test)]
    pub fn objective(&self, theta: &DMatrix<f64>) -> f64 {
        self.eval(theta).objective
    }

    /// Gradient of the objective. The norm is not differentiable at a
    /// vanishing residual; its gradient is taken as zero there.
    pub fn gradient(&self, theta: &DMatrix<f64>, e: &Eval) -> DMatrix<f64> {
        let mut g = if e.residual < RESIDUAL_FLOOR {
            DMatrix::zeros(self.n_fock, self.n_out)
        } else {
            self.adjoint(&e.resid) / e.residual
        };
        self.add_second_difference(theta, 2.0 * self.eps, &mut g);
        g
    }
}

/// The quadratic program `||F Theta - P||^2 / 2 + lambda S(Theta)` on the
/// same feasible set. For `lambda = eps ||r*||` its minimisers are those of
/// the norm objective, and its curvature does not depend on the residual.
pub(crate) struct Quadratic<'a> {
    pub prob: &'a Problem,
    pub lambda: f64,
}

impl Quadratic<'_> {
    pub fn merit(&self, e: &Eval) -> f64 {
        0.5 * e.residual * e.residual + self.lambda * e.penalty
    }

    pub fn gradient(&self, theta: &DMatrix<f64>, e: &Eval) -> DMatrix<f64> {
        let mut g = self.prob.adjoint(&e.resid);
        self.prob
            .add_second_difference(theta, 2.0 * self.lambda, &mut g);
        g
    }

    /// Diagonal of the Hessian, one value per Fock index.
    pub fn hess_diag(&self) -> Vec<f64> {
        let m = self.prob.n_fock;
        let mut d = self.prob.f.column_norms_sq();
        for (i, v) in d.iter_mut().enumerate() {
            *v += 2.0 * self.lambda * ((i > 0) as u8 + (i + 1 < m) as u8) as f64;
        }
        d
    }
}

/// Euclidean projection of `v` onto `{x >= 0, sum x = 1}` by sorting.
pub fn project_simplex(v: &mut [f64], scratch: &mut Vec<f64>) {
    scratch.clear();
    scratch.extend_from_slice(v);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (j, &u) in scratch.iter().enumerate() {
        cum += u;
        let t = (cum - 1.0) / (j + 1) as f64;
        if u - t > 0.0 {
            tau = t;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - tau).max(0.0));
}

/// Projects every Fock row of `theta` onto the simplex.
pub fn project_rows(theta: &mut DMatrix<f64>) {
    let mut row = Vec::with_capacity(theta.ncols());
    let mut scratch = Vec::with_capacity(theta.ncols());
    for i in 0..theta.nrows() {
        row.clear();
        row.extend(theta.row(i).iter());
        project_simplex(&mut row, &mut scratch);
        for (n, v) in row.iter().enumerate() {
            theta[(i, n)] = *v;
        }
    }
}

/// First-order optimality measure `||Theta - proj(Theta - g)||_inf`.
pub fn kkt_residual(theta: &DMatrix<f64>, grad: &DMatrix<f64>) -> f64 {
    let mut trial = theta - grad;
    project_rows(&mut trial);
    (theta - trial).amax()
}

/// Frank-Wolfe gap `sum_i (g_i . theta_i - min_n g_in)`. For a convex
/// objective with gradient `grad` at `theta` it bounds the distance of the
/// objective to its minimum over the row simplices.
pub fn duality_gap(theta: &DMatrix<f64>, grad: &DMatrix<f64>) -> f64 {
    let mut gap = 0.0;
    for i in 0..theta.nrows() {
        let g = grad.row(i);
        gap += g.dot(&theta.row(i)) - g.min();
    }
    gap.max(0.0)
}

/// Clamps negatives and rescales every row to sum to one.
pub fn renormalize_rows(theta: &mut DMatrix<f64>) {
    for i in 0..theta.nrows() {
        let mut row = theta.row_mut(i);
        row.iter_mut().for_each(|v| *v = v.max(0.0));
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            let n = row.len() as f64;
            row.fill(1.0 / n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_problem(eps: f64) -> (Problem, DMatrix<f64>) {
        let f = DMatrix::from_fn(4, 6, |d, i| {
            crate::probe_states::poisson_pmf(i as u64, 0.7 * d as f64)
        });
        let theta = DMatrix::from_fn(6, 3, |i, n| 1.0 + ((i * 3 + n) % 5) as f64);
        let mut theta = theta;
        renormalize_rows(&mut theta);
        let p = DMatrix::from_fn(4, 3, |d, n| 0.2 + 0.1 * ((d + n) % 3) as f64);
        (Problem::new(&f, &p, eps), theta)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (prob, theta) = small_problem(0.3);
        let e = prob.eval(&theta);
        let g = prob.gradient(&theta, &e);
        let h = 1e-6;
        for k in 0..theta.len() {
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (prob.objective(&a) - prob.objective(&b)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-7, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn quadratic_derivatives_match_finite_differences() {
        let (prob, theta) = small_problem(0.0);
        let q = Quadratic {
            prob: &prob,
            lambda: 0.05,
        };
        let merit = |x: &DMatrix<f64>| q.merit(&prob.eval(x));
        let g = q.gradient(&theta, &prob.eval(&theta));
        let h = 1e-6;
        for k in 0..theta.len() {
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (merit(&a) - merit(&b)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "{k}: {fd} vs {}", g[k]);
        }
        let diag = q.hess_diag();
        for k in 0..theta.len() {
            let mut x = theta.clone();
            x[k] += 1.0;
            let curv = q.gradient(&x, &prob.eval(&x))[k] - g[k];
            assert!((curv - diag[k % 6]).abs() < 1e-12);
        }
    }

    #[test]
    fn banded_products_match_dense() {
        let f = DMatrix::from_fn(5, 40, |d, i| {
            crate::probe_states::poisson_pmf(i as u64, (d * d) as f64)
        });
        let prob = Problem::new(&f, &DMatrix::zeros(5, 2), 0.0);
        let x = DMatrix::from_fn(40, 2, |i, n| (i as f64 * 0.37 + n as f64).sin());
        assert!((prob.forward(&x) - &f * &x).amax() < 1e-15);
        let r = DMatrix::from_fn(5, 2, |d, n| d as f64 - n as f64);
        assert!((prob.adjoint(&r) - f.transpose() * &r).amax() < 1e-15);
        assert!((prob.f.gram() - f.transpose() * &f).amax() < 1e-15);
        assert!((prob.f.to_dense() - &f).amax() < 1e-29);
    }

    proptest! {
        #[test]
        fn simplex_projection_is_feasible_and_optimal(
            v in proptest::collection::vec(-3.0f64..3.0, 1..12)
        ) {
            let mut x = v.clone();
            project_simplex(&mut x, &mut Vec::new());
            prop_assert!(x.iter().all(|&a| a >= 0.0));
            prop_assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Variational inequality: <v - x, y - x> <= 0 for simplex vertices y.
            for k in 0..x.len() {
                let inner: f64 = (0..x.len())
                    .map(|j| (v[j] - x[j]) * (if j == k { 1.0 } else { 0.0 } - x[j]))
                    .sum();
                prop_assert!(inner <= 1e-10);
            }
        }
    }
}

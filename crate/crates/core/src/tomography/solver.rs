//! Solver for the smoothed POVM reconstruction.
//!
//! Wherever the optimal residual `rho*` is positive, the minimisers of
//! `||r|| + eps S` are exactly those of the quadratic program
//! `||r||^2 / 2 + lambda S` with `lambda = eps rho*`. The solver searches
//! `lambda` with a safeguarded secant method on `ln(lambda / rho(lambda))`
//! and solves every quadratic program with diagonally scaled FISTA, exact
//! per-row simplex projection and adaptive restart. Small problems are then
//! finished by an active-set method whose subspace steps are dense
//! least-squares solves, which certifies optimality up to rounding. Large
//! Fock dimensions start from a solve on a coarser grid.

use std::cell::OnceCell;

use nalgebra::{DMatrix, DVector};

use super::problem::{
    duality_gap, kkt_residual, project_rows, renormalize_rows, Eval, Problem, Quadratic,
    RESIDUAL_FLOOR,
};

/// Entries at or below this value are treated as sitting on their bound.
const ZERO: f64 = 1e-15;
/// Largest number of free entries handled by the active-set phase.
const DENSE_MAX: usize = 800;
/// First-order iterations between optimality checks.
const CHECK_EVERY: usize = 20;
/// Fock dimension above which a coarse solve supplies the starting point.
const COARSE_ABOVE: usize = 600;
const COARSEN: usize = 4;
/// `|ln(lambda / rho) - ln eps|` accepted as a match.
const MATCH_TOL: f64 = 1e-9;
/// Penalty weights tried on the way to an unpenalised solve.
const CONTINUATION_STEPS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Settings {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_newton_iterations: usize,
    pub polish: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub theta: DMatrix<f64>,
    pub eval: Eval,
    pub kkt: f64,
    pub gap: f64,
    pub iterations: usize,
    pub newton_iterations: usize,
    /// The final quadratic program was solved to rounding level at the
    /// matching penalty weight.
    pub certified: bool,
    pub history: Vec<f64>,
}

/// Running state shared by the outer and inner loops.
struct Run<'a> {
    prob: &'a Problem,
    s: &'a Settings,
    best: DMatrix<f64>,
    best_objective: f64,
    history: Vec<f64>,
    iterations: usize,
    newton: usize,
}

impl Run<'_> {
    /// Keeps `y` if it lowers the objective.
    fn offer(&mut self, y: &DMatrix<f64>) {
        let mut cand = y.clone();
        renormalize_rows(&mut cand);
        let obj = self.prob.eval(&cand).objective;
        if obj < self.best_objective {
            self.best_objective = obj;
            self.best = cand;
            self.history.push(obj);
        }
    }

    fn kkt(&self, y: &DMatrix<f64>) -> f64 {
        kkt_residual(y, &self.prob.gradient(y, &self.prob.eval(y)))
    }

    /// FISTA followed, for small problems, by the active-set phase.
    /// Returns whether the program was solved to rounding level.
    fn inner(&mut self, q: &Quadratic, y: &mut DMatrix<f64>, tol: f64) -> bool {
        let remaining = self.s.max_iterations.saturating_sub(self.iterations);
        let cap = (remaining / 4).max(remaining.min(1000));
        let polishing = self.s.polish && self.newton < self.s.max_newton_iterations;
        let first_tol = if polishing { tol.max(1e-6) } else { tol };
        self.iterations += fista(q, y, first_tol, cap);
        if !polishing {
            return false;
        }
        let budget = self.s.max_newton_iterations - self.newton;
        let r = active_set(q, y, budget);
        self.newton += r.iterations;
        r.certified
    }
}

pub(crate) fn solve(prob: &Problem, x0: DMatrix<f64>, s: &Settings) -> Outcome {
    let mut y = x0;
    project_rows(&mut y);
    let e0 = prob.eval(&y);
    let mut run = Run {
        prob,
        s,
        best: y.clone(),
        best_objective: e0.objective,
        history: vec![e0.objective],
        iterations: 0,
        newton: 0,
    };

    let certified = if run.kkt(&y) <= s.tolerance {
        false
    } else if prob.eps == 0.0 {
        // Without a penalty the program is degenerate, and multipliers drop
        // below rounding long before the residual stops falling. A short
        // continuation through small weights reaches a much lower residual.
        let mut c = false;
        for k in 0..=CONTINUATION_STEPS {
            let rho = prob.eval(&y).residual;
            let lambda = if k == CONTINUATION_STEPS {
                0.0
            } else {
                rho * 10f64.powi(-4 - 2 * k as i32)
            };
            let q = Quadratic { prob, lambda };
            c = run.inner(&q, &mut y, s.tolerance);
            run.offer(&y);
        }
        c
    } else {
        search_lambda(&mut run, &mut y)
    };

    let theta = run.best;
    let eval = prob.eval(&theta);
    let grad = prob.gradient(&theta, &eval);
    let kkt = kkt_residual(&theta, &grad);
    let gap = duality_gap(&theta, &grad);
    Outcome {
        theta,
        eval,
        kkt,
        gap,
        iterations: run.iterations,
        newton_iterations: run.newton,
        certified,
        history: run.history,
    }
}

/// Secant search on `h(lambda) = ln(lambda / rho(lambda)) - ln eps`, with
/// the bracket kept once both signs are seen. Inner solves are inexact
/// while `lambda` is still far off.
fn search_lambda(run: &mut Run, y: &mut DMatrix<f64>) -> bool {
    let prob = run.prob;
    let target = prob.eps.ln();
    let mut lam = prob.eps * prob.eval(y).residual.max(RESIDUAL_FLOOR);
    let mut lo: Option<(f64, f64)> = None;
    let mut hi: Option<(f64, f64)> = None;
    let mut last: Option<(f64, f64)> = None;
    let mut h_prev = 1.0f64;
    for _ in 0..100 {
        let q = Quadratic { prob, lambda: lam };
        let tol = run.s.tolerance.max(1e-3 * h_prev.abs().min(1.0));
        let certified = run.inner(&q, y, tol);
        run.offer(y);
        let rho = prob.eval(y).residual;
        let t = lam.ln();
        let h = if rho > 0.0 {
            t - rho.ln() - target
        } else {
            f64::INFINITY
        };
        tracing::trace!(
            lambda = lam,
            rho,
            h,
            iterations = run.iterations,
            "penalty weight"
        );
        if h.abs() <= MATCH_TOL {
            return certified;
        }
        if h.abs() < 1e-6 && run.kkt(&run.best) <= run.s.tolerance {
            return false;
        }
        let out_of_budget = run.iterations >= run.s.max_iterations
            && (!run.s.polish || run.newton >= run.s.max_newton_iterations);
        if out_of_budget {
            return false;
        }
        h_prev = h;
        if h < 0.0 {
            lo = Some((t, h));
        } else {
            hi = Some((t, h));
        }
        // Secant step through the last two points, slope one otherwise:
        // the latter is the fixed-point update lambda = eps * rho.
        let mut next = match last {
            Some((t0, h0)) if h.is_finite() && h0.is_finite() && h != h0 => {
                t - h * (t - t0) / (h - h0)
            }
            _ if h.is_finite() => t - h,
            _ => t - 1.0,
        };
        if let (Some((a, ha)), Some((b, hb))) = (lo, hi) {
            if (b - a).abs() < 1e-12 {
                // The residual jumps across the match at rounding level.
                return certified;
            }
            if !(next > a.min(b) && next < a.max(b)) {
                next = if hb.is_finite() {
                    a - ha * (b - a) / (hb - ha)
                } else {
                    0.5 * (a + b)
                };
            }
        } else if !next.is_finite() {
            next = t - 1.0;
        }
        next = next.clamp(t - 5.0, t + 5.0);
        if next.exp() < f64::MIN_POSITIVE * 1e10 {
            // The residual vanishes for every weight: the data are fitted
            // exactly and the penalty is minimised on that set.
            return false;
        }
        last = Some((t, h));
        lam = next.exp();
    }
    false
}

/// Starting point for large problems from a solve on a coarser Fock grid.
///
/// With `Theta = Q Theta_c`, where `Q` interpolates linearly between every
/// `COARSEN`-th Fock index, the objective becomes the same problem for
/// `F Q` with the penalty scaled by `1 / COARSEN`, and `Q` maps feasible
/// points to feasible points. Smoothing-dominated modes, which make
/// first-order methods slow on the fine grid, are cheap to resolve there.
pub(crate) fn coarse_start(
    f: &DMatrix<f64>,
    p: &DMatrix<f64>,
    eps: f64,
    s: &Settings,
) -> Option<DMatrix<f64>> {
    let m1 = f.ncols();
    if m1 <= COARSE_ABOVE {
        return None;
    }
    let nodes: Vec<usize> = (0..m1)
        .step_by(COARSEN)
        .chain(((m1 - 1) % COARSEN != 0).then_some(m1 - 1))
        .collect();
    let mut q = DMatrix::zeros(m1, nodes.len());
    for (j, w) in nodes.windows(2).enumerate() {
        let h = (w[1] - w[0]) as f64;
        for i in w[0]..=w[1] {
            let t = (i - w[0]) as f64 / h;
            q[(i, j)] = 1.0 - t;
            q[(i, j + 1)] = t;
        }
    }
    let fc = f * &q;
    let eps_c = eps / COARSEN as f64;
    let coarse = Settings {
        polish: false,
        ..s.clone()
    };
    let x0 = coarse_start(&fc, p, eps_c, &coarse)
        .unwrap_or_else(|| DMatrix::from_element(nodes.len(), p.ncols(), 1.0 / p.ncols() as f64));
    let out = solve(&Problem::new(&fc, p, eps_c), x0, &coarse);
    let mut x = &q * out.theta;
    renormalize_rows(&mut x);
    Some(x)
}

/// FISTA on the quadratic program in the metric of the Hessian diagonal.
/// The diagonal is constant along every simplex row, so the scaled
/// projection is the plain one. Stops once the projected gradient, scaled
/// to the norm objective, is below `tol`, when progress stalls, or after
/// `max_iter` iterations. Returns the iteration count.
fn fista(q: &Quadratic, x: &mut DMatrix<f64>, tol: f64, max_iter: usize) -> usize {
    let prob = q.prob;
    let diag = q.hess_diag();
    let top = diag.iter().copied().fold(0.0, f64::max);
    let w: Vec<f64> = diag.iter().map(|d| (d / top).max(1e-12)).collect();
    let scaled_step = |y: &DMatrix<f64>, g: &DMatrix<f64>, lip: f64| {
        let mut z = y.clone();
        for n in 0..z.ncols() {
            for (i, wi) in w.iter().enumerate() {
                z[(i, n)] -= g[(i, n)] / (lip * wi);
            }
        }
        project_rows(&mut z);
        z
    };
    let weighted_sq = |d: &DMatrix<f64>| -> f64 {
        let mut s = 0.0;
        for n in 0..d.ncols() {
            for (i, wi) in w.iter().enumerate() {
                s += wi * d[(i, n)] * d[(i, n)];
            }
        }
        s
    };

    let mut ex = prob.eval(x);
    let mut fx = q.merit(&ex);
    let mut y = x.clone();
    let mut y_is_x = true;
    let mut t = 1.0f64;
    let mut lip = 1.0f64;
    let mut last_check = f64::INFINITY;
    let mut stalled = 0;
    let mut iterations = 0;
    for k in 0..max_iter {
        if k % CHECK_EVERY == 0 {
            let g = q.gradient(x, &ex) / ex.residual.max(RESIDUAL_FLOOR);
            if kkt_residual(x, &g) <= tol {
                break;
            }
            if last_check - fx <= 1e-10 * fx.abs() {
                stalled += 1;
                if stalled >= 5 {
                    break;
                }
            } else {
                stalled = 0;
            }
            last_check = fx;
        }
        iterations = k + 1;
        let ey = if y_is_x { ex.clone() } else { prob.eval(&y) };
        let fy = q.merit(&ey);
        let gy = q.gradient(&y, &ey);
        let (z, ez, fz) = loop {
            let z = scaled_step(&y, &gy, lip);
            let ez = prob.eval(&z);
            let fz = q.merit(&ez);
            let diff = &z - &y;
            let model = fy + gy.dot(&diff) + 0.5 * lip * weighted_sq(&diff);
            if fz <= model + 1e-15 * fy.abs() || lip > 1e300 {
                break (z, ez, fz);
            }
            lip *= 2.0;
        };
        if fz <= fx {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let momentum = (t - 1.0) / t_next;
            y = &z + (&z - &*x) * momentum;
            y_is_x = momentum == 0.0;
            *x = z;
            ex = ez;
            fx = fz;
            t = t_next;
        } else {
            // Restart from the last accepted point.
            y = x.clone();
            y_is_x = true;
            t = 1.0;
        }
        lip *= 0.9;
    }
    iterations
}

/// Result of one active-set run.
struct ActiveSet {
    iterations: usize,
    certified: bool,
}

/// Objective differences below this are indistinguishable from rounding.
fn noise_floor(prob: &Problem, merit: f64, residual: f64) -> f64 {
    let data = 10.0 * f64::EPSILON * (prob.p.len() as f64).sqrt() * prob.p.amax().max(1.0);
    1e-15 * merit.abs() + data * residual + f64::MIN_POSITIVE
}

/// Rounding level of the multipliers of bound entries.
fn multiplier_noise(q: &Quadratic) -> f64 {
    let prob = q.prob;
    f64::EPSILON * ((prob.p.nrows() as f64).sqrt() * prob.p.amax().max(1.0) + 4.0 * q.lambda)
}

/// Primal active-set method for the quadratic program. Subspace minimisers
/// come from dense least-squares solves, steps follow the projection arc,
/// and bound entries with negative multipliers are then released. Gives up
/// without certifying when more than [`DENSE_MAX`] entries are free.
fn active_set(q: &Quadratic, x: &mut DMatrix<f64>, max_iter: usize) -> ActiveSet {
    let prob = q.prob;
    let m = x.nrows();
    let mut free: Vec<bool> = x.iter().map(|&v| v > ZERO).collect();
    for (v, &f) in x.iter_mut().zip(&free) {
        if !f {
            *v = 0.0;
        }
    }
    renormalize_rows(x);
    let dense_f = OnceCell::new();
    let mut single = false;
    let mut moved_since_release = true;
    for it in 1..=max_iter {
        let n_free = free.iter().filter(|&&f| f).count();
        if n_free > DENSE_MAX {
            return ActiveSet {
                iterations: it - 1,
                certified: false,
            };
        }
        let e = prob.eval(x);
        let merit = q.merit(&e);
        let g = q.gradient(x, &e);
        let dense_f = dense_f.get_or_init(|| prob.f.to_dense());
        let Some(d) = dense_direction(q, x, &e, &free, dense_f) else {
            return ActiveSet {
                iterations: it,
                certified: false,
            };
        };
        let dec = -g.dot(&d);
        tracing::trace!(it, merit, dec, n_free, single, "active-set step");

        if !(dec > noise_floor(prob, merit, e.residual)) {
            // Subspace minimiser: release bound entries that pull inwards.
            // If the last release bought nothing, retry with the single
            // most promising entry before declaring optimality.
            if !moved_since_release {
                if single {
                    return ActiveSet {
                        iterations: it,
                        certified: true,
                    };
                }
                single = true;
            }
            if !release(&g, &mut free, m, multiplier_noise(q), single) {
                return ActiveSet {
                    iterations: it,
                    certified: true,
                };
            }
            moved_since_release = false;
            continue;
        }

        if !projected_step(q, x, &d, &g, merit, &free) {
            let mut alpha = 1.0f64;
            for ((&xk, &dk), &f) in x.iter().zip(d.iter()).zip(free.iter()) {
                if f && dk < 0.0 {
                    alpha = alpha.min(xk / -dk);
                }
            }
            if alpha <= 0.0 {
                for ((&xk, &dk), f) in x.iter().zip(d.iter()).zip(free.iter_mut()) {
                    if *f && xk <= ZERO && dk < 0.0 {
                        *f = false;
                    }
                }
                continue;
            }
            x.zip_apply(&d, |a, b| *a += alpha * b);
        }
        for (k, f) in free.iter_mut().enumerate() {
            if *f && x[k] <= ZERO {
                *f = false;
                x[k] = 0.0;
            }
        }
        renormalize_rows(x);
        moved_since_release = true;
        single = false;
    }
    ActiveSet {
        iterations: max_iter,
        certified: false,
    }
}

/// Armijo search along the projection arc `proj(x + alpha d)`, which lets
/// many entries reach their bound in one step. Returns false if no step
/// with `alpha >= 1/8` is acceptable.
fn projected_step(
    q: &Quadratic,
    x: &mut DMatrix<f64>,
    d: &DMatrix<f64>,
    g: &DMatrix<f64>,
    merit: f64,
    free: &[bool],
) -> bool {
    let mut alpha = 1.0;
    while alpha >= 0.125 {
        let mut trial = &*x + d * alpha;
        project_rows(&mut trial);
        for (v, &f) in trial.iter_mut().zip(free) {
            if !f {
                *v = 0.0;
            }
        }
        renormalize_rows(&mut trial);
        let slope = g.dot(&(&trial - &*x));
        if slope < 0.0 && q.merit(&q.prob.eval(&trial)) <= merit + 1e-4 * slope {
            *x = trial;
            return true;
        }
        alpha *= 0.5;
    }
    false
}

/// Frees bound entries whose multiplier is below `-tol`: the most negative
/// one per Fock row, or only the overall most negative when `single`.
fn release(g: &DMatrix<f64>, free: &mut [bool], m: usize, tol: f64, single: bool) -> bool {
    let n_out = g.ncols();
    let mut picks: Vec<(usize, f64)> = Vec::new();
    for i in 0..m {
        let (mut sum, mut count) = (0.0, 0usize);
        for n in 0..n_out {
            if free[i + n * m] {
                sum += g[(i, n)];
                count += 1;
            }
        }
        let nu = if count > 0 { -sum / count as f64 } else { 0.0 };
        let mut best: Option<(usize, f64)> = None;
        for n in 0..n_out {
            let k = i + n * m;
            let lambda = g[(i, n)] + nu;
            if !free[k] && lambda < -tol && best.is_none_or(|(_, b)| lambda < b) {
                best = Some((k, lambda));
            }
        }
        picks.extend(best);
    }
    if single {
        if let Some(&p) = picks.iter().min_by(|a, b| a.1.total_cmp(&b.1)) {
            picks = vec![p];
        }
    }
    for &(k, _) in &picks {
        free[k] = true;
    }
    !picks.is_empty()
}

/// Newton step on the free entries from the least-squares form
/// `min ||A d + b||` with `A = [F; sqrt(2 lambda) D]` per outcome column and
/// `b` the current residual, subject to zero row sums of `d`. The row-sum
/// constraints are eliminated with an orthonormal basis, and the reduced
/// problem is solved by SVD, which keeps directions whose curvature is far
/// below the reach of the normal equations.
fn dense_direction(
    q: &Quadratic,
    x: &DMatrix<f64>,
    e: &Eval,
    free: &[bool],
    dense_f: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let prob = q.prob;
    let (m, n_out, n_probes) = (prob.n_fock, prob.n_out, dense_f.nrows());
    let root = (2.0 * q.lambda).sqrt();
    let pen_rows = if root > 0.0 { m.saturating_sub(1) } else { 0 };
    let block = n_probes + pen_rows;

    // Orthonormal basis of zero-sum moves within each row's free entries.
    let mut basis: Vec<Vec<(usize, f64)>> = Vec::new();
    for i in 0..m {
        let ks: Vec<usize> = (0..n_out).map(|n| i + n * m).filter(|&k| free[k]).collect();
        for j in 1..ks.len() {
            let norm = ((j * (j + 1)) as f64).sqrt();
            let mut v: Vec<(usize, f64)> = ks[..j].iter().map(|&k| (k, 1.0 / norm)).collect();
            v.push((ks[j], -(j as f64) / norm));
            basis.push(v);
        }
    }
    if basis.is_empty() {
        return Some(DMatrix::zeros(m, n_out));
    }

    let mut a = DMatrix::zeros(block * n_out, basis.len());
    for (c, v) in basis.iter().enumerate() {
        for &(k, w) in v {
            let (i, n) = (k % m, k / m);
            let off = n * block;
            for d in 0..n_probes {
                a[(off + d, c)] += w * dense_f[(d, i)];
            }
            if pen_rows > 0 {
                if i + 1 < m {
                    a[(off + n_probes + i, c)] += w * root;
                }
                if i > 0 {
                    a[(off + n_probes + i - 1, c)] -= w * root;
                }
            }
        }
    }
    let mut b = DVector::zeros(block * n_out);
    for n in 0..n_out {
        let off = n * block;
        for d in 0..n_probes {
            b[off + d] = -e.resid[(d, n)];
        }
        for i in 0..pen_rows {
            b[off + n_probes + i] = -root * (x[(i, n)] - x[(i + 1, n)]);
        }
    }
    let svd = a.svd(true, true);
    let cutoff = (block * n_out).max(basis.len()) as f64 * f64::EPSILON * svd.singular_values.max();
    let y = svd.solve(&b, cutoff).ok()?;
    let mut d = DMatrix::zeros(m, n_out);
    for (v, &yc) in basis.iter().zip(y.iter()) {
        for &(k, w) in v {
            d[k] += w * yc;
        }
    }
    d.iter().all(|v: &f64| v.is_finite()).then_some(d)
}

//! Three-parameter fit of the loop model to a POVM set, and extrapolation of
//! the fitted model to more outcomes and larger Fock spaces.
//!
//! The fit minimises `||Theta_exp - Theta_model(eta_det, R, eta_loop)||_F`
//! over all outcomes at once. Each parameter is mapped through a logistic
//! function so that the derivative-free Nelder-Mead search stays inside
//! `(0, 1)`. Searches start from a grid of points; the best end point is
//! restarted until a fresh simplex no longer improves it.

mod extrapolate;

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use argmin::core::{CostFunction, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector_model::{model_povm_rows, LoopParams};
use crate::povm::PovmSet;
use crate::{Error, Result};

pub use extrapolate::{
    export_extrapolation, extrapolate_chunked, extrapolate_povm, extrapolate_povm_within, log_grid,
    write_extrapolated_series, ExtrapolationExport, DEFAULT_MEMORY_BUDGET,
};

/// Grid values per parameter for the default starts.
pub const START_GRID: [f64; 3] = [0.1, 0.545, 0.99];
/// Smallest eigenvalue of the residual Hessian, relative to the largest,
/// below which the residual is reported as flat.
pub const FLAT_RATIO: f64 = 1e-9;
/// Bound on the logistic argument, keeping parameters strictly inside
/// `(0, 1)`.
const U_MAX: f64 = 25.0;
/// Spread of the initial simplex in logistic coordinates.
const SIMPLEX_STEP: f64 = 0.25;
const MAX_RESTARTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Exclude Fock rows the POVM marks as unsupported by data.
    pub use_support_mask: bool,
    /// Iteration cap of every Nelder-Mead run.
    pub max_iterations: u64,
    /// Spread of the simplex cost values at which a first-pass search stops.
    pub coarse_tolerance: f64,
    /// Same for the restarts, relative to the best cost.
    pub fine_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            use_support_mask: true,
            max_iterations: 2000,
            coarse_tolerance: 1e-8,
            fine_tolerance: 1e-12,
        }
    }
}

/// One-sigma uncertainties; `None` where the curvature does not define one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamUncertainty {
    pub eta_det: Option<f64>,
    #[serde(rename = "R")]
    pub reflectivity: Option<f64>,
    pub eta_loop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: LoopParams,
    /// Frobenius distance between data and model on the rows used.
    pub residual: f64,
    pub uncertainty: ParamUncertainty,
    /// The final restart stopped on its tolerance rather than its cap.
    pub converged: bool,
    pub warnings: Vec<String>,
    pub starts_used: usize,
    /// Index of the start that led to the result.
    pub best_start: usize,
    pub rows_used: usize,
    pub evaluations: u64,
}

impl FitResult {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// The 3 x 3 x 3 grid over `[0.1, 0.99]^3`.
pub fn default_starts(n_bins: usize) -> Result<Vec<LoopParams>> {
    let mut out = Vec::with_capacity(27);
    for &eta_det in &START_GRID {
        for &r in &START_GRID {
            for &eta_loop in &START_GRID {
                out.push(LoopParams::new(r, eta_loop, eta_det, n_bins)?);
            }
        }
    }
    Ok(out)
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u.clamp(-U_MAX, U_MAX)).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln().clamp(-U_MAX, U_MAX)
}

/// Squared Frobenius residual as a function of `(eta_det, R, eta_loop)`.
struct Residual<'a> {
    target: &'a DMatrix<f64>,
    rows: Vec<usize>,
    template: LoopParams,
    evaluations: AtomicU64,
}

impl Residual<'_> {
    fn params(&self, p: [f64; 3]) -> Result<LoopParams> {
        LoopParams::new(p[1], p[2], p[0], self.template.n_bins)
            .map(|q| q.with_bin_period(self.template.bin_period_ns))
    }

    fn squared(&self, p: [f64; 3]) -> Result<f64> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let model = model_povm_rows(&self.params(p)?, 0, self.target.nrows());
        let mut s = 0.0;
        for &i in &self.rows {
            for n in 0..self.target.ncols() {
                s += (self.target[(i, n)] - model[(i, n)]).powi(2);
            }
        }
        Ok(s)
    }
}

/// The residual in logistic coordinates, borrowed by each search.
struct Logistic<'a, 'b>(&'a Residual<'b>);

impl CostFunction for Logistic<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, u: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self
            .0
            .squared([logistic(u[0]), logistic(u[1]), logistic(u[2])])?)
    }
}

struct Search {
    u: Vec<f64>,
    cost: f64,
    converged: bool,
}

fn nelder_mead(
    cost: &Residual,
    u0: &[f64],
    sd_tolerance: f64,
    max_iterations: u64,
) -> Result<Search> {
    let mut simplex = vec![u0.to_vec()];
    for k in 0..3 {
        let mut v = u0.to_vec();
        v[k] += if v[k] > 0.0 {
            -SIMPLEX_STEP
        } else {
            SIMPLEX_STEP
        };
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(sd_tolerance)
        .map_err(|e| Error::Config(e.to_string()))?;
    let res = Executor::new(Logistic(cost), solver)
        .configure(|s| s.max_iters(max_iterations))
        .run()
        .map_err(|e| Error::Domain(format!("model fit failed: {e}")))?;
    let state = res.state();
    Ok(Search {
        u: state
            .get_best_param()
            .cloned()
            .unwrap_or_else(|| u0.to_vec()),
        cost: state.get_best_cost(),
        converged: state.get_termination_status()
            == &TerminationStatus::Terminated(TerminationReason::SolverConverged),
    })
}

/// Fits `(eta_det, R, eta_loop)` to `povm` with `n_bins` bins, starting
/// from every entry of `starts`.
pub fn fit_params(
    povm: &PovmSet,
    n_bins: usize,
    starts: &[LoopParams],
    opts: &FitOptions,
) -> Result<FitResult> {
    if povm.n_outcomes() != n_bins + 1 {
        return Err(Error::Dimension(format!(
            "POVM has {} outcomes, {n_bins} bins need {}",
            povm.n_outcomes(),
            n_bins + 1
        )));
    }
    if starts.is_empty() {
        return Err(Error::Config(
            "model fit needs at least one start point".into(),
        ));
    }
    let rows: Vec<usize> = match (opts.use_support_mask, povm.supported()) {
        (true, Some(mask)) => (0..mask.len()).filter(|&i| mask[i]).collect(),
        _ => (0..povm.theta().nrows()).collect(),
    };
    if rows.is_empty() {
        return Err(Error::Data("no supported POVM rows to fit".into()));
    }
    let template = starts[0].with_bins(n_bins)?;
    let cost = Residual {
        target: povm.theta(),
        rows,
        template,
        evaluations: AtomicU64::new(0),
    };

    let searches: Vec<Result<Search>> = starts
        .par_iter()
        .map(|s| {
            let u0 = [logit(s.eta_det), logit(s.reflectivity), logit(s.eta_loop)];
            nelder_mead(&cost, &u0, opts.coarse_tolerance, opts.max_iterations)
        })
        .collect();
    let mut best: Option<(usize, Search)> = None;
    for (k, s) in searches.into_iter().enumerate() {
        let s = s?;
        if best.as_ref().is_none_or(|(_, b)| s.cost < b.cost) {
            best = Some((k, s));
        }
    }
    let (best_start, mut search) = best.expect("at least one start");

    // Restart from the best point until a fresh simplex stops helping.
    for _ in 0..MAX_RESTARTS {
        let tol = (opts.fine_tolerance * search.cost).max(f64::MIN_POSITIVE);
        let next = nelder_mead(&cost, &search.u, tol, opts.max_iterations)?;
        let improved = next.cost < search.cost;
        let converged = next.converged;
        if improved {
            search = next;
        }
        search.converged = converged;
        if !improved || search.cost == 0.0 {
            break;
        }
    }

    let p = [
        logistic(search.u[0]),
        logistic(search.u[1]),
        logistic(search.u[2]),
    ];
    let params = cost.params(p)?;
    let mut warnings = Vec::new();
    let hessian = residual_hessian(&cost, p, search.cost)?;
    let dof = (cost.rows.len() * povm.n_outcomes())
        .saturating_sub(3)
        .max(1) as f64;
    let uncertainty = curvature_uncertainty(&hessian, search.cost / dof, &mut warnings);
    if !search.converged {
        warnings.push("model fit stopped at its iteration cap".into());
    }
    for (name, v) in [("eta_det", p[0]), ("R", p[1]), ("eta_loop", p[2])] {
        if !(1e-6..=1.0 - 1e-6).contains(&v) {
            warnings.push(format!("{name} = {v:e} lies at the edge of its domain"));
        }
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    Ok(FitResult {
        params,
        residual: search.cost.sqrt(),
        uncertainty,
        converged: search.converged,
        warnings,
        starts_used: starts.len(),
        best_start,
        rows_used: cost.rows.len(),
        evaluations: cost.evaluations.load(Ordering::Relaxed),
    })
}

/// Fit from the default start grid with default options.
pub fn fit_params_default(povm: &PovmSet, n_bins: usize) -> Result<FitResult> {
    fit_params(
        povm,
        n_bins,
        &default_starts(n_bins)?,
        &FitOptions::default(),
    )
}

/// Central-difference Hessian of the squared residual in
/// `(eta_det, R, eta_loop)`.
fn residual_hessian(cost: &Residual, p: [f64; 3], s0: f64) -> Result<Matrix3<f64>> {
    let h: Vec<f64> = p
        .iter()
        .map(|&v| (1e-4f64).min(0.5 * v).min(0.5 * (1.0 - v)))
        .collect();
    let at = |d: [f64; 3]| -> Result<f64> { cost.squared([p[0] + d[0], p[1] + d[1], p[2] + d[2]]) };
    let mut hess = Matrix3::zeros();
    for k in 0..3 {
        let mut d = [0.0; 3];
        d[k] = h[k];
        let plus = at(d)?;
        d[k] = -h[k];
        let minus = at(d)?;
        hess[(k, k)] = (plus - 2.0 * s0 + minus) / (h[k] * h[k]);
        for l in 0..k {
            let mut v = [0.0; 4];
            for (c, (sk, sl)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                .into_iter()
                .enumerate()
            {
                let mut d = [0.0; 3];
                d[k] = sk * h[k];
                d[l] = sl * h[l];
                v[c] = at(d)?;
            }
            let x = (v[0] - v[1] - v[2] + v[3]) / (4.0 * h[k] * h[l]);
            hess[(k, l)] = x;
            hess[(l, k)] = x;
        }
    }
    Ok(hess)
}

/// `cov = 2 s^2 H^-1` for a least-squares residual with Hessian `H` and
/// per-entry variance estimate `s^2`.
fn curvature_uncertainty(
    hess: &Matrix3<f64>,
    s2: f64,
    warnings: &mut Vec<String>,
) -> ParamUncertainty {
    let eig = SymmetricEigen::new(*hess);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let none = ParamUncertainty {
        eta_det: None,
        reflectivity: None,
        eta_loop: None,
    };
    if !(max > 0.0) || min <= FLAT_RATIO * max {
        warnings.push(format!(
            "flat residual: Hessian eigenvalues span [{min:e}, {max:e}], parameters are not identifiable"
        ));
        return none;
    }
    let Some(inv) = hess.try_inverse() else {
        return none;
    };
    let sd = |k: usize| {
        let v = 2.0 * s2 * inv[(k, k)];
        (v >= 0.0).then(|| v.sqrt())
    };
    ParamUncertainty {
        eta_det: sd(0),
        reflectivity: sd(1),
        eta_loop: sd(2),
    }
}

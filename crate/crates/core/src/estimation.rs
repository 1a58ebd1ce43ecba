//! Mean photon number of a bright coherent state from its occupied-bin
//! distribution.
//!
//! A coherent pulse of mean `mu` makes bin `j` click independently with
//! probability `1 - exp(-mu q_j)`, so the model distribution is the
//! Poisson-binomial of those probabilities. The estimate minimises the
//! Euclidean distance to the measured distribution over `ln mu`: a grid scan
//! locates the basin and a golden-section search refines it.
//! [`crosscheck_fock_path`] evaluates the same distribution as a Poisson
//! mixture of model Fock rows and serves as an independent oracle.

use std::cell::Cell;
use std::path::Path;

use argmin::core::{CostFunction, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::goldensectionsearch::GoldenSectionSearch;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector_model::poisson_binomial::PoissonBinomial;
use crate::detector_model::{
    model_povm_rows, per_photon_bin_probs, sample_bin_counts, LoopParams, OutcomeDistribution,
    DEFAULT_CHUNK_ROWS, NORMALIZATION_TOL,
};
use crate::ingest::{bin_probabilities, outcome_probabilities};
use crate::probe_states::poisson_pmf;
use crate::{rng, Error, Result};

/// Search range of the mean photon number.
pub const MU_MIN: f64 = 1e-3;
pub const MU_MAX: f64 = 1e9;
/// Grid points per decade of the pre-scan.
pub const SCAN_PER_DECADE: usize = 20;
pub const CONFIDENCE_LEVEL: f64 = 0.95;
/// Two-sided standard normal quantile for [`CONFIDENCE_LEVEL`].
const Z_95: f64 = 1.959_963_984_540_054;
/// A second local minimum of the residual within this factor of the best
/// one counts as a competing basin.
pub const COMPETING_BASIN_RATIO: f64 = 2.0;
/// Fock rows whose Poisson weight falls below this are left out of the
/// explicit path.
const FOCK_PMF_FLOOR: f64 = 1e-16;
/// Relative step in `mu` for the numerical Jacobian.
const JACOBIAN_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Pulses per resampled data set.
    pub n_pulses: u64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    /// Relative width of the final golden-section bracket in shifted `ln mu`.
    pub tolerance: f64,
    pub max_iterations: u64,
    /// Parametric bootstrap around the estimate; off by default.
    pub bootstrap: Option<BootstrapConfig>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 200,
            bootstrap: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    /// Normal approximation from the residual and the Jacobian at the optimum.
    Curvature,
    /// Percentiles of re-estimates on resampled data.
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrightStateEstimate {
    /// Mean photon number per pulse.
    pub mean_photon: f64,
    /// Euclidean distance between data and model at the estimate.
    pub residual: f64,
    pub confidence_interval: (f64, f64),
    pub interval_method: IntervalMethod,
    pub confidence_level: f64,
    pub curvature_interval: (f64, f64),
    pub bootstrap_interval: Option<(f64, f64)>,
    pub bootstrap_trials: usize,
    pub n_outcomes: usize,
    pub scan_points: usize,
    pub evaluations: u64,
    /// The golden-section search stopped on its tolerance.
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl BrightStateEstimate {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Occupied-bin distribution of a coherent state, evaluated repeatedly.
struct CoherentModel {
    q: Vec<f64>,
    pb: PoissonBinomial,
}

impl CoherentModel {
    fn new(params: &LoopParams) -> Self {
        Self {
            q: per_photon_bin_probs(params).as_slice().to_vec(),
            pb: PoissonBinomial::new(params.n_bins),
        }
    }

    fn distribution(&self, mu: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.q.len() + 1];
        if mu == 0.0 {
            out[0] = 1.0;
            return out;
        }
        let p: Vec<f64> = self.q.iter().map(|&q| -(-mu * q).exp_m1()).collect();
        let mut phi: Vec<Complex64> = Vec::with_capacity(self.q.len() / 2 + 1);
        self.pb.fill(&p, &mut phi, &mut out);
        out
    }
}

/// Model distribution for a coherent input of mean `mu`.
pub fn coherent_outcome_distribution(params: &LoopParams, mu: f64) -> Result<OutcomeDistribution> {
    check_mu(mu)?;
    Ok(OutcomeDistribution::from_trusted(
        CoherentModel::new(params).distribution(mu),
    ))
}

fn check_mu(mu: f64) -> Result<()> {
    if mu >= 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "mean photon number must be finite and non-negative, got {mu}"
        )))
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Residual as a function of `x = ln mu - ln MU_MIN + 1`, which stays
/// positive on the search range as the relative stopping rule requires.
struct Objective<'a> {
    model: &'a CoherentModel,
    data: &'a [f64],
    evaluations: &'a Cell<u64>,
}

impl Objective<'_> {
    fn mu(x: f64) -> f64 {
        MU_MIN * (x - 1.0).exp()
    }

    fn x(mu: f64) -> f64 {
        (mu / MU_MIN).ln() + 1.0
    }

    fn residual(&self, mu: f64) -> f64 {
        self.evaluations.set(self.evaluations.get() + 1);
        distance(self.data, &self.model.distribution(mu))
    }
}

impl CostFunction for Objective<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, x: &f64) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.residual(Self::mu(*x)))
    }
}

fn validate_input(p: &OutcomeDistribution, params: &LoopParams) -> Result<()> {
    if p.n_outcomes() != params.n_outcomes() {
        return Err(Error::Dimension(format!(
            "{} outcome probabilities for a {}-bin detector",
            p.n_outcomes(),
            params.n_bins
        )));
    }
    let probs = p.probs();
    if let Some(v) = probs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!(
            "outcome probability {v} outside [0, 1]"
        )));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Domain(format!(
            "outcome probabilities sum to {s}, not 1"
        )));
    }
    Ok(())
}

fn scan_grid() -> Vec<f64> {
    let decades = (MU_MAX / MU_MIN).log10().round() as usize;
    let n = decades * SCAN_PER_DECADE;
    let (lo, hi) = (MU_MIN.ln(), MU_MAX.ln());
    (0..=n)
        .map(|k| (lo + (hi - lo) * k as f64 / n as f64).exp())
        .collect()
}

/// Checks that the model mean increases along the grid until every bin
/// that can click is saturated, and that no other local minimum of the
/// residual fits nearly as well as the best grid point. Minima far above
/// the best one come from the changing width of the model distribution and
/// carry no information.
fn check_basin(model: &CoherentModel, grid: &[f64], residuals: &[f64], best: usize) -> Result<()> {
    let live = model.q.iter().filter(|&&q| q > 0.0).count() as f64;
    if live == 0.0 {
        return Err(Error::Domain(
            "no bin has a nonzero click probability".into(),
        ));
    }
    let rounding = 1e-12 * live;
    let mut prev_mean = f64::NEG_INFINITY;
    for &mu in grid {
        let d = model.distribution(mu);
        let mean: f64 = d.iter().enumerate().map(|(n, p)| n as f64 * p).sum();
        if mean < prev_mean - rounding || (mean <= prev_mean && mean < live - 1e-9) {
            return Err(Error::Domain(format!(
                "model mean occupied-bin count stops increasing at mu = {mu:e} ({mean} after {prev_mean})"
            )));
        }
        prev_mean = mean;
    }
    let slack = 1e-12 * residuals[best].max(f64::MIN_POSITIVE);
    let minima: Vec<usize> = (0..grid.len())
        .filter(|&k| residuals[k] <= COMPETING_BASIN_RATIO * residuals[best] + slack)
        .filter(|&k| {
            let left = k == 0 || residuals[k - 1] > residuals[k] + slack;
            let right = k + 1 == grid.len() || residuals[k + 1] > residuals[k] + slack;
            left && right
        })
        .collect();
    if minima.len() > 1 {
        let at: Vec<String> = minima.iter().map(|&k| format!("{:e}", grid[k])).collect();
        return Err(Error::Domain(format!(
            "residual has {} separate minima over mu (near {}); the data are not a coherent state of this detector",
            minima.len(),
            at.join(", ")
        )));
    }
    Ok(())
}

struct Point {
    mu: f64,
    residual: f64,
    converged: bool,
    evaluations: u64,
    scan_points: usize,
    warnings: Vec<String>,
}

fn point_estimate(model: &CoherentModel, data: &[f64], opts: &EstimateOptions) -> Result<Point> {
    let evaluations = Cell::new(0);
    let obj = Objective {
        model,
        data,
        evaluations: &evaluations,
    };
    let grid = scan_grid();
    let residuals: Vec<f64> = grid.iter().map(|&mu| obj.residual(mu)).collect();
    let best = (0..grid.len()).fold(0, |b, k| if residuals[k] < residuals[b] { k } else { b });
    check_basin(model, &grid, &residuals, best)?;

    let mut warnings = Vec::new();
    let lo = Objective::x(grid[best.saturating_sub(1)]);
    let hi = Objective::x(grid[(best + 1).min(grid.len() - 1)]);
    let solver = GoldenSectionSearch::new(lo, hi)
        .and_then(|s| s.with_tolerance(opts.tolerance))
        .map_err(|e| Error::Config(e.to_string()))?;
    let search = Objective {
        model,
        data,
        evaluations: &evaluations,
    };
    let res = Executor::new(search, solver)
        .configure(|s| {
            s.param(Objective::x(grid[best]))
                .max_iters(opts.max_iterations)
        })
        .run()
        .map_err(|e| Error::Domain(format!("mean photon search failed: {e}")))?;
    let state = res.state();
    let converged = state.get_termination_status()
        == &TerminationStatus::Terminated(TerminationReason::SolverConverged);
    let (mut mu, mut residual) = match state.get_best_param() {
        Some(&x) if state.get_best_cost() <= residuals[best] => {
            (Objective::mu(x), state.get_best_cost())
        }
        _ => (grid[best], residuals[best]),
    };
    if best == 0 {
        let vacuum = obj.residual(0.0);
        if vacuum <= residual {
            mu = 0.0;
            residual = vacuum;
        }
    }
    if best + 1 == grid.len() {
        warnings.push(format!("estimate at the upper search bound {MU_MAX:e}"));
    }
    if !converged {
        warnings.push("golden-section search hit its iteration cap".into());
    }
    Ok(Point {
        mu,
        residual,
        converged,
        evaluations: evaluations.get(),
        scan_points: grid.len(),
        warnings,
    })
}

/// Golden-section search within a factor `e` of `mu0`, falling back to the
/// full scan when the optimum lands on the bracket edge.
fn local_estimate(
    model: &CoherentModel,
    data: &[f64],
    mu0: f64,
    opts: &EstimateOptions,
) -> Result<f64> {
    if mu0 > MU_MIN * std::f64::consts::E && mu0 < MU_MAX / std::f64::consts::E {
        let evaluations = Cell::new(0);
        let search = Objective {
            model,
            data,
            evaluations: &evaluations,
        };
        let x0 = Objective::x(mu0);
        let solver = GoldenSectionSearch::new(x0 - 1.0, x0 + 1.0)
            .and_then(|s| s.with_tolerance(opts.tolerance))
            .map_err(|e| Error::Config(e.to_string()))?;
        let res = Executor::new(search, solver)
            .configure(|s| s.param(x0).max_iters(opts.max_iterations))
            .run()
            .map_err(|e| Error::Domain(format!("mean photon search failed: {e}")))?;
        if let Some(&x) = res.state().get_best_param() {
            if (x - x0).abs() < 0.99 {
                return Ok(Objective::mu(x));
            }
        }
    }
    Ok(point_estimate(model, data, opts)?.mu)
}

/// Normal-approximation interval from the residual and the Jacobian at the
/// estimate, formed in `ln mu` so that it stays positive.
fn curvature_interval(model: &CoherentModel, data: &[f64], mu: f64, residual: f64) -> (f64, f64) {
    let dof = data.len().saturating_sub(2).max(1) as f64;
    let s = residual / dof.sqrt();
    if mu == 0.0 {
        let h = JACOBIAN_STEP * MU_MIN;
        let j = distance(&model.distribution(h), &model.distribution(0.0)) / h;
        return (0.0, if j > 0.0 { Z_95 * s / j } else { f64::INFINITY });
    }
    let h = JACOBIAN_STEP;
    let up = model.distribution(mu * h.exp());
    let down = model.distribution(mu * (-h).exp());
    let j = distance(&up, &down) / (2.0 * h);
    if j == 0.0 {
        return (0.0, f64::INFINITY);
    }
    let half = Z_95 * s / j;
    (mu * (-half).exp(), mu * half.exp())
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

/// Re-estimates on data sets resampled from the fitted model: every bin's
/// click count is drawn as `Binomial(n_pulses, p_j)`.
fn bootstrap_interval(
    params: &LoopParams,
    mu: f64,
    cfg: &BootstrapConfig,
    opts: &EstimateOptions,
) -> Result<(f64, f64)> {
    if cfg.trials < 2 || cfg.n_pulses == 0 {
        return Err(Error::Config(
            "bootstrap needs at least 2 trials and 1 pulse".into(),
        ));
    }
    let model = CoherentModel::new(params);
    let mut draws = (0..cfg.trials)
        .into_par_iter()
        .map(|b| {
            let seed = rng::derive_seed(cfg.seed, "bootstrap", b as u64);
            let counts = sample_bin_counts(params, mu, cfg.n_pulses, seed, 0.0)?;
            let p = outcome_probabilities(&bin_probabilities(&counts, cfg.n_pulses)?)?;
            local_estimate(&model, p.probs(), mu, opts)
        })
        .collect::<Result<Vec<f64>>>()?;
    draws.sort_by(f64::total_cmp);
    let tail = (1.0 - CONFIDENCE_LEVEL) / 2.0;
    Ok((
        percentile(&draws, tail).min(mu),
        percentile(&draws, 1.0 - tail).max(mu),
    ))
}

pub fn estimate_mean_photon(
    p_outcomes: &OutcomeDistribution,
    params: &LoopParams,
) -> Result<BrightStateEstimate> {
    estimate_mean_photon_with(p_outcomes, params, &EstimateOptions::default())
}

pub fn estimate_mean_photon_with(
    p_outcomes: &OutcomeDistribution,
    params: &LoopParams,
    opts: &EstimateOptions,
) -> Result<BrightStateEstimate> {
    validate_input(p_outcomes, params)?;
    let model = CoherentModel::new(params);
    let data = p_outcomes.probs();
    let point = point_estimate(&model, data, opts)?;
    let curvature = curvature_interval(&model, data, point.mu, point.residual);
    let bootstrap = match &opts.bootstrap {
        Some(cfg) => Some(bootstrap_interval(params, point.mu, cfg, opts)?),
        None => None,
    };
    let (confidence_interval, interval_method) = match bootstrap {
        Some(b) => (b, IntervalMethod::Bootstrap),
        None => (curvature, IntervalMethod::Curvature),
    };
    Ok(BrightStateEstimate {
        mean_photon: point.mu,
        residual: point.residual,
        confidence_interval,
        interval_method,
        confidence_level: CONFIDENCE_LEVEL,
        curvature_interval: curvature,
        bootstrap_interval: bootstrap,
        bootstrap_trials: opts.bootstrap.as_ref().map_or(0, |b| b.trials),
        n_outcomes: data.len(),
        scan_points: point.scan_points,
        evaluations: point.evaluations,
        converged: point.converged,
        warnings: point.warnings,
    })
}

/// Fock rows `lo..=hi` carrying the Poisson weight of mean `mu` within
/// `tail_sigmas` standard deviations, widened where the Poisson tail is
/// heavier than that window.
fn fock_window(mu: f64, tail_sigmas: f64) -> (u64, u64) {
    let sd = mu.sqrt();
    let mut lo = (mu - tail_sigmas * sd).floor().max(0.0) as u64;
    let mut hi = (mu + tail_sigmas * sd).ceil() as u64;
    while lo > 0 && poisson_pmf(lo - 1, mu) > FOCK_PMF_FLOOR {
        lo -= 1;
    }
    while poisson_pmf(hi + 1, mu) > FOCK_PMF_FLOOR {
        hi += 1;
    }
    (lo, hi)
}

/// Coherent-state outcome distribution as the Poisson-weighted sum of model
/// Fock rows over a window around `mu`, accumulated in row blocks.
pub fn crosscheck_fock_path(
    mu: f64,
    params: &LoopParams,
    tail_sigmas: f64,
) -> Result<OutcomeDistribution> {
    check_mu(mu)?;
    if !(tail_sigmas > 0.0) {
        return Err(Error::Config(format!(
            "tail_sigmas must be positive, got {tail_sigmas}"
        )));
    }
    let n_out = params.n_outcomes();
    let mut acc = vec![0.0; n_out];
    if mu == 0.0 {
        acc[0] = 1.0;
        return OutcomeDistribution::new(acc);
    }
    let (lo, hi) = fock_window(mu, tail_sigmas);
    let mut first = lo;
    while first <= hi {
        let rows = ((hi - first + 1) as usize).min(DEFAULT_CHUNK_ROWS);
        let block = model_povm_rows(params, first, rows);
        for r in 0..rows {
            let w = poisson_pmf(first + r as u64, mu);
            for n in 0..n_out {
                acc[n] += w * block[(r, n)];
            }
        }
        first += rows as u64;
    }
    OutcomeDistribution::new(acc)
}

#[cfg(test)]
mod tests;

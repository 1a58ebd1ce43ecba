//! POVM reconstruction from probe and outcome matrices.
//!
//! Solves
//!
//! ```text
//! minimise ||P - F Theta||_F + eps * sum_{i,n} (theta[i, n] - theta[i+1, n])^2
//! subject to theta >= 0 and sum_n theta[i, n] = 1 for every Fock index i
//! ```
//!
//! The residual is the plain (unsquared) Frobenius norm. Fock rows with
//! little probe support are flagged and left to the smoothing term.

pub mod barrier;
mod problem;
mod solver;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use problem::project_simplex;

use crate::ingest::OutcomeMatrix;
use crate::povm::PovmSet;
use crate::probe_states::{build_probe_matrix, ProbeEnsemble, ProbeMatrix};
use crate::{rng, Error, Result};

/// Fock indices whose probe column mass is below this are unconstrained by
/// data.
pub const SUPPORT_THRESHOLD: f64 = 1e-3;

/// Sweep used to pick epsilon when none is given.
pub const DEFAULT_EPSILON_SWEEP: [f64; 6] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingConfig {
    pub epsilon: f64,
    /// Target for `||Theta - proj(Theta - grad)||_inf`.
    pub tolerance: f64,
    /// First-order iterations.
    pub max_iterations: usize,
    /// Active-set Newton iterations after the first-order phase.
    pub max_newton_iterations: usize,
    pub polish: bool,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            tolerance: 1e-9,
            max_iterations: 20_000,
            max_newton_iterations: 400,
            polish: true,
        }
    }
}

impl SmoothingConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        let cfg = Self {
            epsilon,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        Ok(())
    }

    fn settings(&self) -> solver::Settings {
        solver::Settings {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            max_newton_iterations: self.max_newton_iterations,
            polish: self.polish,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub epsilon: f64,
    pub objective: f64,
    /// `||P - F Theta||_F`.
    pub residual: f64,
    /// `sum (theta[i, n] - theta[i+1, n])^2`, before scaling by epsilon.
    pub penalty: f64,
    /// `||Theta - proj(Theta - grad)||_inf` at the returned point.
    pub kkt_residual: f64,
    /// Upper bound on `objective - min objective` from the gradient.
    pub duality_gap: f64,
    pub iterations: usize,
    pub newton_iterations: usize,
    /// KKT residual within tolerance, or the active-set phase certified that
    /// no further step can lower the objective beyond rounding.
    pub converged: bool,
    pub n_probes: usize,
    pub truncation_dim: usize,
    pub n_outcomes: usize,
    pub unsupported_rows: usize,
    /// Not serialised, so that reports are reproducible byte for byte.
    #[serde(skip)]
    pub wall_time: Duration,
    /// Objective after every accepted iteration.
    #[serde(skip)]
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub povm: PovmSet,
    pub report: ReconstructionReport,
}

/// `true` where the probe column mass reaches [`SUPPORT_THRESHOLD`].
pub fn support_mask(f: &ProbeMatrix) -> Vec<bool> {
    f.column_mass()
        .iter()
        .map(|&m| m >= SUPPORT_THRESHOLD)
        .collect()
}

pub fn reconstruct(
    f: &ProbeMatrix,
    p: &OutcomeMatrix,
    cfg: &SmoothingConfig,
) -> Result<Reconstruction> {
    reconstruct_from(f, p.values(), cfg, None)
}

/// Reconstruction from a raw outcome matrix, optionally warm-started.
pub fn reconstruct_from(
    f: &ProbeMatrix,
    p: &DMatrix<f64>,
    cfg: &SmoothingConfig,
    start: Option<&DMatrix<f64>>,
) -> Result<Reconstruction> {
    cfg.validate()?;
    let fv = f.values();
    if fv.nrows() != p.nrows() {
        return Err(Error::Dimension(format!(
            "probe matrix has {} rows but outcome matrix has {}",
            fv.nrows(),
            p.nrows()
        )));
    }
    if p.ncols() == 0 || fv.nrows() == 0 {
        return Err(Error::Dimension("empty outcome matrix".into()));
    }
    let (m1, n_out) = (fv.ncols(), p.ncols());
    let started = Instant::now();
    let x0 = match start {
        Some(s) if s.shape() == (m1, n_out) => s.clone(),
        Some(s) => {
            return Err(Error::Dimension(format!(
                "start point is {:?}, expected {:?}",
                s.shape(),
                (m1, n_out)
            )))
        }
        None => solver::coarse_start(fv, p, cfg.epsilon, &cfg.settings())
            .unwrap_or_else(|| DMatrix::from_element(m1, n_out, 1.0 / n_out as f64)),
    };

    let prob = problem::Problem::new(fv, p, cfg.epsilon);
    let out = solver::solve(&prob, x0, &cfg.settings());
    let supported = support_mask(f);
    let report = ReconstructionReport {
        epsilon: cfg.epsilon,
        objective: out.eval.objective,
        residual: out.eval.residual,
        penalty: out.eval.penalty,
        kkt_residual: out.kkt,
        duality_gap: out.gap,
        iterations: out.iterations,
        newton_iterations: out.newton_iterations,
        converged: out.kkt <= cfg.tolerance || out.certified,
        n_probes: fv.nrows(),
        truncation_dim: m1 - 1,
        n_outcomes: n_out,
        unsupported_rows: supported.iter().filter(|s| !**s).count(),
        wall_time: started.elapsed(),
        objective_history: out.history,
    };
    tracing::debug!(
        epsilon = cfg.epsilon,
        objective = report.objective,
        kkt = report.kkt_residual,
        iterations = report.iterations,
        newton = report.newton_iterations,
        "reconstruction finished"
    );
    let povm = PovmSet::new(out.theta)?.with_support(supported)?;
    Ok(Reconstruction { povm, report })
}

/// Probability of any click for vacuum input, `1 - theta[0, 0]`.
pub fn dark_count_probability(povm: &PovmSet) -> f64 {
    1.0 - povm.theta()[(0, 0)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandKind {
    /// Entry-wise min/max over the point estimate and all draws.
    Envelope,
    /// Point estimate plus or minus the sample standard deviation.
    StdDev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyConfig {
    pub amplitude_rel_err: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub kind: BandKind,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            amplitude_rel_err: 0.05,
            n_mc: 20,
            seed: 0,
            kind: BandKind::Envelope,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyBand {
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    pub kind: BandKind,
    pub n_mc: usize,
    pub unconverged_draws: usize,
}

/// Monte-Carlo band from perturbed probe amplitudes.
///
/// Every draw scales each amplitude `|alpha_d|` by `1 + delta` with `delta`
/// uniform in `[-rel_err, rel_err]`, rebuilds the probe matrix at the same
/// truncation and reconstructs again, warm-started from `point`.
pub fn uncertainty_band(
    ensemble: &ProbeEnsemble,
    p: &OutcomeMatrix,
    cfg: &SmoothingConfig,
    point: &PovmSet,
    ucfg: &UncertaintyConfig,
) -> Result<UncertaintyBand> {
    if ucfg.n_mc < 2 {
        return Err(Error::Config(format!(
            "need at least 2 Monte-Carlo draws, got {}",
            ucfg.n_mc
        )));
    }
    if !(0.0..1.0).contains(&ucfg.amplitude_rel_err) {
        return Err(Error::Config(format!(
            "amplitude error {} outside [0, 1)",
            ucfg.amplitude_rel_err
        )));
    }
    let draws = (0..ucfg.n_mc)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::stream(ucfg.seed, "amplitude", k as u64);
            let err = ucfg.amplitude_rel_err;
            let perturbed = ensemble.map_means(|_, mu| {
                let delta = if err > 0.0 {
                    rng.random_range(-err..=err)
                } else {
                    0.0
                };
                mu * (1.0 + delta).powi(2)
            })?;
            let f = build_probe_matrix(&perturbed)?;
            reconstruct_from(&f, p.values(), cfg, Some(point.theta()))
        })
        .collect::<Result<Vec<_>>>()?;

    let theta = point.theta();
    let unconverged_draws = draws.iter().filter(|d| !d.report.converged).count();
    let (lower, upper) = match ucfg.kind {
        BandKind::Envelope => {
            let mut lo = theta.clone();
            let mut hi = theta.clone();
            for d in &draws {
                lo.zip_apply(d.povm.theta(), |a, b| *a = a.min(b));
                hi.zip_apply(d.povm.theta(), |a, b| *a = a.max(b));
            }
            (lo, hi)
        }
        BandKind::StdDev => {
            let n = draws.len() as f64;
            let mut mean = DMatrix::zeros(theta.nrows(), theta.ncols());
            for d in &draws {
                mean += d.povm.theta();
            }
            mean /= n;
            let mut var = DMatrix::zeros(theta.nrows(), theta.ncols());
            for d in &draws {
                let diff = d.povm.theta() - &mean;
                var += diff.component_mul(&diff);
            }
            let sd = (var / (n - 1.0)).map(f64::sqrt);
            (
                (theta - &sd).map(|v| v.max(0.0)),
                (theta + &sd).map(|v| v.min(1.0)),
            )
        }
    };
    Ok(UncertaintyBand {
        lower,
        upper,
        kind: ucfg.kind,
        n_mc: ucfg.n_mc,
        unconverged_draws,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub residual: f64,
    pub penalty: f64,
    pub objective: f64,
    /// Bound on `objective - min objective` at this epsilon.
    #[serde(default)]
    pub duality_gap: f64,
    pub converged: bool,
}

impl SweepPoint {
    /// Largest penalty increase and residual decrease from `self` to `next`
    /// (at a larger epsilon) that the duality gaps of both points allow.
    ///
    /// Exact minimisers satisfy `(eps_b - eps_a)(S_b - S_a) <= 0`; with
    /// gaps `g_a`, `g_b` the right-hand side becomes `g_a + g_b`, and the
    /// residual may drop by at most `eps_a` times that bound plus `g_a`.
    pub fn monotonicity_slack(&self, next: &SweepPoint) -> (f64, f64) {
        let rounding = |v: f64| 1e-12 * (1.0 + v.abs());
        let gaps = self.duality_gap.max(0.0) + next.duality_gap.max(0.0);
        let penalty = gaps / (next.epsilon - self.epsilon) + rounding(self.penalty);
        let residual = self.epsilon * penalty + self.duality_gap.max(0.0) + rounding(self.residual);
        (penalty, residual)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSweep {
    /// Sorted by increasing epsilon.
    pub points: Vec<SweepPoint>,
    /// Epsilon at the L-curve corner.
    pub corner: f64,
    pub warnings: Vec<String>,
}

impl EpsilonSweep {
    /// CSV with columns `epsilon,residual,penalty,objective,duality_gap,converged`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epsilon",
            "residual",
            "penalty",
            "objective",
            "duality_gap",
            "converged",
        ])?;
        for p in &self.points {
            w.write_record([
                format!("{:e}", p.epsilon),
                format!("{:e}", p.residual),
                format!("{:e}", p.penalty),
                format!("{:e}", p.objective),
                format!("{:e}", p.duality_gap),
                p.converged.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))
    }
}

/// Reconstructs at every epsilon, checks the expected monotonicity and picks
/// the L-curve corner. Also returns the reconstructions, in sweep order.
pub fn epsilon_sweep(
    f: &ProbeMatrix,
    p: &OutcomeMatrix,
    epsilons: &[f64],
    cfg: &SmoothingConfig,
) -> Result<(EpsilonSweep, Vec<Reconstruction>)> {
    if epsilons.is_empty() {
        return Err(Error::Config(
            "epsilon sweep needs at least one value".into(),
        ));
    }
    let mut eps: Vec<f64> = epsilons.to_vec();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    let recs = eps
        .par_iter()
        .map(|&e| reconstruct(f, p, &cfg.with_epsilon(e)))
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<SweepPoint> = recs
        .iter()
        .map(|r| SweepPoint {
            epsilon: r.report.epsilon,
            residual: r.report.residual,
            penalty: r.report.penalty,
            objective: r.report.objective,
            duality_gap: r.report.duality_gap,
            converged: r.report.converged,
        })
        .collect();

    let mut warnings = Vec::new();
    for w in points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (penalty_slack, residual_slack) = a.monotonicity_slack(b);
        if a.residual > b.residual + residual_slack {
            warnings.push(format!(
                "residual decreased from {:e} to {:e} between epsilon {:e} and {:e}",
                a.residual, b.residual, a.epsilon, b.epsilon
            ));
        }
        if b.penalty > a.penalty + penalty_slack {
            warnings.push(format!(
                "penalty increased from {:e} to {:e} between epsilon {:e} and {:e}",
                a.penalty, b.penalty, a.epsilon, b.epsilon
            ));
        }
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    let corner = lcurve_corner(&points).map_or(points[0].epsilon, |k| points[k].epsilon);
    Ok((
        EpsilonSweep {
            points,
            corner,
            warnings,
        },
        recs,
    ))
}

/// Index of the point of largest signed Menger curvature of the curve
/// `(ln residual, ln sqrt(penalty))`, taken over points with positive
/// epsilon, residual and penalty. `None` with fewer than three such points.
pub fn lcurve_corner(points: &[SweepPoint]) -> Option<usize> {
    let usable: Vec<(usize, f64, f64)> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.epsilon > 0.0 && p.residual > 0.0 && p.penalty > 0.0)
        .map(|(k, p)| (k, p.residual.ln(), 0.5 * p.penalty.ln()))
        .collect();
    if usable.len() < 3 {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for w in usable.windows(3) {
        let (a, b, c) = (w[0], w[1], w[2]);
        let (abx, aby) = (b.1 - a.1, b.2 - a.2);
        let (bcx, bcy) = (c.1 - b.1, c.2 - b.2);
        let (acx, acy) = (c.1 - a.1, c.2 - a.2);
        let cross = abx * bcy - aby * bcx;
        let denom = (abx.hypot(aby)) * (bcx.hypot(bcy)) * (acx.hypot(acy));
        if denom <= 0.0 {
            continue;
        }
        let kappa = 2.0 * cross / denom;
        if best.is_none_or(|(_, k)| kappa > k) {
            best = Some((b.0, kappa));
        }
    }
    best.map(|(k, _)| k)
}

/// JSON sidecar stored next to an exported POVM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PovmMetadata {
    pub report: ReconstructionReport,
    /// Fock indices flagged as unconstrained by data.
    pub unsupported: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<EpsilonSweep>,
}

impl PovmMetadata {
    pub fn new(rec: &Reconstruction, sweep: Option<EpsilonSweep>) -> Self {
        let unsupported = rec
            .povm
            .supported()
            .map(|s| {
                s.iter()
                    .enumerate()
                    .filter(|(_, &v)| !v)
                    .map(|(i, _)| i)
                    .collect()
            })
            .unwrap_or_default();
        Self {
            report: rec.report.clone(),
            unsupported,
            sweep,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes one `i,theta,lo,hi` CSV per outcome into `dir`, named
/// `{prefix}_n{n:02}.csv`. `rows` restricts output to selected Fock indices.
pub fn write_plot_series(
    dir: &Path,
    prefix: &str,
    povm: &PovmSet,
    band: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
    rows: Option<&[usize]>,
) -> Result<Vec<PathBuf>> {
    let theta = povm.theta();
    if let Some((lo, hi)) = band {
        if lo.shape() != theta.shape() || hi.shape() != theta.shape() {
            return Err(Error::Dimension("band shape differs from the POVM".into()));
        }
    }
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..theta.nrows()).collect();
            &all
        }
    };
    if let Some(&bad) = rows.iter().find(|&&i| i >= theta.nrows()) {
        return Err(Error::Dimension(format!(
            "Fock index {bad} beyond the POVM"
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(theta.ncols());
    for n in 0..theta.ncols() {
        let path = dir.join(format!("{prefix}_n{n:02}.csv"));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        w.write_record(["i", "theta", "lo", "hi"])?;
        for &i in rows {
            let v = theta[(i, n)];
            let (lo, hi) = band.map_or((v, v), |(l, h)| (l[(i, n)], h[(i, n)]));
            w.write_record([
                i.to_string(),
                format!("{v:e}"),
                format!("{lo:e}"),
                format!("{hi:e}"),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

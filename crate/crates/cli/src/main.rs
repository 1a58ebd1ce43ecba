//! Command-line pipeline for loop-detector tomography.
//!
//! Every subcommand reads its inputs from files and writes its outputs to
//! files, so the steps compose without hidden state:
//!
//! `simulate -> ingest -> reconstruct -> fit -> extrapolate / estimate`,
//! with `export-plots` turning POVMs into per-outcome CSV series.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 a solver
//! did not converge (suppressed by `--allow-unconverged`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use tracing::{info, warn};

use loopdet::detector_model::{
    sample_bin_counts, LoopParams, OutcomeDistribution, DEFAULT_DARK_PROBABILITY,
};
use loopdet::estimation::{estimate_mean_photon_with, BootstrapConfig, EstimateOptions};
use loopdet::ingest::{
    render_histogram, BinningConfig, HistogramRender, OutcomeMatrix, RunEntry, RunManifest,
};
use loopdet::model_fit::{
    default_starts, export_extrapolation, fit_params, log_grid, write_extrapolated_series,
    FitOptions, DEFAULT_MEMORY_BUDGET,
};
use loopdet::povm::{load_matrix_csv, save_matrix_csv};
use loopdet::probe_states::{
    build_probe_matrix, CoherentProbe, ProbeEnsemble, DEFAULT_TAIL_SIGMAS,
};
use loopdet::tomography::{
    epsilon_sweep, reconstruct, uncertainty_band, write_plot_series, BandKind, PovmMetadata,
    SmoothingConfig, UncertaintyConfig, DEFAULT_EPSILON_SWEEP,
};
use loopdet::{rng, PovmSet};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] loopdet::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("not converged: {0}")]
    Unconverged(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_)
            | CliError::Core(loopdet::Error::Config(_) | loopdet::Error::Resource(_)) => 2,
            CliError::Core(_) => 3,
            CliError::Unconverged(_) => 4,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "loopdet",
    version,
    about = "Tomography, model fitting and estimation for loop-multiplexed click detectors"
)]
struct RunConfig {
    /// Worker threads; all cores by default. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate time-tagger histograms for a probe ensemble.
    Simulate(SimulateArgs),
    /// Turn a run manifest into an outcome matrix CSV.
    Ingest(IngestArgs),
    /// Reconstruct the POVM from an outcome matrix.
    Reconstruct(ReconstructArgs),
    /// Fit the loop model to a reconstructed POVM.
    Fit(FitArgs),
    /// Write the model POVM for more outcomes or a larger Fock space.
    Extrapolate(ExtrapolateArgs),
    /// Estimate the mean photon number of a bright coherent state.
    Estimate(EstimateArgs),
    /// Write per-outcome `i,theta,lo,hi` CSV series for plotting.
    ExportPlots(ExportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Detector parameters (JSON).
    #[arg(long)]
    params: PathBuf,
    /// Probe ensemble (JSON); the 71-probe reference ensemble by default.
    #[arg(long, conflicts_with = "mean_photon")]
    ensemble: Option<PathBuf>,
    /// Simulate a single probe of this mean photon number instead.
    #[arg(long)]
    mean_photon: Option<f64>,
    /// Laser pulses per probe.
    #[arg(long, default_value_t = 450_000)]
    pulses: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dark-click probability per bin window.
    #[arg(long, default_value_t = DEFAULT_DARK_PROBABILITY)]
    dark_prob: f64,
    /// Raw histogram resolution.
    #[arg(long, default_value_t = 10.0)]
    bin_width_ps: f64,
    /// Events placed outside every detector window.
    #[arg(long, default_value_t = 0)]
    stray_counts: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Outcome matrix CSV to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    ensemble: PathBuf,
    /// Outcome matrix CSV from `ingest`.
    #[arg(long)]
    outcomes: PathBuf,
    /// Smoothing weight. Without it, the L-curve corner of the sweep is used.
    #[arg(long, conflicts_with = "epsilon_sweep")]
    epsilon: Option<f64>,
    /// Comma-separated smoothing weights to sweep.
    #[arg(long, value_delimiter = ',')]
    epsilon_sweep: Option<Vec<f64>>,
    /// Fock truncation M, overriding the ensemble's.
    #[arg(long)]
    hilbert_dim: Option<usize>,
    #[arg(long, default_value_t = SmoothingConfig::default().tolerance)]
    tolerance: f64,
    #[arg(long, default_value_t = SmoothingConfig::default().max_iterations)]
    max_iterations: usize,
    /// Active-set Newton steps after the first-order phase; 0 skips them.
    #[arg(long, default_value_t = SmoothingConfig::default().max_newton_iterations)]
    max_newton_iterations: usize,
    /// Monte-Carlo draws for an amplitude-uncertainty band; 0 disables it.
    #[arg(long, default_value_t = 0)]
    band_draws: usize,
    /// Relative amplitude error of the probes, for the band.
    #[arg(long, default_value_t = 0.05)]
    amplitude_err: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    allow_unconverged: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// POVM CSV. A `.json` sidecar with the same stem supplies the support mask.
    #[arg(long)]
    povm: PathBuf,
    /// Fit every Fock row, including rows without data support.
    #[arg(long)]
    no_support_mask: bool,
    #[arg(long)]
    allow_unconverged: bool,
    /// Fit result JSON to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtrapolateArgs {
    /// Detector parameters or fit result (JSON).
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    outcomes: usize,
    /// Largest Fock index M.
    #[arg(long)]
    hilbert_dim: usize,
    /// Largest dense POVM held in memory, e.g. `256MiB`; above it rows are
    /// written in chunks.
    #[arg(long, value_parser = parse_bytes, default_value_t = DEFAULT_MEMORY_BUDGET)]
    memory_budget: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Detector parameters or fit result (JSON). The bin count follows the data.
    #[arg(long)]
    params: PathBuf,
    /// Outcome matrix CSV from `ingest`, or an outcome distribution JSON.
    #[arg(long)]
    outcomes: PathBuf,
    /// Probe label to use when the matrix holds several rows.
    #[arg(long)]
    probe: Option<u32>,
    /// Pulse count, needed for the bootstrap with JSON input.
    #[arg(long)]
    pulses: Option<u64>,
    /// Parametric bootstrap trials; 0 reports the curvature interval only.
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    allow_unconverged: bool,
    /// Estimate JSON to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Reconstructed POVM CSV.
    #[arg(long, conflicts_with = "params")]
    povm: Option<PathBuf>,
    /// Lower band bound from `reconstruct --band-draws`.
    #[arg(long, requires = "band_upper")]
    band_lower: Option<PathBuf>,
    #[arg(long, requires = "band_lower")]
    band_upper: Option<PathBuf>,
    /// Detector parameters or fit result, for model series.
    #[arg(long, requires_all = ["outcomes", "hilbert_dim"])]
    params: Option<PathBuf>,
    #[arg(long)]
    outcomes: Option<usize>,
    #[arg(long)]
    hilbert_dim: Option<usize>,
    /// Approximate number of log-spaced Fock indices for model series.
    #[arg(long, default_value_t = 200)]
    points: usize,
    #[arg(long, default_value = "povm")]
    prefix: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Byte count with an optional binary suffix: `K`, `M`, `G`, with or
/// without `iB`.
fn parse_bytes(s: &str) -> Result<usize, String> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: usize = num.parse().map_err(|_| format!("bad byte count {s:?}"))?;
    let shift = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kib" => 10,
        "m" | "mib" => 20,
        "g" | "gib" => 30,
        _ => return Err(format!("unknown size unit in {s:?}")),
    };
    n.checked_mul(1usize << shift)
        .ok_or_else(|| format!("{s:?} overflows"))
}

fn require(path: &Path) -> CliResult<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Config(format!(
            "input {} does not exist",
            path.display()
        )))
    }
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

fn create_parent(file: &Path) -> CliResult {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

/// Loads a configuration file. Parse and validation failures are
/// configuration errors, not data errors.
fn config_file<T>(path: &Path, load: impl FnOnce(&Path) -> loopdet::Result<T>) -> CliResult<T> {
    match load(require(path)?) {
        Err(loopdet::Error::Json(e)) => Err(CliError::Config(format!("{}: {e}", path.display()))),
        other => Ok(other?),
    }
}

/// Reads bare detector parameters, or the parameters of a fit result.
fn load_params(path: &Path) -> CliResult<LoopParams> {
    config_file(path, |path| {
        let text = std::fs::read_to_string(path)
            .map_err(|e| loopdet::Error::Config(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        Ok(match value.get("params") {
            Some(inner) => serde_json::from_value(inner.clone())?,
            None => serde_json::from_value(value)?,
        })
    })
}

fn check_converged(converged: bool, allow: bool, what: &str) -> CliResult {
    match (converged, allow) {
        (true, _) => Ok(()),
        (false, true) => {
            warn!("{what} did not converge; outputs kept because of --allow-unconverged");
            Ok(())
        }
        (false, false) => Err(CliError::Unconverged(format!(
            "{what} did not converge; outputs were written, rerun with --allow-unconverged to accept them"
        ))),
    }
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult {
    let params = config_file(&a.params, LoopParams::load)?;
    let ensemble = match (&a.ensemble, a.mean_photon) {
        (Some(path), _) => config_file(path, ProbeEnsemble::load)?,
        (None, Some(mu)) => {
            ProbeEnsemble::new(vec![CoherentProbe::new(0, mu)?], None, DEFAULT_TAIL_SIGMAS)?
        }
        (None, None) => ProbeEnsemble::reference(),
    };
    if a.pulses == 0 {
        return Err(CliError::Config("--pulses must be at least 1".into()));
    }
    let mut binning = BinningConfig::new(params.n_bins);
    binning.bin_period_ns = params.bin_period_ns;
    let render = HistogramRender {
        bin_width_ps: a.bin_width_ps,
        stray_counts: a.stray_counts,
        ..HistogramRender::default()
    };
    let hist_dir = a.out.join("histograms");
    create_dir(&hist_dir)?;
    let runs = ensemble
        .probes()
        .par_iter()
        .map(|probe| {
            let seed = rng::derive_seed(a.seed, "probe", u64::from(probe.label));
            let counts =
                sample_bin_counts(&params, probe.mean_photon, a.pulses, seed, a.dark_prob)?;
            let hist = render_histogram(&counts, &binning, &render, seed)?;
            let rel = PathBuf::from("histograms").join(format!("probe_{:04}.csv", probe.label));
            hist.save(&a.out.join(&rel))?;
            Ok(RunEntry {
                label: probe.label,
                mean_photon: Some(probe.mean_photon),
                histogram: rel,
                n_pulses: a.pulses,
                seed: Some(seed),
            })
        })
        .collect::<loopdet::Result<Vec<_>>>()?;
    let manifest = RunManifest {
        binning,
        runs,
        root_seed: Some(a.seed),
    };
    manifest.save(&a.out.join("manifest.json"))?;
    ensemble.save(&a.out.join("ensemble.json"))?;
    params.save(&a.out.join("params.json"))?;
    info!(
        "simulated {} probes into {}",
        ensemble.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_ingest(a: &IngestArgs) -> CliResult {
    let manifest = config_file(&a.manifest, RunManifest::load)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let outcomes = manifest.assemble(base)?;
    create_parent(&a.out)?;
    outcomes.save_csv(&a.out)?;
    info!(
        "{} probes x {} outcomes -> {}",
        outcomes.n_probes(),
        outcomes.n_outcomes(),
        a.out.display()
    );
    Ok(())
}

/// Rows of `p` in the probe order of `ensemble`, matched by label.
fn align_outcomes(ensemble: &ProbeEnsemble, p: &OutcomeMatrix) -> CliResult<OutcomeMatrix> {
    if ensemble.len() != p.n_probes() {
        return Err(loopdet::Error::Dimension(format!(
            "{} probes in the ensemble but {} outcome rows",
            ensemble.len(),
            p.n_probes()
        ))
        .into());
    }
    let order = ensemble
        .probes()
        .iter()
        .map(|probe| {
            p.labels()
                .iter()
                .position(|&l| l == probe.label)
                .ok_or_else(|| {
                    loopdet::Error::Data(format!("no outcome row for probe label {}", probe.label))
                })
        })
        .collect::<loopdet::Result<Vec<_>>>()?;
    Ok(p.permute_rows(&order))
}

fn cmd_reconstruct(a: &ReconstructArgs) -> CliResult {
    let mut ensemble = config_file(&a.ensemble, ProbeEnsemble::load)?;
    if let Some(m) = a.hilbert_dim {
        ensemble = ProbeEnsemble::new(ensemble.probes().to_vec(), Some(m), ensemble.tail_sigmas())?;
    }
    let p = align_outcomes(&ensemble, &OutcomeMatrix::load_csv(require(&a.outcomes)?)?)?;
    let f = build_probe_matrix(&ensemble)?;
    let base = SmoothingConfig {
        tolerance: a.tolerance,
        max_iterations: a.max_iterations,
        max_newton_iterations: a.max_newton_iterations,
        polish: a.max_newton_iterations > 0,
        ..SmoothingConfig::default()
    };
    create_dir(&a.out)?;

    let (rec, sweep) = match a.epsilon {
        Some(eps) => {
            let cfg = base.with_epsilon(eps);
            cfg.validate()?;
            (reconstruct(&f, &p, &cfg)?, None)
        }
        None => {
            let eps = a
                .epsilon_sweep
                .clone()
                .unwrap_or_else(|| DEFAULT_EPSILON_SWEEP.to_vec());
            let (sweep, recs) = epsilon_sweep(&f, &p, &eps, &base)?;
            let file = std::fs::File::create(a.out.join("lcurve.csv"))
                .map_err(|e| CliError::Config(format!("cannot write lcurve.csv: {e}")))?;
            sweep.write_csv(std::io::BufWriter::new(file))?;
            let k = sweep
                .points
                .iter()
                .position(|s| s.epsilon == sweep.corner)
                .unwrap_or(0);
            info!("L-curve corner at epsilon {:e}", sweep.corner);
            (
                recs.into_iter()
                    .nth(k)
                    .expect("one reconstruction per sweep point"),
                Some(sweep),
            )
        }
    };
    rec.povm.save_csv(&a.out.join("povm.csv"))?;
    PovmMetadata::new(&rec, sweep).save(&a.out.join("povm.json"))?;
    let r = &rec.report;
    info!(
        "epsilon {:e}: residual {:e}, kkt {:e}, converged {}",
        r.epsilon, r.residual, r.kkt_residual, r.converged
    );

    if a.band_draws > 0 {
        let ucfg = UncertaintyConfig {
            amplitude_rel_err: a.amplitude_err,
            n_mc: a.band_draws,
            seed: a.seed,
            kind: BandKind::Envelope,
        };
        let band = uncertainty_band(
            &ensemble,
            &p,
            &base.with_epsilon(r.epsilon),
            &rec.povm,
            &ucfg,
        )?;
        if band.unconverged_draws > 0 {
            warn!(
                "{} of {} band draws did not converge",
                band.unconverged_draws, band.n_mc
            );
        }
        save_matrix_csv(&a.out.join("band_lower.csv"), &band.lower)?;
        save_matrix_csv(&a.out.join("band_upper.csv"), &band.upper)?;
    }
    check_converged(r.converged, a.allow_unconverged, "reconstruction")
}

/// Loads a POVM and, when its metadata sidecar exists, the support mask.
fn load_povm(path: &Path) -> CliResult<PovmSet> {
    let povm = PovmSet::load_csv(require(path)?)?;
    let sidecar = path.with_extension("json");
    if !sidecar.exists() {
        return Ok(povm);
    }
    let meta = PovmMetadata::load(&sidecar)?;
    let mut mask = vec![true; povm.theta().nrows()];
    for &i in &meta.unsupported {
        let slot = mask.get_mut(i).ok_or_else(|| {
            loopdet::Error::Dimension(format!("unsupported row {i} beyond the POVM"))
        })?;
        *slot = false;
    }
    Ok(povm.with_support(mask)?)
}

fn cmd_fit(a: &FitArgs) -> CliResult {
    let povm = load_povm(&a.povm)?;
    let n_bins = povm.n_outcomes().saturating_sub(1);
    if n_bins == 0 {
        return Err(
            loopdet::Error::Data("a POVM with one outcome has no bins to fit".into()).into(),
        );
    }
    let opts = FitOptions {
        use_support_mask: !a.no_support_mask,
        ..FitOptions::default()
    };
    let fit = fit_params(&povm, n_bins, &default_starts(n_bins)?, &opts)?;
    for w in &fit.warnings {
        warn!("{w}");
    }
    create_parent(&a.out)?;
    fit.save(&a.out)?;
    let p = &fit.params;
    info!(
        "eta_det {:.6}, R {:.6}, eta_loop {:.6}, residual {:e}",
        p.eta_det, p.reflectivity, p.eta_loop, fit.residual
    );
    check_converged(fit.converged, a.allow_unconverged, "model fit")
}

fn cmd_extrapolate(a: &ExtrapolateArgs) -> CliResult {
    let params = load_params(&a.params)?;
    let index = export_extrapolation(&a.out, &params, a.outcomes, a.hilbert_dim, a.memory_budget)?;
    info!(
        "{} outcomes up to Fock index {} in {} file(s)",
        a.outcomes,
        a.hilbert_dim,
        index.files.len()
    );
    Ok(())
}

/// The outcome distribution to estimate from and its pulse count, if known.
fn load_outcomes(a: &EstimateArgs) -> CliResult<(OutcomeDistribution, Option<u64>)> {
    let path = require(&a.outcomes)?;
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
    {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let d: OutcomeDistribution = serde_json::from_str(&text).map_err(loopdet::Error::from)?;
        return Ok((d, a.pulses));
    }
    let m = OutcomeMatrix::load_csv(path)?;
    let row =
        match a.probe {
            Some(label) => m.labels().iter().position(|&l| l == label).ok_or_else(|| {
                loopdet::Error::Data(format!("no outcome row with label {label}"))
            })?,
            None if m.n_probes() == 1 => 0,
            None => {
                return Err(CliError::Config(format!(
                    "{} rows in {}; choose one with --probe",
                    m.n_probes(),
                    path.display()
                )))
            }
        };
    Ok((m.row(row), Some(a.pulses.unwrap_or(m.n_pulses()[row]))))
}

fn cmd_estimate(a: &EstimateArgs) -> CliResult {
    let (data, pulses) = load_outcomes(a)?;
    let n_bins = data.n_outcomes().saturating_sub(1);
    let params = load_params(&a.params)?.with_bins(n_bins)?;
    let bootstrap = match (a.bootstrap, pulses) {
        (0, _) => None,
        (trials, Some(n_pulses)) => Some(BootstrapConfig {
            n_pulses,
            trials,
            seed: a.seed,
        }),
        (_, None) => {
            return Err(CliError::Config(
                "--bootstrap needs --pulses for JSON input".into(),
            ))
        }
    };
    let opts = EstimateOptions {
        bootstrap,
        ..EstimateOptions::default()
    };
    let est = estimate_mean_photon_with(&data, &params, &opts)?;
    for w in &est.warnings {
        warn!("{w}");
    }
    create_parent(&a.out)?;
    est.save(&a.out)?;
    let (lo, hi) = est.confidence_interval;
    info!(
        "mean photon number {:.6e} [{lo:.6e}, {hi:.6e}]",
        est.mean_photon
    );
    check_converged(est.converged, a.allow_unconverged, "mean photon search")
}

fn cmd_export_plots(a: &ExportArgs) -> CliResult {
    let files = match (&a.povm, &a.params) {
        (Some(path), _) => {
            let povm = PovmSet::load_csv(require(path)?)?;
            let band = match (&a.band_lower, &a.band_upper) {
                (Some(lo), Some(hi)) => Some((
                    load_matrix_csv(require(lo)?)?,
                    load_matrix_csv(require(hi)?)?,
                )),
                _ => None,
            };
            write_plot_series(
                &a.out,
                &a.prefix,
                &povm,
                band.as_ref().map(|(l, h)| (l, h)),
                None,
            )?
        }
        (None, Some(path)) => {
            let params = load_params(path)?;
            let (n, m) = (a.outcomes.unwrap_or(0), a.hilbert_dim.unwrap_or(0));
            write_extrapolated_series(&a.out, &a.prefix, &params, n, &log_grid(m, a.points))?
        }
        (None, None) => {
            return Err(CliError::Config(
                "export-plots needs --povm or --params".into(),
            ))
        }
    };
    info!("wrote {} series to {}", files.len(), a.out.display());
    Ok(())
}

fn run(cfg: &RunConfig) -> CliResult {
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {n} threads: {e}")))?;
    }
    match &cfg.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Extrapolate(a) => cmd_extrapolate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::ExportPlots(a) => cmd_export_plots(a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cfg = RunConfig::parse();
    match run(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_sizes_parse_with_binary_suffixes() {
        assert_eq!(parse_bytes("4096"), Ok(4096));
        assert_eq!(parse_bytes("256MiB"), Ok(256 << 20));
        assert_eq!(parse_bytes("2G"), Ok(2 << 30));
        assert_eq!(parse_bytes("1k"), Ok(1024));
        assert!(parse_bytes("12 parsecs").is_err());
        assert!(parse_bytes("MiB").is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(
            CliError::from(loopdet::Error::Resource(String::new())).exit_code(),
            2
        );
        assert_eq!(
            CliError::from(loopdet::Error::Data(String::new())).exit_code(),
            3
        );
        assert_eq!(
            CliError::from(loopdet::Error::Dimension(String::new())).exit_code(),
            3
        );
        assert_eq!(CliError::Unconverged(String::new()).exit_code(), 4);
    }
}

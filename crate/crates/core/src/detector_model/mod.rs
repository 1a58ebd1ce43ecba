//! Physical model of the loop-multiplexed click detector.
//!
//! An input pulse meets a coupler of reflectivity `R`. The reflected part
//! leaves immediately and occupies time-bin 1; the transmitted part circulates
//! in a loop of efficiency `eta_loop` and leaks out by `1 - R` once per round
//! trip, filling bins 2, 3, ... with exponentially decaying intensity. A single
//! click detector of efficiency `eta_det` watches the output.
//!
//! For one photon the click probability of bin `j` is
//!
//! ```text
//! q_1 = R eta_det
//! q_j = (1 - R)^2 eta_det / R * (R eta_loop)^(j - 1),   j >= 2
//! ```
//!
//! and for `i` photons the marginal click probability is `1 - (1 - q_j)^i`.
//! Treating bins as independent, the number of occupied bins follows a
//! Poisson-binomial distribution over these marginals. Dark counts are not
//! part of the model; the simulator can add them.

pub mod poisson_binomial;
mod simulate;

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::povm::{PovmSet, COMPLETENESS_TOL};
use crate::{Error, Result};

pub use poisson_binomial::PoissonBinomial;
pub use simulate::{
    coherent_click_probs, sample_bin_counts, simulate_bin_clicks, ClickSimulation,
    DEFAULT_DARK_PROBABILITY,
};

/// Loop period of the reference device, ns.
pub const DEFAULT_BIN_PERIOD_NS: f64 = 156.0;

/// Rows per block when a model POVM is produced in chunks.
pub const DEFAULT_CHUNK_ROWS: usize = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LoopParamsFile", into = "LoopParamsFile")]
pub struct LoopParams {
    /// Coupler reflectivity (out-coupling), `0 < R < 1`.
    pub reflectivity: f64,
    pub eta_loop: f64,
    pub eta_det: f64,
    pub n_bins: usize,
    /// Loop round-trip time; metadata only.
    pub bin_period_ns: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LoopParamsFile {
    #[serde(rename = "R")]
    r: f64,
    eta_loop: f64,
    eta_det: f64,
    n_bins: usize,
    #[serde(default = "default_period")]
    bin_period_ns: f64,
}

fn default_period() -> f64 {
    DEFAULT_BIN_PERIOD_NS
}

impl TryFrom<LoopParamsFile> for LoopParams {
    type Error = Error;

    fn try_from(f: LoopParamsFile) -> Result<Self> {
        LoopParams::new(f.r, f.eta_loop, f.eta_det, f.n_bins)
            .map(|p| p.with_bin_period(f.bin_period_ns))
    }
}

impl From<LoopParams> for LoopParamsFile {
    fn from(p: LoopParams) -> Self {
        Self {
            r: p.reflectivity,
            eta_loop: p.eta_loop,
            eta_det: p.eta_det,
            n_bins: p.n_bins,
            bin_period_ns: p.bin_period_ns,
        }
    }
}

impl LoopParams {
    pub fn new(reflectivity: f64, eta_loop: f64, eta_det: f64, n_bins: usize) -> Result<Self> {
        if !(reflectivity > 0.0 && reflectivity < 1.0) {
            return Err(Error::Config(format!(
                "R must lie in (0, 1), got {reflectivity}"
            )));
        }
        if !(0.0..=1.0).contains(&eta_loop) {
            return Err(Error::Config(format!(
                "eta_loop must lie in [0, 1], got {eta_loop}"
            )));
        }
        if !(0.0..=1.0).contains(&eta_det) {
            return Err(Error::Config(format!(
                "eta_det must lie in [0, 1], got {eta_det}"
            )));
        }
        if n_bins == 0 {
            return Err(Error::Config("n_bins must be at least 1".into()));
        }
        Ok(Self {
            reflectivity,
            eta_loop,
            eta_det,
            n_bins,
            bin_period_ns: DEFAULT_BIN_PERIOD_NS,
        })
    }

    /// Fitted values of the ten-bin reference device.
    pub fn reference() -> Self {
        Self::new(0.89613, 0.9064, 0.4912, 10).expect("reference parameters are valid")
    }

    pub fn with_bin_period(mut self, ns: f64) -> Self {
        self.bin_period_ns = ns;
        self
    }

    /// Same physics with a different number of bins.
    pub fn with_bins(mut self, n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::Config("n_bins must be at least 1".into()));
        }
        self.n_bins = n_bins;
        Ok(self)
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_bins + 1
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Single-photon click probability of every bin.
#[derive(Debug, Clone, PartialEq)]
pub struct PerPhotonBinProbs {
    q: Vec<f64>,
}

impl PerPhotonBinProbs {
    pub fn as_slice(&self) -> &[f64] {
        &self.q
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// `ln(1 - q_j)` for every bin, the exponent used for Fock inputs.
    fn log_survival(&self) -> Vec<f64> {
        self.q.iter().map(|&q| (-q).ln_1p()).collect()
    }
}

pub fn per_photon_bin_probs(params: &LoopParams) -> PerPhotonBinProbs {
    let r = params.reflectivity;
    let mut q = Vec::with_capacity(params.n_bins);
    q.push(r * params.eta_det);
    if params.n_bins > 1 {
        let ratio = r * params.eta_loop;
        let mut qj = (1.0 - r).powi(2) * params.eta_det / r * ratio;
        for _ in 1..params.n_bins {
            q.push(qj);
            qj *= ratio;
        }
    }
    PerPhotonBinProbs { q }
}

/// `1 - (1 - q)^i` via `exp(i ln(1 - q))`.
fn fock_click(log_survival: f64, photons: u64) -> f64 {
    if photons == 0 {
        0.0
    } else {
        -(photons as f64 * log_survival).exp_m1()
    }
}

/// Marginal click probability of bin `j` (1-based) for a Fock input of `i`
/// photons.
pub fn bin_click_prob_fock(params: &LoopParams, j: usize, i: u64) -> Result<f64> {
    if j == 0 || j > params.n_bins {
        return Err(Error::Domain(format!(
            "bin index {j} outside 1..={}",
            params.n_bins
        )));
    }
    let q = per_photon_bin_probs(params).q[j - 1];
    Ok(fock_click((-q).ln_1p(), i))
}

/// Click probability of bin `j` (1-based) for a coherent input of mean
/// `mean_photon`: `1 - exp(-mu q_j)`.
pub fn bin_click_prob_coherent(params: &LoopParams, mean_photon: f64, j: usize) -> Result<f64> {
    if !(mean_photon >= 0.0) {
        return Err(Error::Domain(format!(
            "mean photon number must be non-negative, got {mean_photon}"
        )));
    }
    if j == 0 || j > params.n_bins {
        return Err(Error::Domain(format!(
            "bin index {j} outside 1..={}",
            params.n_bins
        )));
    }
    let q = per_photon_bin_probs(params).q[j - 1];
    Ok(-(-mean_photon * q).exp_m1())
}

/// Probability of each occupied-bin count, indexed by `n = 0..=n_bins`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeDistribution {
    probs: Vec<f64>,
}

/// Tolerance on the normalisation of an [`OutcomeDistribution`].
pub const NORMALIZATION_TOL: f64 = 1e-10;

impl OutcomeDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(probs, NORMALIZATION_TOL)
    }

    pub(crate) fn with_tolerance(probs: Vec<f64>, tol: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("outcome distribution is empty".into()));
        }
        if let Some(v) = probs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!(
                "outcome probability {v} outside [0, 1]"
            )));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::Domain(format!(
                "outcome probabilities sum to {s}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub(crate) fn from_trusted(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    pub fn n_outcomes(&self) -> usize {
        self.probs.len()
    }

    /// Expected number of occupied bins.
    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }
}

/// Occupied-bin distribution for a Fock input of `i` photons.
pub fn fock_outcome_distribution(params: &LoopParams, i: u64) -> OutcomeDistribution {
    let row = FockRowEvaluator::new(params);
    let mut out = vec![0.0; params.n_outcomes()];
    row.fill(i, &mut Scratch::default(), &mut out);
    OutcomeDistribution::from_trusted(out)
}

#[derive(Default)]
struct Scratch {
    p: Vec<f64>,
    phi: Vec<num_complex::Complex64>,
}

/// Precomputed state for evaluating many Fock rows of one model.
struct FockRowEvaluator {
    log_survival: Vec<f64>,
    pb: PoissonBinomial,
}

impl FockRowEvaluator {
    fn new(params: &LoopParams) -> Self {
        Self {
            log_survival: per_photon_bin_probs(params).log_survival(),
            pb: PoissonBinomial::new(params.n_bins),
        }
    }

    fn fill(&self, photons: u64, scratch: &mut Scratch, out: &mut [f64]) {
        if photons == 0 {
            out.fill(0.0);
            out[0] = 1.0;
            return;
        }
        scratch.p.clear();
        scratch
            .p
            .extend(self.log_survival.iter().map(|&ls| fock_click(ls, photons)));
        self.pb.fill(&scratch.p, &mut scratch.phi, out);
    }

    /// Rows `start..start + rows` as a row-major block.
    fn block(&self, start: u64, rows: usize) -> DMatrix<f64> {
        let n_out = self.pb.len() + 1;
        let mut data = vec![0.0; rows * n_out];
        data.par_chunks_mut(n_out)
            .enumerate()
            .for_each_init(Scratch::default, |scratch, (k, out)| {
                self.fill(start + k as u64, scratch, out)
            });
        DMatrix::from_row_slice(rows, n_out, &data)
    }
}

/// Model POVM for Fock indices `0..=truncation`.
pub fn build_model_povm(params: &LoopParams, truncation: usize) -> PovmSet {
    PovmSet::from_trusted(FockRowEvaluator::new(params).block(0, truncation + 1))
}

/// Model POVM rows `first..first + rows`.
pub fn model_povm_rows(params: &LoopParams, first: u64, rows: usize) -> DMatrix<f64> {
    FockRowEvaluator::new(params).block(first, rows)
}

/// Streams the model POVM for `0..=truncation` in blocks of `chunk_rows`
/// rows. Each block is checked for completeness before it is handed to
/// `sink`.
pub fn for_each_model_povm_chunk<F>(
    params: &LoopParams,
    truncation: usize,
    chunk_rows: usize,
    mut sink: F,
) -> Result<()>
where
    F: FnMut(usize, &DMatrix<f64>) -> Result<()>,
{
    let chunk_rows = chunk_rows.max(1);
    let eval = FockRowEvaluator::new(params);
    let total = truncation + 1;
    let mut start = 0usize;
    while start < total {
        let rows = chunk_rows.min(total - start);
        let block = eval.block(start as u64, rows);
        for (k, row) in block.row_iter().enumerate() {
            let s = row.sum();
            if (s - 1.0).abs() > COMPLETENESS_TOL {
                return Err(Error::Data(format!(
                    "model POVM row {} sums to {s}",
                    start + k
                )));
            }
        }
        sink(start, &block)?;
        start += rows;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn reference_first_bin_probability() {
        let q = per_photon_bin_probs(&LoopParams::reference());
        assert_relative_eq!(q.as_slice()[0], 0.89613 * 0.4912, max_relative = 1e-15);
        assert!((q.as_slice()[0] - 0.44018).abs() < 5e-6);
    }

    #[test]
    fn zero_efficiency_never_clicks() {
        let p = LoopParams::new(0.7, 0.9, 0.0, 6).unwrap();
        assert!(per_photon_bin_probs(&p)
            .as_slice()
            .iter()
            .all(|&q| q == 0.0));
    }

    #[test]
    fn lossless_half_coupler_coefficients() {
        let p = LoopParams::new(0.5, 1.0, 1.0, 6).unwrap();
        let q = per_photon_bin_probs(&p);
        assert_eq!(q.as_slice()[0], 0.5);
        for j in 2..=6 {
            assert_relative_eq!(
                q.as_slice()[j - 1],
                0.5f64.powi(j as i32 - 1) * 0.5,
                max_relative = 1e-15
            );
        }
    }

    #[test]
    fn geometric_decay_of_single_photon_probabilities() {
        let p = LoopParams::reference().with_bins(40).unwrap();
        let q = per_photon_bin_probs(&p);
        let ratio = p.reflectivity * p.eta_loop;
        for w in q.as_slice()[1..].windows(2) {
            assert_relative_eq!(w[1] / w[0], ratio, max_relative = 1e-15);
        }
    }

    #[test]
    fn fock_click_examples() {
        let p = LoopParams::reference();
        for j in 1..=10 {
            assert_eq!(bin_click_prob_fock(&p, j, 0).unwrap(), 0.0);
        }
        assert_relative_eq!(
            bin_click_prob_fock(&p, 1, 1).unwrap(),
            0.89613 * 0.4912,
            max_relative = 1e-14
        );
        // Transcription of the j >= 2 branch.
        let (r, el, ed) = (0.89613f64, 0.9064f64, 0.4912f64);
        let want = 1.0 - (1.0 - (1.0 - r).powi(2) * ed / r * (r * el).powi(2)).powi(10);
        assert!((bin_click_prob_fock(&p, 3, 10).unwrap() - want).abs() < 1e-14);
        assert!(matches!(
            bin_click_prob_fock(&p, 0, 1),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            bin_click_prob_fock(&p, 11, 1),
            Err(Error::Domain(_))
        ));
    }

    fn fock_sum_oracle(params: &LoopParams, mu: f64, j: usize) -> f64 {
        let sigma = mu.sqrt();
        let hi = (mu + 8.0 * sigma + 20.0).ceil() as u64;
        let lo = (mu - 8.0 * sigma - 20.0).max(0.0).floor() as u64;
        (lo..=hi)
            .map(|i| {
                crate::probe_states::poisson_pmf(i, mu) * bin_click_prob_fock(params, j, i).unwrap()
            })
            .sum()
    }

    #[test]
    fn coherent_click_matches_poisson_weighted_fock_sum() {
        let p = LoopParams::reference();
        assert_eq!(bin_click_prob_coherent(&p, 0.0, 1).unwrap(), 0.0);
        let want = 1.0 - (-0.89613f64 * 0.4912).exp();
        assert!((bin_click_prob_coherent(&p, 1.0, 1).unwrap() - want).abs() < 1e-15);
        for &mu in &[0.1, 1.0, 10.0, 100.0, 4900.0] {
            for j in 1..=10 {
                let a = bin_click_prob_coherent(&p, mu, j).unwrap();
                let b = fock_sum_oracle(&p, mu, j);
                assert!((a - b).abs() < 1e-8, "mu={mu} j={j}: {a} vs {b}");
            }
        }
        assert!(bin_click_prob_coherent(&p, -1.0, 1).is_err());
    }

    #[test]
    fn fock_outcome_distribution_examples() {
        let p = LoopParams::reference();
        let d0 = fock_outcome_distribution(&p, 0);
        assert_eq!(d0.probs()[0], 1.0);
        assert!(d0.probs()[1..].iter().all(|&v| v == 0.0));

        let q = per_photon_bin_probs(&p);
        let q = q.as_slice();
        let d1 = fock_outcome_distribution(&p, 1);
        let none: f64 = q.iter().map(|v| 1.0 - v).product();
        let one: f64 = (0..10)
            .map(|j| {
                q[j] * (0..10)
                    .filter(|&k| k != j)
                    .map(|k| 1.0 - q[k])
                    .product::<f64>()
            })
            .sum();
        assert!((d1.probs()[0] - none).abs() < 1e-12);
        assert!((d1.probs()[1] - one).abs() < 1e-12);
        for i in [1u64, 100] {
            let marg: Vec<f64> = (1..=10)
                .map(|j| bin_click_prob_fock(&p, j, i).unwrap())
                .collect();
            let d = fock_outcome_distribution(&p, i);
            for n in 0..=10 {
                let exact = poisson_binomial::bruteforce(&marg, n).unwrap();
                assert!((d.probs()[n] - exact).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn model_povm_rows_are_normalized_and_monotone() {
        let p = LoopParams::reference();
        let povm = build_model_povm(&p, 400);
        assert_eq!(povm.theta().shape(), (401, 11));
        assert!(povm.completeness_error() < 1e-10);
        let means = povm.mean_outcome();
        for w in means.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        let single = build_model_povm(&p, 0);
        assert_eq!(
            single.theta().row(0).iter().copied().collect::<Vec<_>>()[0],
            1.0
        );
    }

    #[test]
    fn click_probability_nondecreasing_in_photon_number() {
        let p = LoopParams::reference();
        for j in 1..=10 {
            let mut last = 0.0;
            for i in 0..2000 {
                let v = bin_click_prob_fock(&p, j, i).unwrap();
                assert!(v >= last);
                last = v;
            }
        }
    }

    #[test]
    fn chunked_rows_match_full_matrix() {
        let p = LoopParams::reference().with_bins(6).unwrap();
        let full = build_model_povm(&p, 99);
        let mut seen = 0;
        for_each_model_povm_chunk(&p, 99, 17, |start, block| {
            for k in 0..block.nrows() {
                assert_eq!(block.row(k), full.theta().row(start + k));
            }
            seen += block.nrows();
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 100);
        assert_eq!(
            model_povm_rows(&p, 50, 3),
            full.theta().rows(50, 3).into_owned()
        );
    }

    #[test]
    fn params_validation_and_json() {
        assert!(LoopParams::new(0.0, 0.9, 0.5, 10).is_err());
        assert!(LoopParams::new(1.0, 0.9, 0.5, 10).is_err());
        assert!(LoopParams::new(0.5, 1.2, 0.5, 10).is_err());
        assert!(LoopParams::new(0.5, 0.9, -0.1, 10).is_err());
        assert!(LoopParams::new(0.5, 0.9, 0.5, 0).is_err());
        let json =
            r#"{"R":0.89613,"eta_loop":0.9064,"eta_det":0.4912,"n_bins":10,"bin_period_ns":156}"#;
        let p: LoopParams = serde_json::from_str(json).unwrap();
        assert_eq!(p, LoopParams::reference());
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"R\":0.89613"));
        assert!(serde_json::from_str::<LoopParams>(
            r#"{"R":1.5,"eta_loop":0.9,"eta_det":0.5,"n_bins":3}"#
        )
        .is_err());
    }

    #[test]
    fn outcome_distribution_validation() {
        assert!(OutcomeDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(OutcomeDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(OutcomeDistribution::new(vec![1.2, -0.2]).is_err());
        assert!(OutcomeDistribution::new(vec![]).is_err());
    }
}

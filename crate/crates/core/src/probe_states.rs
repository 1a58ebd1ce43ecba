//! Coherent probe ensembles and their photon-number representation.
//!
//! A coherent state of mean photon number `mu` has Poissonian photon
//! statistics. Stacking the truncated Poisson rows of all probes gives the
//! probe matrix `F` (one row per probe, one column per Fock index `0..=M`).

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default tail allowance, in standard deviations above the brightest probe.
pub const DEFAULT_TAIL_SIGMAS: f64 = 6.0;

/// Largest truncation loss tolerated for any probe row.
pub const MAX_TAIL_MASS: f64 = 1e-9;

/// Truncation used for the 71-probe reference ensemble (`mu_d = d^2`).
pub const REFERENCE_TRUNCATION: usize = 5328;

// ln(n!) - (n + 1/2) ln n + n - ln(2 pi)/2 for n = 1..=15.
const STIRLERR_TABLE: [f64; 15] = [
    0.081_061_466_795_327_258_22,
    0.041_340_695_955_409_294_09,
    0.027_677_925_684_998_339_15,
    0.020_790_672_103_765_093_11,
    0.016_644_691_189_821_192_16,
    0.013_876_128_823_070_747_99,
    0.011_896_709_945_891_770_10,
    0.010_411_265_261_972_096_50,
    0.009_255_462_182_712_732_918,
    0.008_330_563_433_362_871_256,
    0.007_573_675_487_951_840_795,
    0.006_942_840_107_209_529_866,
    0.006_408_994_188_004_207_068,
    0.005_951_370_112_758_847_736,
    0.005_554_733_551_962_801_371,
];

/// Error of Stirling's approximation to `ln(n!)`.
fn stirlerr(n: u64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n == 0 {
        return 0.0;
    }
    if n <= 15 {
        return STIRLERR_TABLE[(n - 1) as usize];
    }
    let x = n as f64;
    let nn = x * x;
    if n > 500 {
        (S0 - S1 / nn) / x
    } else if n > 80 {
        (S0 - (S1 - S2 / nn) / nn) / x
    } else if n > 35 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / x
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / x
    }
}

/// Deviance term `x ln(x/m) + m - x`, evaluated without cancellation.
fn bd0(x: f64, m: f64) -> f64 {
    if (x - m).abs() < 0.1 * (x + m) {
        let mut v = (x - m) / (x + m);
        let mut s = (x - m) * v;
        let mut ej = 2.0 * x * v;
        v *= v;
        for j in 1..1000 {
            ej *= v;
            let s1 = s + ej / f64::from(2 * j + 1);
            if s1 == s {
                return s1;
            }
            s = s1;
        }
        s
    } else {
        x * (x / m).ln() + m - x
    }
}

/// Poisson probability mass at `i` for mean `mu`, computed in log space.
///
/// Accurate to a few ulps near the mode even for `mu` in the 1e5 range.
pub fn poisson_pmf(i: u64, mu: f64) -> f64 {
    if mu == 0.0 {
        return if i == 0 { 1.0 } else { 0.0 };
    }
    if i == 0 {
        return (-mu).exp();
    }
    let x = i as f64;
    (-stirlerr(i) - bd0(x, mu)).exp() / (std::f64::consts::TAU * x).sqrt()
}

/// Poisson row `[P(0), ..., P(truncation)]` for mean `mean_photon`.
pub fn poisson_row(mean_photon: f64, truncation: usize) -> Result<Vec<f64>> {
    if !(mean_photon >= 0.0) || !mean_photon.is_finite() {
        return Err(Error::Domain(format!(
            "mean photon number must be finite and non-negative, got {mean_photon}"
        )));
    }
    Ok((0..=truncation as u64)
        .map(|i| poisson_pmf(i, mean_photon))
        .collect())
}

/// `ceil(max_mean + tail_sigmas * sqrt(max_mean))`.
pub fn default_truncation(max_mean: f64, tail_sigmas: f64) -> usize {
    let max_mean = max_mean.max(0.0);
    (max_mean + tail_sigmas * max_mean.sqrt()).ceil() as usize
}

/// Smallest truncation whose discarded Poisson tail is at most `tail_mass`.
fn tail_truncation(mu: f64, tail_mass: f64) -> usize {
    let mut acc = 0.0;
    let mut i = 0u64;
    loop {
        acc += poisson_pmf(i, mu);
        if 1.0 - acc <= tail_mass {
            return i as usize;
        }
        i += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherentProbe {
    pub label: u32,
    /// `|alpha|^2`.
    pub mean_photon: f64,
}

impl CoherentProbe {
    pub fn new(label: u32, mean_photon: f64) -> Result<Self> {
        if !(mean_photon >= 0.0) || !mean_photon.is_finite() {
            return Err(Error::Domain(format!(
                "probe {label}: mean photon number must be non-negative, got {mean_photon}"
            )));
        }
        Ok(Self { label, mean_photon })
    }
}

/// On-disk form of an ensemble definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub probes: Vec<CoherentProbe>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_sigmas: Option<f64>,
}

/// Ordered set of coherent probes with an explicit Fock truncation `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnsembleFile", into = "EnsembleFile")]
pub struct ProbeEnsemble {
    probes: Vec<CoherentProbe>,
    truncation_dim: usize,
    tail_sigmas: f64,
}

impl ProbeEnsemble {
    /// Builds an ensemble, choosing `M` automatically when `truncation_dim`
    /// is `None`.
    ///
    /// The automatic choice is the larger of [`default_truncation`] and the
    /// smallest `M` that keeps every row's lost tail below [`MAX_TAIL_MASS`].
    /// An explicit `truncation_dim` is kept verbatim as long as it is not
    /// below [`default_truncation`].
    pub fn new(
        probes: Vec<CoherentProbe>,
        truncation_dim: Option<usize>,
        tail_sigmas: f64,
    ) -> Result<Self> {
        if probes.is_empty() {
            return Err(Error::Config("probe ensemble is empty".into()));
        }
        if !(tail_sigmas >= 0.0) {
            return Err(Error::Config(format!(
                "tail_sigmas must be non-negative, got {tail_sigmas}"
            )));
        }
        for p in &probes {
            CoherentProbe::new(p.label, p.mean_photon)?;
        }
        let max_mean = probes.iter().map(|p| p.mean_photon).fold(0.0, f64::max);
        let floor = default_truncation(max_mean, tail_sigmas);
        let truncation_dim = match truncation_dim {
            Some(m) if m < floor => {
                return Err(Error::Config(format!(
                    "truncation {m} is below mu_max + {tail_sigmas} sigma = {floor}"
                )))
            }
            Some(m) => m,
            None => probes
                .iter()
                .map(|p| tail_truncation(p.mean_photon, MAX_TAIL_MASS))
                .fold(floor, usize::max),
        };
        Ok(Self {
            probes,
            truncation_dim,
            tail_sigmas,
        })
    }

    /// `D` probes with quadratically increasing means `mu_d = scale * d^2`.
    pub fn quadratic(d_count: usize, scale: f64, truncation_dim: Option<usize>) -> Result<Self> {
        let probes = (0..d_count)
            .map(|d| CoherentProbe::new(d as u32, scale * (d * d) as f64))
            .collect::<Result<Vec<_>>>()?;
        Self::new(probes, truncation_dim, DEFAULT_TAIL_SIGMAS)
    }

    /// `D` probes with means evenly spaced on `[0, max_mean]`.
    pub fn linear(d_count: usize, max_mean: f64, truncation_dim: Option<usize>) -> Result<Self> {
        let denom = (d_count.max(2) - 1) as f64;
        let probes = (0..d_count)
            .map(|d| CoherentProbe::new(d as u32, max_mean * d as f64 / denom))
            .collect::<Result<Vec<_>>>()?;
        Self::new(probes, truncation_dim, DEFAULT_TAIL_SIGMAS)
    }

    /// The 71-probe ensemble `mu_d = d^2`, `d = 0..=70`, truncated at 5328.
    pub fn reference() -> Self {
        Self::quadratic(71, 1.0, Some(REFERENCE_TRUNCATION)).expect("reference ensemble is valid")
    }

    pub fn probes(&self) -> &[CoherentProbe] {
        &self.probes
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn truncation_dim(&self) -> usize {
        self.truncation_dim
    }

    pub fn tail_sigmas(&self) -> f64 {
        self.tail_sigmas
    }

    pub fn max_mean(&self) -> f64 {
        self.probes
            .iter()
            .map(|p| p.mean_photon)
            .fold(0.0, f64::max)
    }

    /// Same labels and truncation with every mean replaced by `f(index, mean)`.
    ///
    /// Used by Monte-Carlo perturbation; the truncation is kept fixed so that
    /// perturbed matrices stay conformable with the unperturbed POVM.
    pub fn map_means(&self, mut f: impl FnMut(usize, f64) -> f64) -> Result<Self> {
        let probes = self
            .probes
            .iter()
            .enumerate()
            .map(|(k, p)| CoherentProbe::new(p.label, f(k, p.mean_photon)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            probes,
            truncation_dim: self.truncation_dim,
            tail_sigmas: self.tail_sigmas,
        })
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

impl TryFrom<EnsembleFile> for ProbeEnsemble {
    type Error = Error;

    fn try_from(f: EnsembleFile) -> Result<Self> {
        Self::new(
            f.probes,
            f.truncation_dim,
            f.tail_sigmas.unwrap_or(DEFAULT_TAIL_SIGMAS),
        )
    }
}

impl From<ProbeEnsemble> for EnsembleFile {
    fn from(e: ProbeEnsemble) -> Self {
        Self {
            probes: e.probes,
            truncation_dim: Some(e.truncation_dim),
            tail_sigmas: Some(e.tail_sigmas),
        }
    }
}

/// `F[d, i] = exp(-mu_d) mu_d^i / i!`, `D x (M + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeMatrix {
    values: DMatrix<f64>,
}

impl ProbeMatrix {
    /// Wraps an existing matrix after checking that rows are sub-stochastic.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        for (d, row) in values.row_iter().enumerate() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Data(format!(
                    "probe row {d} has entries outside [0, 1]"
                )));
            }
            if row.sum() > 1.0 + 1e-12 {
                return Err(Error::Data(format!("probe row {d} sums above one")));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_probes(&self) -> usize {
        self.values.nrows()
    }

    /// `M`, the largest Fock index represented.
    pub fn truncation_dim(&self) -> usize {
        self.values.ncols() - 1
    }

    /// `sum_d F[d, i]` for every Fock index.
    pub fn column_mass(&self) -> Vec<f64> {
        self.values.column_iter().map(|c| c.sum()).collect()
    }

    /// Same rows in the order given by `order`.
    pub fn permute_rows(&self, order: &[usize]) -> Self {
        let v = &self.values;
        Self {
            values: DMatrix::from_fn(order.len(), v.ncols(), |r, c| v[(order[r], c)]),
        }
    }
}

/// Stacks the Poisson rows of every probe. Rows are evaluated in parallel.
pub fn build_probe_matrix(ensemble: &ProbeEnsemble) -> Result<ProbeMatrix> {
    let m = ensemble.truncation_dim();
    let rows = ensemble
        .probes()
        .par_iter()
        .map(|p| poisson_row(p.mean_photon, m))
        .collect::<Result<Vec<_>>>()?;
    let values = DMatrix::from_fn(rows.len(), m + 1, |d, i| rows[d][i]);
    Ok(ProbeMatrix { values })
}

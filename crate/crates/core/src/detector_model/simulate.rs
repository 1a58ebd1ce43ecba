//! Stochastic click simulation for coherent inputs.
//!
//! A coherent pulse splits into independent Poissonian sub-pulses, one per
//! time-bin, so each bin clicks independently with probability
//! `1 - exp(-mu q_j)`. An optional per-bin dark-click probability is OR-ed in.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Geometric};
use rayon::prelude::*;

use super::{per_photon_bin_probs, LoopParams, OutcomeDistribution};
use crate::{rng, Error, Result};

/// Dark-click probability per 2 ns window of the reference device.
pub const DEFAULT_DARK_PROBABILITY: f64 = 3e-8;

/// Pulses per independently seeded block.
const PULSE_BLOCK: u64 = 1 << 16;

/// Per-bin click probabilities for a coherent input, including dark clicks.
pub fn coherent_click_probs(
    params: &LoopParams,
    mean_photon: f64,
    dark_prob: f64,
) -> Result<Vec<f64>> {
    if !(mean_photon >= 0.0) || !mean_photon.is_finite() {
        return Err(Error::Domain(format!(
            "mean photon number must be finite and non-negative, got {mean_photon}"
        )));
    }
    if !(0.0..=1.0).contains(&dark_prob) {
        return Err(Error::Domain(format!(
            "dark probability {dark_prob} outside [0, 1]"
        )));
    }
    Ok(per_photon_bin_probs(params)
        .as_slice()
        .iter()
        .map(|&q| 1.0 - (-mean_photon * q).exp() * (1.0 - dark_prob))
        .collect())
}

/// Outcome of a pulse-by-pulse simulation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickSimulation {
    pub n_pulses: u64,
    /// Total clicks in each bin.
    pub bin_counts: Vec<u64>,
    /// Number of pulses with exactly `n` occupied bins, `n = 0..=n_bins`.
    pub occupancy_counts: Vec<u64>,
}

impl ClickSimulation {
    /// Empirical per-bin click probabilities.
    pub fn bin_probabilities(&self) -> Vec<f64> {
        let n = self.n_pulses as f64;
        self.bin_counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Empirical distribution of occupied-bin counts, counted pulse by pulse.
    pub fn empirical_distribution(&self) -> OutcomeDistribution {
        let n = self.n_pulses as f64;
        OutcomeDistribution::from_trusted(
            self.occupancy_counts
                .iter()
                .map(|&c| c as f64 / n)
                .collect(),
        )
    }
}

/// Visits the indices `0..len` where a Bernoulli(`p`) trial succeeds, by
/// drawing geometric gaps. Cost is proportional to the number of successes.
fn for_each_success<R: Rng>(rng: &mut R, p: f64, len: u64, mut f: impl FnMut(usize)) {
    if p <= 0.0 {
        return;
    }
    if p >= 1.0 {
        (0..len as usize).for_each(f);
        return;
    }
    let geo = Geometric::new(p).expect("0 < p < 1");
    let mut pos = 0u64;
    loop {
        let gap = geo.sample(rng);
        pos = match pos.checked_add(gap) {
            Some(v) if v < len => v,
            _ => break,
        };
        f(pos as usize);
        pos += 1;
    }
}

/// Simulates `n_pulses` coherent pulses of mean `mean_photon`.
///
/// Each bin of each pulse clicks independently. Pulses are processed in
/// blocks with their own derived random stream, so the result depends only
/// on `seed` and not on the thread pool.
pub fn simulate_bin_clicks(
    params: &LoopParams,
    mean_photon: f64,
    n_pulses: u64,
    seed: u64,
    dark_prob: f64,
) -> Result<ClickSimulation> {
    if n_pulses == 0 {
        return Err(Error::Config("n_pulses must be at least 1".into()));
    }
    let probs = coherent_click_probs(params, mean_photon, dark_prob)?;
    let n_bins = params.n_bins;
    let n_blocks = n_pulses.div_ceil(PULSE_BLOCK);

    let partials: Vec<(Vec<u64>, Vec<u64>)> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let len = PULSE_BLOCK.min(n_pulses - b * PULSE_BLOCK);
            let mut rng = rng::stream(seed, "pulse-block", b);
            let mut occupied = vec![0u16; len as usize];
            let mut bins = vec![0u64; n_bins];
            for (j, &p) in probs.iter().enumerate() {
                if p <= 0.5 {
                    for_each_success(&mut rng, p, len, |k| {
                        occupied[k] += 1;
                        bins[j] += 1;
                    });
                } else {
                    let mut misses = 0u64;
                    occupied.iter_mut().for_each(|o| *o += 1);
                    for_each_success(&mut rng, 1.0 - p, len, |k| {
                        occupied[k] -= 1;
                        misses += 1;
                    });
                    bins[j] += len - misses;
                }
            }
            let mut hist = vec![0u64; n_bins + 1];
            for &o in &occupied {
                hist[o as usize] += 1;
            }
            (bins, hist)
        })
        .collect();

    let mut bin_counts = vec![0u64; n_bins];
    let mut occupancy_counts = vec![0u64; n_bins + 1];
    for (bins, hist) in partials {
        bin_counts.iter_mut().zip(bins).for_each(|(a, b)| *a += b);
        occupancy_counts
            .iter_mut()
            .zip(hist)
            .for_each(|(a, b)| *a += b);
    }
    Ok(ClickSimulation {
        n_pulses,
        bin_counts,
        occupancy_counts,
    })
}

/// Per-bin click totals drawn directly from `Binomial(n_pulses, p_j)`.
///
/// Statistically equivalent to the totals of [`simulate_bin_clicks`] but
/// without per-pulse bookkeeping, for runs of 1e7 pulses and beyond.
pub fn sample_bin_counts(
    params: &LoopParams,
    mean_photon: f64,
    n_pulses: u64,
    seed: u64,
    dark_prob: f64,
) -> Result<Vec<u64>> {
    if n_pulses == 0 {
        return Err(Error::Config("n_pulses must be at least 1".into()));
    }
    let probs = coherent_click_probs(params, mean_photon, dark_prob)?;
    Ok(probs
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let mut rng = rng::stream(seed, "bin-counts", j as u64);
            Binomial::new(n_pulses, p)
                .expect("valid binomial")
                .sample(&mut rng)
        })
        .collect())
}

//! Distribution of the number of successes among independent Bernoulli
//! trials with unequal success probabilities.
//!
//! The closed form evaluates the characteristic function on the `(L+1)`-th
//! roots of unity and inverts it with a discrete Fourier sum:
//!
//! ```text
//! f(n) = 1/(L+1) * sum_{l=0}^{L} C^(-l n) * prod_j (1 + (C^l - 1) p_j),   C = exp(2 pi i / (L+1))
//! ```
//!
//! Subset enumeration is kept as an exact reference for short vectors.

use num_complex::Complex64;

use crate::{Error, Result};

/// Longest probability vector accepted by [`bruteforce`].
pub const BRUTEFORCE_MAX_LEN: usize = 20;

/// Largest imaginary residue tolerated by [`closed_form`].
pub const IMAG_RESIDUE_TOL: f64 = 1e-10;

fn check_probs(p: &[f64]) -> Result<()> {
    match p.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(j) => Err(Error::Domain(format!(
            "success probability p[{j}] = {} is outside [0, 1]",
            p[j]
        ))),
        None => Ok(()),
    }
}

/// Exact subset enumeration over all `A` with `|A| = n`.
pub fn bruteforce(p: &[f64], n: usize) -> Result<f64> {
    if p.len() > BRUTEFORCE_MAX_LEN {
        return Err(Error::Domain(format!(
            "subset enumeration refused for {} trials (limit {BRUTEFORCE_MAX_LEN})",
            p.len()
        )));
    }
    check_probs(p)?;
    if n > p.len() {
        return Err(Error::Domain(format!("n = {n} exceeds {} trials", p.len())));
    }
    let mut total = 0.0;
    for mask in 0u32..(1u32 << p.len()) {
        if mask.count_ones() as usize != n {
            continue;
        }
        total += p
            .iter()
            .enumerate()
            .map(|(j, &pj)| if mask >> j & 1 == 1 { pj } else { 1.0 - pj })
            .product::<f64>();
    }
    Ok(total)
}

/// Literal single-outcome evaluation of the DFT closed form.
///
/// Sums all `L + 1` complex terms, checks that the imaginary residue is
/// negligible and clamps the real part to `[0, 1]`.
pub fn closed_form(p: &[f64], n: usize) -> Result<f64> {
    check_probs(p)?;
    let len = p.len();
    if n > len {
        return Err(Error::Domain(format!("n = {n} exceeds {len} trials")));
    }
    let k = len + 1;
    let tw = twiddles(k);
    let mut acc = Complex64::new(0.0, 0.0);
    for l in 0..k {
        let c = tw[l] - 1.0;
        let prod = p
            .iter()
            .fold(Complex64::new(1.0, 0.0), |z, &pj| z * (1.0 + c * pj));
        acc += tw[(k - (l * n) % k) % k] * prod;
    }
    acc /= k as f64;
    if acc.im.abs() >= IMAG_RESIDUE_TOL {
        return Err(Error::Domain(format!(
            "closed form left an imaginary residue of {:e}",
            acc.im
        )));
    }
    Ok(acc.re.clamp(0.0, 1.0))
}

fn twiddles(k: usize) -> Vec<Complex64> {
    (0..k)
        .map(|m| Complex64::from_polar(1.0, std::f64::consts::TAU * m as f64 / k as f64))
        .collect()
}

/// Reusable evaluator of the full distribution `[f(0), ..., f(L)]` for a
/// fixed number of trials `L`.
///
/// Uses conjugate symmetry of the characteristic function, so only
/// `floor(L/2) + 1` products are formed per call.
#[derive(Debug, Clone)]
pub struct PoissonBinomial {
    len: usize,
    twiddles: Vec<Complex64>,
}

impl PoissonBinomial {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            twiddles: twiddles(len + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Writes the distribution of the success count into `out` (length
    /// `L + 1`). `p` is assumed to be validated by the caller.
    pub fn fill(&self, p: &[f64], phi: &mut Vec<Complex64>, out: &mut [f64]) {
        debug_assert_eq!(p.len(), self.len);
        debug_assert_eq!(out.len(), self.len + 1);
        let k = self.len + 1;
        let half = k / 2;
        phi.clear();
        for l in 0..=half {
            let c = self.twiddles[l] - 1.0;
            phi.push(
                p.iter()
                    .fold(Complex64::new(1.0, 0.0), |z, &pj| z * (1.0 + c * pj)),
            );
        }
        let inv_k = 1.0 / k as f64;
        for (n, slot) in out.iter_mut().enumerate() {
            let mut s = phi[0].re;
            for (l, z) in phi.iter().enumerate().skip(1) {
                let w = self.twiddles[(k - (l * n) % k) % k];
                let term = (w * z).re;
                if 2 * l == k {
                    s += term;
                } else {
                    s += 2.0 * term;
                }
            }
            *slot = (s * inv_k).clamp(0.0, 1.0);
        }
    }

    /// Convenience wrapper around [`PoissonBinomial::fill`].
    pub fn distribution(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.len {
            return Err(Error::Dimension(format!(
                "expected {} probabilities, got {}",
                self.len,
                p.len()
            )));
        }
        check_probs(p)?;
        let mut out = vec![0.0; self.len + 1];
        let mut phi = Vec::with_capacity(self.len / 2 + 1);
        self.fill(p, &mut phi, &mut out);
        Ok(out)
    }
}

/// Full distribution of the success count, `[f(0), ..., f(L)]`.
pub fn distribution(p: &[f64]) -> Result<Vec<f64>> {
    PoissonBinomial::new(p.len()).distribution(p)
}

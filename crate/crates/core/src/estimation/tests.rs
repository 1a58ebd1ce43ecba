use proptest::prelude::*;

use super::*;

fn bins119() -> LoopParams {
    LoopParams::reference().with_bins(119).unwrap()
}

fn noisy(params: &LoopParams, mu: f64, n_pulses: u64, seed: u64) -> OutcomeDistribution {
    let counts = sample_bin_counts(params, mu, n_pulses, seed, 0.0).unwrap();
    outcome_probabilities(&bin_probabilities(&counts, n_pulses).unwrap()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Occupied-bin distribution for `photons` photons that each land in bin `j`
/// with probability `q_j` or are lost, by inclusion-exclusion over the set
/// of occupied bins.
fn exact_occupancy(q: &[f64], photons: u32) -> Vec<f64> {
    let loss = 1.0 - q.iter().sum::<f64>();
    let k = q.len();
    let mut out = vec![0.0; k + 1];
    for s in 0..1usize << k {
        let mut p = 0.0;
        let mut t = s;
        loop {
            let mass = loss
                + (0..k)
                    .filter(|j| t >> j & 1 == 1)
                    .map(|j| q[j])
                    .sum::<f64>();
            let sign = if (s ^ t).count_ones() % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            p += sign * mass.powi(photons as i32);
            if t == 0 {
                break;
            }
            t = (t - 1) & s;
        }
        out[s.count_ones() as usize] += p;
    }
    out
}

#[test]
fn vacuum_input_gives_zero() {
    let p = LoopParams::reference();
    let mut v = vec![0.0; 11];
    v[0] = 1.0;
    let e = estimate_mean_photon(&OutcomeDistribution::new(v).unwrap(), &p).unwrap();
    assert_eq!(e.mean_photon, 0.0);
    assert_eq!(e.residual, 0.0);
    assert_eq!(e.confidence_interval, (0.0, 0.0));
}

#[test]
fn malformed_input_is_rejected() {
    let p = LoopParams::reference();
    let short: OutcomeDistribution = serde_json::from_str(r#"{"probs":[0.5,0.5]}"#).unwrap();
    assert!(matches!(
        estimate_mean_photon(&short, &p),
        Err(Error::Dimension(_))
    ));
    let mut v = vec![0.0; 11];
    v[0] = 0.9;
    let unnormalized: OutcomeDistribution =
        serde_json::from_str(&format!(r#"{{"probs":{v:?}}}"#)).unwrap();
    assert!(matches!(
        estimate_mean_photon(&unnormalized, &p),
        Err(Error::Domain(_))
    ));
    assert!(coherent_outcome_distribution(&p, -1.0).is_err());
    assert!(crosscheck_fock_path(f64::NAN, &p, 8.0).is_err());
}

#[test]
fn noiseless_estimates_are_consistent() {
    let p = bins119();
    for mu in [1.0, 1e2, 1e4, 7.1e4] {
        let data = coherent_outcome_distribution(&p, mu).unwrap();
        let e = estimate_mean_photon(&data, &p).unwrap();
        assert!(
            ((e.mean_photon - mu) / mu).abs() < 1e-8,
            "{mu}: {}",
            e.mean_photon
        );
        assert!(e.converged && e.warnings.is_empty(), "{:?}", e.warnings);
        let (lo, hi) = e.confidence_interval;
        assert!(lo <= e.mean_photon && e.mean_photon <= hi);
    }
}

#[test]
fn ten_bin_detector_saturates_without_tripping_the_basin_check() {
    let p = LoopParams::reference();
    for mu in [0.05, 3.0, 300.0] {
        let e = estimate_mean_photon(&coherent_outcome_distribution(&p, mu).unwrap(), &p).unwrap();
        assert!(
            ((e.mean_photon - mu) / mu).abs() < 1e-8,
            "{mu}: {}",
            e.mean_photon
        );
    }
}

#[test]
fn dead_detector_is_a_domain_error() {
    let p = LoopParams::new(0.9, 0.9, 0.0, 5).unwrap();
    let mut v = vec![0.0; 6];
    v[0] = 1.0;
    let err = estimate_mean_photon(&OutcomeDistribution::new(v).unwrap(), &p).unwrap_err();
    assert!(matches!(err, Error::Domain(_)), "{err}");
}

#[test]
fn competing_basins_are_reported() {
    let p = bins119();
    let a = coherent_outcome_distribution(&p, 30.0).unwrap().into_vec();
    let b = coherent_outcome_distribution(&p, 3e4).unwrap().into_vec();
    let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
    let err = estimate_mean_photon(&OutcomeDistribution::new(mix).unwrap(), &p).unwrap_err();
    assert!(err.to_string().contains("separate minima"), "{err}");
}

#[test]
fn bright_noisy_estimate_is_within_five_percent() {
    let p = bins119();
    let e = estimate_mean_photon(&noisy(&p, 71_000.0, 15_000_000, 1), &p).unwrap();
    assert!(
        (e.mean_photon / 71_000.0 - 1.0).abs() < 0.05,
        "{}",
        e.mean_photon
    );
    assert!(e.residual > 0.0);
}

#[test]
fn bootstrap_interval_covers_truth() {
    let p = bins119();
    let mu = 71_000.0;
    let trials = 100;
    let mut covered = 0;
    let mut curvature_covered = 0;
    for t in 0..trials {
        let data = noisy(&p, mu, 15_000_000, 1000 + t);
        let opts = EstimateOptions {
            bootstrap: Some(BootstrapConfig {
                n_pulses: 15_000_000,
                trials: 100,
                seed: 5000 + t,
            }),
            ..EstimateOptions::default()
        };
        let e = estimate_mean_photon_with(&data, &p, &opts).unwrap();
        assert_eq!(e.interval_method, IntervalMethod::Bootstrap);
        let (lo, hi) = e.confidence_interval;
        assert!(lo <= e.mean_photon && e.mean_photon <= hi);
        covered += usize::from(lo <= mu && mu <= hi);
        let (lo, hi) = e.curvature_interval;
        curvature_covered += usize::from(lo <= mu && mu <= hi);
    }
    println!(
        "bootstrap coverage {covered}/{trials}, curvature coverage {curvature_covered}/{trials}"
    );
    assert!(covered >= 90, "{covered}/{trials}");
}

#[test]
fn bootstrap_is_seeded() {
    let p = LoopParams::reference();
    let data = noisy(&p, 20.0, 100_000, 9);
    let opts = |seed| EstimateOptions {
        bootstrap: Some(BootstrapConfig {
            n_pulses: 100_000,
            trials: 40,
            seed,
        }),
        ..EstimateOptions::default()
    };
    let a = estimate_mean_photon_with(&data, &p, &opts(1)).unwrap();
    let b = estimate_mean_photon_with(&data, &p, &opts(1)).unwrap();
    let c = estimate_mean_photon_with(&data, &p, &opts(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.bootstrap_interval, c.bootstrap_interval);
    assert_eq!(a.bootstrap_trials, 40);
}

#[test]
fn estimate_json_round_trip() {
    let p = LoopParams::reference();
    let e = estimate_mean_photon(&noisy(&p, 5.0, 50_000, 2), &p).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("estimate.json");
    e.save(&path).unwrap();
    assert_eq!(BrightStateEstimate::load(&path).unwrap(), e);
}

#[test]
fn fock_path_of_vacuum_is_the_zero_outcome() {
    let d = crosscheck_fock_path(0.0, &bins119(), 8.0).unwrap();
    assert_eq!(d.probs()[0], 1.0);
    assert!(d.probs()[1..].iter().all(|&v| v == 0.0));
}

#[test]
fn both_paths_share_the_mean_occupied_bin_count() {
    // The mean only depends on the per-bin marginals, which agree exactly.
    for (mu, p) in [
        (100.0, LoopParams::reference()),
        (71_000.0, bins119()),
        (2.0, bins119()),
    ] {
        let a = coherent_outcome_distribution(&p, mu).unwrap().mean();
        let b = crosscheck_fock_path(mu, &p, 8.0).unwrap().mean();
        assert!((a - b).abs() < 1e-9 * a, "{mu}: {a} vs {b}");
    }
}

#[test]
fn analytic_path_equals_poisson_mixture_of_exact_occupancy() {
    let p = LoopParams::new(0.6, 0.9, 0.7, 3).unwrap();
    let q = per_photon_bin_probs(&p).as_slice().to_vec();
    for mu in [0.3, 2.0, 7.5] {
        let mut mix = vec![0.0; 4];
        for i in 0..200u32 {
            let w = poisson_pmf(u64::from(i), mu);
            exact_occupancy(&q, i)
                .iter()
                .zip(&mut mix)
                .for_each(|(e, m)| *m += w * e);
        }
        let analytic = coherent_outcome_distribution(&p, mu).unwrap();
        assert!(max_abs_diff(&mix, analytic.probs()) < 1e-12);
        // Model Fock rows treat the bins as independent for fixed photon
        // number, so their Poisson mixture differs.
        let fock = crosscheck_fock_path(mu, &p, 8.0).unwrap();
        assert!(max_abs_diff(fock.probs(), analytic.probs()) > 1e-4);
    }
}

#[test]
#[ignore = "fails by about 3e-3: the independent-bin Fock rows do not mix into the coherent distribution"]
fn fock_path_matches_analytic_path_at_one_hundred_photons() {
    let p = LoopParams::reference();
    let a = coherent_outcome_distribution(&p, 100.0).unwrap();
    let b = crosscheck_fock_path(100.0, &p, 8.0).unwrap();
    let d = max_abs_diff(a.probs(), b.probs());
    assert!(d < 1e-8, "max difference {d:e}");
}

#[test]
fn fock_window_covers_skewed_small_mean_tails() {
    let (lo, hi) = fock_window(1.0, 8.0);
    assert_eq!(lo, 0);
    assert!(poisson_pmf(hi + 1, 1.0) <= FOCK_PMF_FLOOR && hi > 9);
    let (lo, hi) = fock_window(71_000.0, 8.0);
    let sd = 71_000f64.sqrt();
    assert!(lo as f64 <= 71_000.0 - 8.0 * sd && hi as f64 >= 71_000.0 + 8.0 * sd);
    assert!(((hi - lo) as f64) < 17.0 * sd);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn model_mean_increases_with_mu(
        r in 0.05f64..0.99, eta_loop in 0.05f64..0.99, eta_det in 0.05f64..1.0,
        bins in 1usize..40, mu in 1e-3f64..1e3,
    ) {
        let p = LoopParams::new(r, eta_loop, eta_det, bins).unwrap();
        let a = coherent_outcome_distribution(&p, mu).unwrap().mean();
        let b = coherent_outcome_distribution(&p, mu * 1.01).unwrap().mean();
        prop_assert!(b > a || b >= bins as f64 - 1e-9);
    }

    #[test]
    fn interval_brackets_estimate(mu in 0.5f64..5e4, seed in 0u64..1000) {
        let p = bins119();
        let e = estimate_mean_photon(&noisy(&p, mu, 1_000_000, seed), &p).unwrap();
        let (lo, hi) = e.confidence_interval;
        prop_assert!(0.0 <= lo && lo <= e.mean_photon && e.mean_photon <= hi);
        prop_assert!((e.mean_photon / mu - 1.0).abs() < 0.05);
    }
}

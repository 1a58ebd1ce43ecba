//! Time-tagger histograms to click probabilities and outcome matrices.
//!
//! A raw histogram accumulates detector events against the time since each
//! laser trigger. Integrating the counts inside one narrow window per loop
//! round trip gives the number of clicks in each detector time-bin; dividing
//! by the number of laser pulses gives the per-bin click probability `p_j`.
//! The distribution of the number of occupied bins follows from the
//! Poisson-binomial transform of the `p_j`, which is exact only if bins fire
//! independently.

use std::io::{BufRead, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector_model::{poisson_binomial, OutcomeDistribution, NORMALIZATION_TOL};
use crate::povm::parse_field;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeTagHistogram {
    pub bin_width_ps: f64,
    /// Arrival time of the first pulse of the train, relative to the start
    /// of the histogram.
    pub t0_ps: f64,
    pub counts: Vec<u64>,
}

impl TimeTagHistogram {
    pub fn span_ps(&self) -> f64 {
        self.counts.len() as f64 * self.bin_width_ps
    }

    /// CSV layout: a `bin_width_ps,t0_ps` header, one line of values, then
    /// one count per line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("<histogram writer>", e);
        writeln!(out, "bin_width_ps,t0_ps").map_err(io)?;
        writeln!(out, "{},{}", self.bin_width_ps, self.t0_ps).map_err(io)?;
        for c in &self.counts {
            writeln!(out, "{c}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut lines = std::io::BufReader::new(input).lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Data(format!("histogram CSV ended before {what}")))?
                .map_err(|e| Error::io("<histogram reader>", e))
        };
        let header = next("header")?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["bin_width_ps", "t0_ps"] {
            return Err(Error::Data(format!(
                "unexpected histogram header {header:?}"
            )));
        }
        let meta = csv::StringRecord::from(next("metadata")?.split(',').collect::<Vec<_>>());
        let bin_width_ps: f64 = parse_field(&meta, 0)?;
        let t0_ps: f64 = parse_field(&meta, 1)?;
        let mut counts = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io("<histogram reader>", e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            counts.push(
                line.parse()
                    .map_err(|_| Error::Data(format!("bad histogram count {line:?}")))?,
            );
        }
        let hist = Self {
            bin_width_ps,
            t0_ps,
            counts,
        };
        hist.validate()?;
        Ok(hist)
    }

    fn validate(&self) -> Result<()> {
        if !(self.bin_width_ps > 0.0) {
            return Err(Error::Data(format!(
                "histogram bin width must be positive, got {}",
                self.bin_width_ps
            )));
        }
        if self.counts.is_empty() {
            return Err(Error::Data("histogram has no bins".into()));
        }
        Ok(())
    }

    /// Reads CSV, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        if is_json(path) {
            let hist: Self = serde_json::from_reader(std::io::BufReader::new(file))?;
            hist.validate()?;
            Ok(hist)
        } else {
            Self::read_csv(file)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        if is_json(path) {
            serde_json::to_writer(&mut out, self)?;
            out.flush().map_err(|e| Error::io(path, e))
        } else {
            self.write_csv(out)
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Placement of the detector time-bin windows on the raw histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningConfig {
    pub n_detector_bins: usize,
    #[serde(default = "default_window_width")]
    pub window_width_ns: f64,
    #[serde(default = "default_bin_period")]
    pub bin_period_ns: f64,
    /// Window centres relative to `t0`, overriding `j * bin_period_ns`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_offsets_ns: Option<Vec<f64>>,
}

fn default_window_width() -> f64 {
    2.0
}

fn default_bin_period() -> f64 {
    crate::detector_model::DEFAULT_BIN_PERIOD_NS
}

impl BinningConfig {
    pub fn new(n_detector_bins: usize) -> Self {
        Self {
            n_detector_bins,
            window_width_ns: default_window_width(),
            bin_period_ns: default_bin_period(),
            window_offsets_ns: None,
        }
    }

    /// Centre of window `j` (0-based) relative to `t0`, ps.
    fn centre_offset_ps(&self, j: usize) -> f64 {
        match &self.window_offsets_ns {
            Some(offsets) => offsets[j] * 1e3,
            None => j as f64 * self.bin_period_ns * 1e3,
        }
    }

    /// Raw-bin index range of every window. A raw bin belongs to a window
    /// when its start time lies in `[centre - w/2, centre + w/2)`.
    pub fn windows(&self, hist: &TimeTagHistogram) -> Result<Vec<Range<usize>>> {
        if self.n_detector_bins == 0 {
            return Err(Error::Config("n_detector_bins must be at least 1".into()));
        }
        if !(self.window_width_ns > 0.0) {
            return Err(Error::Config("window width must be positive".into()));
        }
        if let Some(offsets) = &self.window_offsets_ns {
            if offsets.len() != self.n_detector_bins {
                return Err(Error::Config(format!(
                    "{} window offsets given for {} detector bins",
                    offsets.len(),
                    self.n_detector_bins
                )));
            }
        }
        hist.validate()?;
        let bw = hist.bin_width_ps;
        let half = self.window_width_ns * 1e3 / 2.0;
        let mut ranges = Vec::with_capacity(self.n_detector_bins);
        for j in 0..self.n_detector_bins {
            let centre = hist.t0_ps + self.centre_offset_ps(j);
            let (lo, hi) = (centre - half, centre + half);
            if lo < 0.0 || hi > hist.span_ps() + 1e-6 {
                return Err(Error::Config(format!(
                    "window {} [{lo} ps, {hi} ps) lies outside the histogram span [0, {} ps)",
                    j + 1,
                    hist.span_ps()
                )));
            }
            let start = (lo / bw - 1e-9).ceil() as usize;
            let end = ((hi / bw - 1e-9).ceil() as usize).min(hist.counts.len());
            ranges.push(start..end);
        }
        let mut sorted = ranges.clone();
        sorted.sort_by_key(|r| r.start);
        if sorted.windows(2).any(|w| w[1].start < w[0].end) {
            return Err(Error::Config("detector windows overlap".into()));
        }
        Ok(ranges)
    }

    /// Histogram length and `t0` that hold every window with `margin_ns`
    /// to spare on both sides.
    pub fn layout(&self, bin_width_ps: f64, margin_ns: f64) -> (usize, f64) {
        let t0_ps = (margin_ns + self.window_width_ns) * 1e3;
        let last = (0..self.n_detector_bins)
            .map(|j| self.centre_offset_ps(j))
            .fold(0.0, f64::max);
        let span = t0_ps + last + (margin_ns + self.window_width_ns) * 1e3;
        ((span / bin_width_ps).ceil() as usize, t0_ps)
    }
}

/// Sums raw counts inside each detector window; everything else is dropped.
pub fn integrate_histogram(hist: &TimeTagHistogram, cfg: &BinningConfig) -> Result<Vec<u64>> {
    Ok(cfg
        .windows(hist)?
        .into_iter()
        .map(|r| hist.counts[r].iter().sum())
        .collect())
}

/// `p_j = counts_j / n_pulses`.
pub fn bin_probabilities(bin_counts: &[u64], n_pulses: u64) -> Result<Vec<f64>> {
    if n_pulses == 0 {
        return Err(Error::Data("number of pulses must be at least 1".into()));
    }
    if let Some((j, c)) = bin_counts.iter().enumerate().find(|(_, &c)| c > n_pulses) {
        return Err(Error::Data(format!(
            "bin {} has {c} clicks but only {n_pulses} pulses were sent",
            j + 1
        )));
    }
    let n = n_pulses as f64;
    Ok(bin_counts.iter().map(|&c| c as f64 / n).collect())
}

/// Probability of `n` occupied bins from the per-bin click probabilities.
pub fn outcome_probabilities(p: &[f64]) -> Result<OutcomeDistribution> {
    let probs = poisson_binomial::distribution(p)?;
    OutcomeDistribution::new(probs)
}

/// Outcome probabilities `P[d, n]` for every probe, plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeMatrix {
    values: DMatrix<f64>,
    n_pulses: Vec<u64>,
    labels: Vec<u32>,
}

impl OutcomeMatrix {
    pub fn new(values: DMatrix<f64>, n_pulses: Vec<u64>, labels: Vec<u32>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Config("outcome matrix has no rows".into()));
        }
        if n_pulses.len() != values.nrows() || labels.len() != values.nrows() {
            return Err(Error::Dimension(format!(
                "outcome matrix has {} rows but {} pulse counts and {} labels",
                values.nrows(),
                n_pulses.len(),
                labels.len()
            )));
        }
        for (d, row) in values.row_iter().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data(format!(
                    "outcome row {d} has entries outside [0, 1]"
                )));
            }
            let s = row.sum();
            if (s - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::Data(format!("outcome row {d} sums to {s}")));
            }
        }
        Ok(Self {
            values,
            n_pulses,
            labels,
        })
    }

    /// Stacks distributions in probe order; labels default to `0..D`.
    pub fn from_rows(rows: &[OutcomeDistribution], n_pulses: Vec<u64>) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Config("no outcome rows".into()))?;
        let n = first.n_outcomes();
        if rows.iter().any(|r| r.n_outcomes() != n) {
            return Err(Error::Dimension("outcome rows differ in length".into()));
        }
        let values = DMatrix::from_fn(rows.len(), n, |d, k| rows[d].probs()[k]);
        let labels = (0..rows.len() as u32).collect();
        Self::new(values, n_pulses, labels)
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.values.nrows() {
            return Err(Error::Dimension(
                "label count differs from row count".into(),
            ));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_pulses(&self) -> &[u64] {
        &self.n_pulses
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_probes(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_outcomes(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, d: usize) -> OutcomeDistribution {
        OutcomeDistribution::from_trusted(self.values.row(d).iter().copied().collect())
    }

    pub fn permute_rows(&self, order: &[usize]) -> Self {
        let v = &self.values;
        Self {
            values: DMatrix::from_fn(order.len(), v.ncols(), |r, c| v[(order[r], c)]),
            n_pulses: order.iter().map(|&k| self.n_pulses[k]).collect(),
            labels: order.iter().map(|&k| self.labels[k]).collect(),
        }
    }

    /// CSV with columns `label,n_pulses,n0,n1,...`, one row per probe.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["label".to_string(), "n_pulses".to_string()];
        header.extend((0..self.n_outcomes()).map(|n| format!("n{n}")));
        w.write_record(&header)?;
        for d in 0..self.n_probes() {
            let mut rec = vec![self.labels[d].to_string(), self.n_pulses[d].to_string()];
            rec.extend(self.values.row(d).iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let n_cols = r.headers()?.len();
        if n_cols < 3 {
            return Err(Error::Data(
                "outcome CSV needs label, n_pulses and outcome columns".into(),
            ));
        }
        let (mut labels, mut pulses, mut data) = (Vec::new(), Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            labels.push(parse_field(&rec, 0)?);
            pulses.push(parse_field(&rec, 1)?);
            for c in 2..n_cols {
                data.push(parse_field::<f64>(&rec, c)?);
            }
        }
        if labels.is_empty() {
            return Err(Error::Data("outcome CSV has no rows".into()));
        }
        let values = DMatrix::from_row_slice(labels.len(), n_cols - 2, &data);
        Self::new(values, pulses, labels)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// One measured (or simulated) probe run.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub histogram: TimeTagHistogram,
    pub n_pulses: u64,
}

/// Integrates, normalises and transforms every run, in order.
pub fn assemble_outcome_matrix(runs: &[Run], cfg: &BinningConfig) -> Result<OutcomeMatrix> {
    if runs.is_empty() {
        return Err(Error::Config("no runs to assemble".into()));
    }
    let rows = runs
        .par_iter()
        .map(|run| {
            let counts = integrate_histogram(&run.histogram, cfg)?;
            outcome_probabilities(&bin_probabilities(&counts, run.n_pulses)?)
        })
        .collect::<Result<Vec<_>>>()?;
    OutcomeMatrix::from_rows(&rows, runs.iter().map(|r| r.n_pulses).collect())
}

/// Entry of a run manifest. Histogram paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub label: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_photon: Option<f64>,
    pub histogram: PathBuf,
    pub n_pulses: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub binning: BinningConfig,
    pub runs: Vec<RunEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_seed: Option<u64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads every histogram and assembles the outcome matrix, labelled in
    /// manifest order. `base` is the directory holding the manifest.
    pub fn assemble(&self, base: &Path) -> Result<OutcomeMatrix> {
        let runs = self
            .runs
            .par_iter()
            .map(|e| {
                Ok(Run {
                    histogram: TimeTagHistogram::load(&base.join(&e.histogram))?,
                    n_pulses: e.n_pulses,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        assemble_outcome_matrix(&runs, &self.binning)?
            .with_labels(self.runs.iter().map(|e| e.label).collect())
    }
}

/// Options for turning per-bin click totals into a raw histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRender {
    pub bin_width_ps: f64,
    /// Dead time kept before the first and after the last window.
    pub margin_ns: f64,
    /// Gaussian timing jitter of the detector, ps.
    pub jitter_ps: f64,
    /// Events spread uniformly outside every window (reflections, stray
    /// light). They must be removed by integration.
    pub stray_counts: u64,
}

impl Default for HistogramRender {
    fn default() -> Self {
        Self {
            bin_width_ps: 10.0,
            margin_ns: 5.0,
            jitter_ps: 40.0,
            stray_counts: 0,
        }
    }
}

/// Builds a raw histogram whose window integrals equal `bin_counts` exactly.
pub fn render_histogram(
    bin_counts: &[u64],
    cfg: &BinningConfig,
    opts: &HistogramRender,
    seed: u64,
) -> Result<TimeTagHistogram> {
    if bin_counts.len() != cfg.n_detector_bins {
        return Err(Error::Config(format!(
            "{} bin totals for {} detector bins",
            bin_counts.len(),
            cfg.n_detector_bins
        )));
    }
    let (len, t0_ps) = cfg.layout(opts.bin_width_ps, opts.margin_ns);
    let mut hist = TimeTagHistogram {
        bin_width_ps: opts.bin_width_ps,
        t0_ps,
        counts: vec![0; len],
    };
    let windows = cfg.windows(&hist)?;
    let mut rng = rng::stream(seed, "histogram", 0);
    for (j, (range, &total)) in windows.iter().zip(bin_counts).enumerate() {
        let centre = t0_ps + cfg.centre_offset_ps(j);
        let weights: Vec<f64> = range
            .clone()
            .map(|k| {
                let t = (k as f64 + 0.5) * opts.bin_width_ps - centre;
                if opts.jitter_ps > 0.0 {
                    (-0.5 * (t / opts.jitter_ps).powi(2)).exp()
                } else if t.abs() <= opts.bin_width_ps / 2.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mut left = total;
        let mut mass: f64 = weights.iter().sum();
        if mass <= 0.0 {
            // Window narrower than one raw bin around the centre.
            hist.counts[range.start] += total;
            continue;
        }
        for (k, w) in range.clone().zip(&weights) {
            if left == 0 {
                break;
            }
            let p = (w / mass).clamp(0.0, 1.0);
            let draw = Binomial::new(left, p)
                .expect("valid binomial")
                .sample(&mut rng);
            hist.counts[k] += draw;
            left -= draw;
            mass -= w;
        }
        // Rounding can leave a remainder once the weights are used up.
        if left > 0 {
            hist.counts[range.end - 1] += left;
        }
    }
    let mut placed = 0;
    while placed < opts.stray_counts {
        let k = rng.random_range(0..len);
        if windows.iter().all(|r| !r.contains(&k)) {
            hist.counts[k] += 1;
            placed += 1;
        }
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector_model::{simulate_bin_clicks, LoopParams};

    fn blank(cfg: &BinningConfig) -> TimeTagHistogram {
        let (len, t0_ps) = cfg.layout(10.0, 5.0);
        TimeTagHistogram {
            bin_width_ps: 10.0,
            t0_ps,
            counts: vec![0; len],
        }
    }

    #[test]
    fn all_zero_histogram_integrates_to_zero() {
        let cfg = BinningConfig::new(10);
        assert_eq!(
            integrate_histogram(&blank(&cfg), &cfg).unwrap(),
            vec![0; 10]
        );
    }

    #[test]
    fn spike_lands_in_its_window_only() {
        let cfg = BinningConfig::new(10);
        let mut hist = blank(&cfg);
        let windows = cfg.windows(&hist).unwrap();
        assert!(windows.iter().all(|r| r.len() == 200));
        hist.counts[windows[2].start + 57] = 1234;
        // A reflection between windows must be ignored.
        hist.counts[windows[2].end + 300] = 99;
        let counts = integrate_histogram(&hist, &cfg).unwrap();
        for (j, c) in counts.iter().enumerate() {
            assert_eq!(*c, if j == 2 { 1234 } else { 0 });
        }
    }

    #[test]
    fn reference_layout_matches_time_tagger_scale() {
        // Nine 156 ns round trips plus margins at 10 ps, ~1.4e5 raw bins.
        let (len, _) = BinningConfig::new(10).layout(10.0, 5.0);
        assert!((140_000..160_000).contains(&len), "{len}");
    }

    #[test]
    fn windows_outside_span_or_overlapping_are_rejected() {
        let cfg = BinningConfig::new(10);
        let mut hist = blank(&cfg);
        hist.counts.truncate(hist.counts.len() / 2);
        assert!(matches!(
            integrate_histogram(&hist, &cfg),
            Err(Error::Config(_))
        ));

        let mut overlapping = BinningConfig::new(2);
        overlapping.window_offsets_ns = Some(vec![0.0, 1.0]);
        assert!(matches!(
            overlapping.windows(&blank(&overlapping)),
            Err(Error::Config(_))
        ));

        let mut wrong_len = BinningConfig::new(3);
        wrong_len.window_offsets_ns = Some(vec![0.0]);
        assert!(wrong_len.windows(&blank(&BinningConfig::new(3))).is_err());
    }

    #[test]
    fn explicit_offsets_move_windows() {
        let mut cfg = BinningConfig::new(2);
        cfg.window_offsets_ns = Some(vec![0.0, 100.0]);
        let hist = blank(&BinningConfig::new(2));
        let w = cfg.windows(&hist).unwrap();
        assert_eq!(w[1].start - w[0].start, 10_000);
    }

    #[test]
    fn bin_probability_examples() {
        assert_eq!(bin_probabilities(&[0, 0, 0], 17).unwrap(), vec![0.0; 3]);
        assert_eq!(bin_probabilities(&[225_000], 450_000).unwrap(), vec![0.5]);
        assert!(matches!(bin_probabilities(&[11], 10), Err(Error::Data(_))));
        assert!(bin_probabilities(&[0], 0).is_err());
    }

    #[test]
    fn outcome_probability_examples() {
        let d = outcome_probabilities(&[0.0; 10]).unwrap();
        assert_eq!(d.probs()[0], 1.0);
        let d = outcome_probabilities(&[0.5; 10]).unwrap();
        let mut c = 1.0;
        for k in 0..=10usize {
            let want = c / 1024.0;
            assert!((d.probs()[k] - want).abs() < 1e-14);
            c = c * (10 - k) as f64 / (k + 1) as f64;
        }
        let params = LoopParams::reference();
        let p = crate::detector_model::coherent_click_probs(&params, 400.0, 0.0).unwrap();
        let d = outcome_probabilities(&p).unwrap();
        for n in 0..=10 {
            assert!((d.probs()[n] - poisson_binomial::bruteforce(&p, n).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn simulator_round_trip_through_histogram_file() {
        let params = LoopParams::reference();
        let cfg = BinningConfig::new(10);
        let n = 450_000;
        let sim = simulate_bin_clicks(&params, 25.0, n, 21, 0.0).unwrap();
        let opts = HistogramRender {
            stray_counts: 500,
            ..HistogramRender::default()
        };
        let hist = render_histogram(&sim.bin_counts, &cfg, &opts, 21).unwrap();
        assert_eq!(
            hist.counts.iter().sum::<u64>(),
            sim.bin_counts.iter().sum::<u64>() + 500
        );

        let dir = tempfile::tempdir().unwrap();
        for name in ["h.csv", "h.json"] {
            let path = dir.path().join(name);
            hist.save(&path).unwrap();
            let back = TimeTagHistogram::load(&path).unwrap();
            assert_eq!(back, hist);
            let counts = integrate_histogram(&back, &cfg).unwrap();
            assert_eq!(counts, sim.bin_counts);
            assert_eq!(
                bin_probabilities(&counts, n).unwrap(),
                sim.bin_probabilities()
            );
        }
    }

    #[test]
    fn assemble_examples() {
        let cfg = BinningConfig::new(10);
        let vacuum = Run {
            histogram: blank(&cfg),
            n_pulses: 1000,
        };
        let m = assemble_outcome_matrix(std::slice::from_ref(&vacuum), &cfg).unwrap();
        assert_eq!(m.values().shape(), (1, 11));
        assert_eq!(m.values()[(0, 0)], 1.0);
        assert!(matches!(
            assemble_outcome_matrix(&[], &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn manifest_assembly_of_simulated_reference_ensemble() {
        let params = LoopParams::reference();
        let cfg = BinningConfig::new(10);
        let dir = tempfile::tempdir().unwrap();
        let mut runs = Vec::new();
        for d in 0..71u32 {
            let mu = f64::from(d * d);
            let sim = simulate_bin_clicks(&params, mu, 20_000, u64::from(d), 0.0).unwrap();
            let hist = render_histogram(
                &sim.bin_counts,
                &cfg,
                &HistogramRender::default(),
                u64::from(d),
            )
            .unwrap();
            let name = PathBuf::from(format!("probe_{d:03}.csv"));
            hist.save(&dir.path().join(&name)).unwrap();
            runs.push(RunEntry {
                label: d,
                mean_photon: Some(mu),
                histogram: name,
                n_pulses: 20_000,
                seed: Some(u64::from(d)),
            });
        }
        let manifest = RunManifest {
            binning: cfg,
            runs,
            root_seed: Some(0),
        };
        manifest.save(&dir.path().join("manifest.json")).unwrap();
        let loaded = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
        let m = loaded.assemble(dir.path()).unwrap();
        assert_eq!(m.values().shape(), (71, 11));
        for row in m.values().row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-10);
        }
        assert_eq!(m.labels()[70], 70);

        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(OutcomeMatrix::read_csv(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn histogram_csv_rejects_garbage() {
        assert!(TimeTagHistogram::read_csv("foo,bar\n1,2\n3\n".as_bytes()).is_err());
        assert!(TimeTagHistogram::read_csv("bin_width_ps,t0_ps\n10,0\nx\n".as_bytes()).is_err());
        assert!(TimeTagHistogram::read_csv("bin_width_ps,t0_ps\n0,0\n1\n".as_bytes()).is_err());
    }
}

//! Diagonal POVM sets and their CSV representation.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Tolerance on `sum_n theta[i, n] = 1`.
pub const COMPLETENESS_TOL: f64 = 1e-8;

/// Diagonal POVM elements `theta[i, n] = p(n | i photons)`.
///
/// Rows are Fock indices `0..=M`, columns are outcomes `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct PovmSet {
    theta: DMatrix<f64>,
    /// Rows with enough probe support to be constrained by data. `None` means
    /// every row counts (model POVMs).
    supported: Option<Vec<bool>>,
}

impl PovmSet {
    /// Validates non-negativity, the `[0, 1]` range and completeness.
    pub fn new(theta: DMatrix<f64>) -> Result<Self> {
        let povm = Self {
            theta,
            supported: None,
        };
        povm.validate()?;
        Ok(povm)
    }

    pub(crate) fn from_trusted(theta: DMatrix<f64>) -> Self {
        Self {
            theta,
            supported: None,
        }
    }

    pub fn with_support(mut self, supported: Vec<bool>) -> Result<Self> {
        if supported.len() != self.theta.nrows() {
            return Err(Error::Dimension(format!(
                "support mask has {} rows, POVM has {}",
                supported.len(),
                self.theta.nrows()
            )));
        }
        self.supported = Some(supported);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.nrows() == 0 || self.theta.ncols() == 0 {
            return Err(Error::Data("POVM set is empty".into()));
        }
        for (i, row) in self.theta.row_iter().enumerate() {
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Data(format!(
                    "POVM row {i} has entry {v} outside [0, 1]"
                )));
            }
            let s = row.sum();
            if (s - 1.0).abs() > COMPLETENESS_TOL {
                return Err(Error::Data(format!("POVM row {i} sums to {s}, not 1")));
            }
        }
        Ok(())
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn into_theta(self) -> DMatrix<f64> {
        self.theta
    }

    /// `M`, the largest Fock index.
    pub fn truncation_dim(&self) -> usize {
        self.theta.nrows() - 1
    }

    /// `N`, the number of outcomes.
    pub fn n_outcomes(&self) -> usize {
        self.theta.ncols()
    }

    pub fn supported(&self) -> Option<&[bool]> {
        self.supported.as_deref()
    }

    /// Largest `|sum_n theta[i, n] - 1|` over all rows.
    pub fn completeness_error(&self) -> f64 {
        self.theta
            .row_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Mean outcome index for every Fock row.
    pub fn mean_outcome(&self) -> Vec<f64> {
        self.theta
            .row_iter()
            .map(|r| r.iter().enumerate().map(|(n, v)| n as f64 * v).sum())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(csv_header(self.n_outcomes()))?;
        write_csv_rows(&mut w, 0, &self.theta)?;
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads `i,n0,n1,...` rows. Fock indices must be contiguous from 0.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        Self::new(read_matrix_csv(input)?)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Reads any `i,n0,n1,...` matrix, such as an uncertainty bound, without
/// checking completeness.
pub fn read_matrix_csv<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_reader(input);
    let n_cols = r.headers()?.len();
    if n_cols < 2 {
        return Err(Error::Data(
            "POVM CSV needs an index column and at least one outcome".into(),
        ));
    }
    let mut data = Vec::new();
    let mut rows = 0usize;
    for rec in r.records() {
        let rec = rec?;
        let i: usize = parse_field(&rec, 0)?;
        if i != rows {
            return Err(Error::Data(format!(
                "POVM CSV row {rows} has Fock index {i}"
            )));
        }
        for c in 1..n_cols {
            data.push(parse_field::<f64>(&rec, c)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data("POVM CSV has no rows".into()));
    }
    Ok(DMatrix::from_row_slice(rows, n_cols - 1, &data))
}

pub fn load_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix_csv(std::io::BufReader::new(file))
}

/// Writes `m` in the POVM CSV layout.
pub fn save_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(csv_header(m.ncols()))?;
    write_csv_rows(&mut w, 0, m)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_header(n_outcomes: usize) -> Vec<String> {
    std::iter::once("i".to_string())
        .chain((0..n_outcomes).map(|n| format!("n{n}")))
        .collect()
}

/// Writes rows of `block` labelled with Fock indices starting at `first_row`.
pub(crate) fn write_csv_rows<W: Write>(
    w: &mut csv::Writer<W>,
    first_row: usize,
    block: &DMatrix<f64>,
) -> Result<()> {
    let mut rec = Vec::with_capacity(block.ncols() + 1);
    for (k, row) in block.row_iter().enumerate() {
        rec.clear();
        rec.push((first_row + k).to_string());
        rec.extend(row.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    Ok(())
}

pub(crate) fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize) -> Result<T> {
    let raw = rec
        .get(idx)
        .ok_or_else(|| Error::Data(format!("missing column {idx}")))?;
    raw.trim()
        .parse()
        .map_err(|_| Error::Data(format!("cannot parse {raw:?} in column {idx}")))
}

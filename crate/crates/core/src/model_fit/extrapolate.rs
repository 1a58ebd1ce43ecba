//! Model POVMs beyond the reconstructed range, in memory or streamed to
//! row-chunked CSV files.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::detector_model::{
    build_model_povm, fock_outcome_distribution, for_each_model_povm_chunk, LoopParams,
    DEFAULT_CHUNK_ROWS,
};
use crate::povm::{csv_header, write_csv_rows, PovmSet};
use crate::{Error, Result};

/// Largest dense POVM, in bytes, built in memory by default.
pub const DEFAULT_MEMORY_BUDGET: usize = 256 * 1024 * 1024;

fn with_outcomes(params: &LoopParams, n_outcomes: usize) -> Result<LoopParams> {
    if n_outcomes == 0 {
        return Err(Error::Config("at least one outcome is needed".into()));
    }
    if n_outcomes == 1 {
        return Err(Error::Config(
            "a single outcome is the trivial POVM; the loop model needs at least one bin".into(),
        ));
    }
    params.with_bins(n_outcomes - 1)
}

fn dense_bytes(n_outcomes: usize, truncation: usize) -> Option<usize> {
    truncation
        .checked_add(1)?
        .checked_mul(n_outcomes)?
        .checked_mul(size_of::<f64>())
}

/// Dense model POVM with `n_outcomes` outcomes on Fock rows `0..=truncation`
/// under [`DEFAULT_MEMORY_BUDGET`].
pub fn extrapolate_povm(
    params: &LoopParams,
    n_outcomes: usize,
    truncation: usize,
) -> Result<PovmSet> {
    extrapolate_povm_within(params, n_outcomes, truncation, DEFAULT_MEMORY_BUDGET)
}

pub fn extrapolate_povm_within(
    params: &LoopParams,
    n_outcomes: usize,
    truncation: usize,
    budget_bytes: usize,
) -> Result<PovmSet> {
    let p = with_outcomes(params, n_outcomes)?;
    match dense_bytes(n_outcomes, truncation) {
        Some(b) if b <= budget_bytes => {}
        _ => {
            return Err(Error::Resource(format!(
                "{} x {n_outcomes} POVM exceeds the memory budget of {budget_bytes} bytes; use chunked output",
                truncation as u128 + 1
            )))
        }
    }
    let povm = build_model_povm(&p, truncation);
    povm.validate()?;
    Ok(povm)
}

/// Streams the model POVM in row blocks that fit `budget_bytes`. Every block
/// is checked for completeness before it reaches `sink`.
pub fn extrapolate_chunked<F>(
    params: &LoopParams,
    n_outcomes: usize,
    truncation: usize,
    budget_bytes: usize,
    sink: F,
) -> Result<()>
where
    F: FnMut(usize, &DMatrix<f64>) -> Result<()>,
{
    let p = with_outcomes(params, n_outcomes)?;
    let row_bytes = n_outcomes * size_of::<f64>();
    if budget_bytes < row_bytes {
        return Err(Error::Resource(format!(
            "memory budget of {budget_bytes} bytes holds no {n_outcomes}-outcome row"
        )));
    }
    let chunk_rows = (budget_bytes / row_bytes).min(DEFAULT_CHUNK_ROWS);
    for_each_model_povm_chunk(&p, truncation, chunk_rows, sink)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkFile {
    pub first_row: usize,
    pub last_row: usize,
    pub file: String,
}

/// Index of an exported extrapolation, saved as `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationExport {
    pub params: LoopParams,
    pub n_outcomes: usize,
    pub truncation_dim: usize,
    /// Rows are split over several files.
    pub chunked: bool,
    pub files: Vec<ChunkFile>,
}

/// Writes the model POVM into `dir`: one `povm.csv` when it fits the
/// budget, else `povm_rows_<first>_<last>.csv` files in the same format.
pub fn export_extrapolation(
    dir: &Path,
    params: &LoopParams,
    n_outcomes: usize,
    truncation: usize,
    budget_bytes: usize,
) -> Result<ExtrapolationExport> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = with_outcomes(params, n_outcomes)?;
    let fits = dense_bytes(n_outcomes, truncation).is_some_and(|b| b <= budget_bytes);
    let mut files = Vec::new();
    if fits {
        let povm = extrapolate_povm_within(params, n_outcomes, truncation, budget_bytes)?;
        povm.save_csv(&dir.join("povm.csv"))?;
        files.push(ChunkFile {
            first_row: 0,
            last_row: truncation,
            file: "povm.csv".into(),
        });
    } else {
        extrapolate_chunked(
            params,
            n_outcomes,
            truncation,
            budget_bytes,
            |first, block| {
                let last = first + block.nrows() - 1;
                let name = format!("povm_rows_{first:08}_{last:08}.csv");
                let path = dir.join(&name);
                let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
                w.write_record(csv_header(n_outcomes))?;
                write_csv_rows(&mut w, first, block)?;
                w.flush().map_err(|e| Error::io(&path, e))?;
                files.push(ChunkFile {
                    first_row: first,
                    last_row: last,
                    file: name,
                });
                Ok(())
            },
        )?;
    }
    let index = ExtrapolationExport {
        params: p,
        n_outcomes,
        truncation_dim: truncation,
        chunked: !fits,
        files,
    };
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_string_pretty(&index)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// About `points` Fock indices spaced evenly in `log i` over `1..=truncation`,
/// without duplicates.
pub fn log_grid(truncation: usize, points: usize) -> Vec<usize> {
    if truncation == 0 || points == 0 {
        return Vec::new();
    }
    let top = (truncation as f64).ln();
    let steps = points.max(2) - 1;
    let mut out: Vec<usize> = (0..=steps)
        .map(|k| ((top * k as f64 / steps as f64).exp().round() as usize).clamp(1, truncation))
        .collect();
    out.dedup();
    out
}

/// One `i,theta,lo,hi` file per outcome for the given Fock indices. The
/// model has no uncertainty band, so `lo` and `hi` repeat `theta`.
pub fn write_extrapolated_series(
    dir: &Path,
    prefix: &str,
    params: &LoopParams,
    n_outcomes: usize,
    rows: &[usize],
) -> Result<Vec<PathBuf>> {
    let p = with_outcomes(params, n_outcomes)?;
    let dists: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| fock_outcome_distribution(&p, i as u64).into_vec())
        .collect();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(n_outcomes);
    for n in 0..n_outcomes {
        let path = dir.join(format!("{prefix}_n{n:02}.csv"));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        w.write_record(["i", "theta", "lo", "hi"])?;
        for (&i, d) in rows.iter().zip(&dists) {
            let v = format!("{:e}", d[n]);
            w.write_record([i.to_string(), v.clone(), v.clone(), v])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

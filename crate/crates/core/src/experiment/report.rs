use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::Mode;
use crate::error::{Error, Result};
use crate::util::{median, variance};

/// `(ret - min_return) / (expert_return - min_return)`.
pub fn normalized_return(ret: f64, min_return: f64, expert_return: f64) -> Result<f64> {
    let span = expert_return - min_return;
    if !(span > 0.0) || !span.is_finite() || !ret.is_finite() {
        return Err(Error::Config(format!(
            "degenerate normalisation: expert {expert_return}, min {min_return}, return {ret}"
        )));
    }
    Ok((ret - min_return) / span)
}

/// Per-seed outcomes of one (mode, delay, K1) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub env: String,
    pub mode: Mode,
    pub delay: String,
    pub k1: Option<usize>,
    pub seeds: Vec<u64>,
    pub final_returns: Vec<f64>,
    pub normalized: Vec<f64>,
    pub median_return: f64,
    pub variance_return: f64,
    pub median_normalized: f64,
    pub variance_normalized: f64,
    /// sha256 of each seed's curve file.
    pub curve_hashes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub config_hash: String,
    pub dataset_hash: Option<String>,
    pub checkpoint_hashes: BTreeMap<usize, String>,
    pub min_return: f64,
    pub expert_return: f64,
    pub records: Vec<RunRecord>,
}

/// One finished run as read back from its curve file.
#[derive(Debug, Clone)]
pub struct CurveSummary {
    pub mode: Mode,
    pub delay: String,
    pub k1: Option<usize>,
    pub seed: u64,
    pub final_return: f64,
    pub all_returns: Vec<f64>,
    pub curve_hash: String,
}

/// Aggregates runs into per-cell median and variance of raw and normalised
/// final returns. `min_return` is the worst return seen anywhere in `runs`.
pub fn aggregate(
    name: &str,
    env: &str,
    config_hash: &str,
    runs: &[CurveSummary],
    expert_return: f64,
) -> Result<(f64, Vec<RunRecord>)> {
    let min_return = runs
        .iter()
        .flat_map(|r| r.all_returns.iter().copied().chain([r.final_return]))
        .fold(f64::INFINITY, f64::min);
    if !min_return.is_finite() {
        return Err(Error::State(format!("{name}: no returns to report")));
    }
    let mut cells: BTreeMap<(Mode, String, Option<usize>), Vec<&CurveSummary>> = BTreeMap::new();
    for r in runs {
        cells
            .entry((r.mode, r.delay.clone(), r.k1))
            .or_default()
            .push(r);
    }
    let mut records = Vec::with_capacity(cells.len());
    for ((mode, delay, k1), mut members) in cells {
        members.sort_by_key(|m| m.seed);
        let final_returns: Vec<f64> = members.iter().map(|m| m.final_return).collect();
        let normalized = final_returns
            .iter()
            .map(|r| normalized_return(*r, min_return, expert_return))
            .collect::<Result<Vec<_>>>()?;
        records.push(RunRecord {
            env: env.into(),
            mode,
            delay,
            k1,
            seeds: members.iter().map(|m| m.seed).collect(),
            median_return: median(&final_returns),
            variance_return: variance(&final_returns),
            median_normalized: median(&normalized),
            variance_normalized: variance(&normalized),
            final_returns,
            normalized,
            curve_hashes: members.iter().map(|m| m.curve_hash.clone()).collect(),
        });
    }
    let _ = config_hash;
    Ok((min_return, records))
}

pub fn records_csv(records: &[RunRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "env",
        "mode",
        "k1",
        "delay",
        "seeds",
        "median_return",
        "variance_return",
        "median_normalized",
        "variance_normalized",
    ])
    .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.env.clone(),
            r.mode.as_str().into(),
            r.k1.map(|k| k.to_string()).unwrap_or_default(),
            r.delay.clone(),
            r.seeds.len().to_string(),
            format!("{:.6}", r.median_return),
            format!("{:.6}", r.variance_return),
            format!("{:.6}", r.median_normalized),
            format!("{:.6}", r.variance_normalized),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Rows are encoder widths, columns delay settings; cells are DEER's
/// normalised `median±variance`.
pub fn k1_table_csv(records: &[RunRecord]) -> Result<Vec<u8>> {
    let deer: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.mode == Mode::Deer && r.k1.is_some())
        .collect();
    let mut delays: Vec<String> = Vec::new();
    for r in &deer {
        if !delays.contains(&r.delay) {
            delays.push(r.delay.clone());
        }
    }
    let mut widths: Vec<usize> = deer.iter().filter_map(|r| r.k1).collect();
    widths.sort_unstable();
    widths.dedup();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["k1".to_string()];
    header.extend(delays.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for k in widths {
        let mut row = vec![k.to_string()];
        for d in &delays {
            let cell = deer
                .iter()
                .find(|r| r.k1 == Some(k) && &r.delay == d)
                .map(|r| format!("{:.3}±{:.3}", r.median_normalized, r.variance_normalized))
                .unwrap_or_default();
            row.push(cell);
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

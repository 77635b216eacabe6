//! Learning-curve CSV: `episode_index,cumulative_reward,moving_average`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RlError;

/// Trailing-window size used for driving curves.
pub const DRIVING_WINDOW: usize = 200;
/// Trailing-window size used for selection curves.
pub const SELECTION_WINDOW: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode_index: usize,
    pub cumulative_reward: f64,
    pub moving_average: f64,
}

/// Mean of the last `min(window, i + 1)` values at every index `i`.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

pub fn curve_rows(rewards: &[f64], window: usize) -> Vec<CurveRow> {
    moving_average(rewards, window)
        .into_iter()
        .zip(rewards)
        .enumerate()
        .map(|(i, (m, &r))| CurveRow {
            episode_index: i,
            cumulative_reward: r,
            moving_average: m,
        })
        .collect()
}

fn csv_err(e: csv::Error) -> RlError {
    RlError::Setup(format!("learning curve: {e}"))
}

pub fn write_learning_curve(path: &Path, rewards: &[f64], window: usize) -> Result<(), RlError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in curve_rows(rewards, window) {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| RlError::Setup(format!("learning curve: {e}")))?;
    Ok(())
}

/// Reads a curve file, rejecting unexpected headers and empty files.
pub fn read_learning_curve(path: &Path) -> Result<Vec<CurveRow>, RlError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>()
        != ["episode_index", "cumulative_reward", "moving_average"]
    {
        return Err(RlError::Setup(format!(
            "unexpected learning-curve header {headers:?}"
        )));
    }
    let rows = r
        .deserialize()
        .collect::<Result<Vec<CurveRow>, _>>()
        .map_err(csv_err)?;
    if rows.is_empty() {
        return Err(RlError::Setup("learning curve has no rows".into()));
    }
    Ok(rows)
}

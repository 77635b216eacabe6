//! Success rates, box-plot summaries and the Mann-Whitney U test.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EpisodeRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("{0} contains a non-finite value")]
    NonFinite(&'static str),
}

/// Largest pooled size for which the exact null distribution is enumerated.
pub const EXACT_MAX_TOTAL: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Number of (x, y) pairs with x > y, ties counting one half.
    pub u_x: f64,
    pub u_y: f64,
    /// Two-sided p-value in (0, 1].
    pub p_value: f64,
    pub exact: bool,
}

fn check(sample: &[f64], name: &'static str) -> Result<(), StatsError> {
    if sample.is_empty() {
        return Err(StatsError::Empty(name));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite(name));
    }
    Ok(())
}

/// Midranks (1-based) of `values` and the tie-group sizes.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = rank;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

fn standard_normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Two-sided Mann-Whitney U test. Exact enumeration of the permutation
/// distribution when `x.len() + y.len() <= 12`, otherwise the normal
/// approximation with tie-corrected variance and continuity correction.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitney, StatsError> {
    check(x, "first sample")?;
    check(y, "second sample")?;
    let (n, m) = (x.len(), y.len());
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let nm = (n * m) as f64;
    let rank_sum = |members: &[usize]| members.iter().map(|&k| ranks[k]).sum::<f64>();
    let offset = (n * (n + 1)) as f64 / 2.0;
    let u_x = rank_sum(&(0..n).collect::<Vec<_>>()) - offset;
    let u_y = nm - u_x;
    let centre = nm / 2.0;
    let observed = (u_x - centre).abs();

    let (p, exact) = if n + m <= EXACT_MAX_TOTAL {
        // Every way of choosing which pooled ranks belong to the first sample.
        let total = n + m;
        let tol = 1e-9;
        let mut extreme = 0u64;
        let mut count = 0u64;
        let mut chosen = Vec::with_capacity(n);
        enumerate(total, n, 0, &mut chosen, &mut |c| {
            count += 1;
            if (rank_sum(c) - offset - centre).abs() >= observed - tol {
                extreme += 1;
            }
        });
        (extreme as f64 / count as f64, true)
    } else {
        let big_n = (n + m) as f64;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
        let var = nm / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
        if var <= 0.0 {
            (1.0, false)
        } else {
            let z = ((observed - 0.5).max(0.0)) / var.sqrt();
            (2.0 * standard_normal_sf(z), false)
        }
    };
    Ok(MannWhitney {
        u_x,
        u_y,
        p_value: p.clamp(f64::MIN_POSITIVE, 1.0),
        exact,
    })
}

fn enumerate(
    total: usize,
    k: usize,
    start: usize,
    chosen: &mut Vec<usize>,
    visit: &mut dyn FnMut(&[usize]),
) {
    if chosen.len() == k {
        visit(chosen);
        return;
    }
    for i in start..total {
        if total - i < k - chosen.len() {
            break;
        }
        chosen.push(i);
        enumerate(total, k, i + 1, chosen, visit);
        chosen.pop();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Quantile by linear interpolation between order statistics of `sorted`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(sample: &[f64]) -> Result<SampleSummary, StatsError> {
    check(sample, "sample")?;
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(SampleSummary {
        count: s.len(),
        mean: s.iter().sum::<f64>() / s.len() as f64,
        median: quantile_sorted(&s, 0.5),
        q1: quantile_sorted(&s, 0.25),
        q3: quantile_sorted(&s, 0.75),
        min: s[0],
        max: s[s.len() - 1],
    })
}

pub fn success_rate(records: &[EpisodeRecord]) -> Result<f64, StatsError> {
    if records.is_empty() {
        return Err(StatsError::Empty("episode list"));
    }
    Ok(records.iter().filter(|r| r.success).count() as f64 / records.len() as f64)
}

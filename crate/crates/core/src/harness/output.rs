//! Persisted experiment outputs and the aggregate report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env;
use crate::sim::{SimParams, WorldState};
use crate::stats::{self, mann_whitney_u, SampleSummary};

use super::{EpisodeResult, HarnessError};

/// One line of `episodes.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode_index: usize,
    pub seed: u64,
    pub controller: String,
    pub success: bool,
    pub n_star: Option<usize>,
    pub path_length: f64,
    #[serde(rename = "D")]
    pub diffusion: f64,
    #[serde(rename = "lambda")]
    pub repulsion_range: f64,
    #[serde(rename = "kT")]
    pub repulsion_gain: f64,
}

impl From<&EpisodeResult> for EpisodeRow {
    fn from(r: &EpisodeResult) -> Self {
        Self {
            episode_index: r.episode_index,
            seed: r.seed,
            controller: r.controller.name().to_string(),
            success: r.record.success,
            n_star: r.record.settling_time,
            path_length: r.record.path_length,
            diffusion: r.params.diffusion,
            repulsion_range: r.params.repulsion_range,
            repulsion_gain: r.params.repulsion_gain,
        }
    }
}

/// Per-step target radius statistics and containment fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub mean_radius: f64,
    pub std_radius: f64,
    pub min_radius: f64,
    pub max_radius: f64,
    pub chi: f64,
}

impl TraceRow {
    pub fn from_state(state: &WorldState, params: &SimParams) -> Self {
        let radii: Vec<f64> = state.targets.iter().map(|t| t.norm()).collect();
        let n = radii.len() as f64;
        let mean = radii.iter().sum::<f64>() / n;
        let var = radii.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        Self {
            step: state.step_index,
            mean_radius: mean,
            std_radius: var.sqrt(),
            min_radius: radii.iter().copied().fold(f64::INFINITY, f64::min),
            max_radius: radii.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            chi: env::chi(state, params),
        }
    }
}

pub fn trace_rows(states: &[WorldState], params: &SimParams) -> Vec<TraceRow> {
    states
        .iter()
        .map(|s| TraceRow::from_state(s, params))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerReport {
    pub controller: String,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Over successful episodes only; absent when none succeeded.
    pub settling_time: Option<SampleSummary>,
    pub path_length: SampleSummary,
    /// Episodes whose parameters break `v_H > kT * lambda`.
    pub speed_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub first: String,
    pub second: String,
    pub u_first: f64,
    pub p_value: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub controllers: Vec<ControllerReport>,
    pub comparisons: Vec<Comparison>,
}

/// Aggregates rows per controller (in order of first appearance) and runs
/// pairwise rank tests on settling time and path length. Depends only on
/// `rows`, so it can be recomputed from `episodes.csv`.
pub fn build_report(rows: &[EpisodeRow], herder_max_speed: f64) -> Result<Report, HarnessError> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&EpisodeRow>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(&r.controller) {
            order.push(r.controller.clone());
        }
        groups.entry(r.controller.clone()).or_default().push(r);
    }
    let mut sorted: BTreeMap<&str, Vec<&EpisodeRow>> = BTreeMap::new();
    for (k, mut v) in groups.iter().map(|(k, v)| (k.as_str(), v.clone())) {
        v.sort_by_key(|r| r.episode_index);
        sorted.insert(k, v);
    }
    let settling = |name: &str| -> Vec<f64> {
        sorted[name]
            .iter()
            .filter_map(|r| r.n_star.map(|n| n as f64))
            .collect()
    };
    let paths = |name: &str| -> Vec<f64> { sorted[name].iter().map(|r| r.path_length).collect() };

    let mut controllers = Vec::new();
    for name in &order {
        let g = &sorted[name.as_str()];
        let successes = g.iter().filter(|r| r.success).count();
        let st = settling(name);
        controllers.push(ControllerReport {
            controller: name.clone(),
            episodes: g.len(),
            successes,
            success_rate: successes as f64 / g.len() as f64,
            settling_time: if st.is_empty() {
                None
            } else {
                Some(stats::summarize(&st)?)
            },
            path_length: stats::summarize(&paths(name))?,
            speed_violations: g
                .iter()
                .filter(|r| herder_max_speed <= r.repulsion_gain * r.repulsion_range)
                .count(),
        });
    }
    let mut comparisons = Vec::new();
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            let (a, b) = (order[i].as_str(), order[j].as_str());
            for (metric, xa, xb) in [
                ("settling_time", settling(a), settling(b)),
                ("path_length", paths(a), paths(b)),
            ] {
                if xa.is_empty() || xb.is_empty() {
                    continue;
                }
                let t = mann_whitney_u(&xa, &xb)?;
                comparisons.push(Comparison {
                    metric: metric.into(),
                    first: a.into(),
                    second: b.into(),
                    u_first: t.u_x,
                    p_value: t.p_value,
                    exact: t.exact,
                });
            }
        }
    }
    Ok(Report {
        controllers,
        comparisons,
    })
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let fmt = |m: &SampleSummary| {
            format!(
                "median {:.3} (q1 {:.3}, q3 {:.3}, min {:.3}, max {:.3}, mean {:.3}, n {})",
                m.median, m.q1, m.q3, m.min, m.max, m.mean, m.count
            )
        };
        for c in &self.controllers {
            let _ = writeln!(s, "[{}]", c.controller);
            let _ = writeln!(
                s,
                "success rate   {:.4} ({}/{})",
                c.success_rate, c.successes, c.episodes
            );
            match &c.settling_time {
                Some(m) => {
                    let _ = writeln!(s, "settling time  {}", fmt(m));
                }
                None => {
                    let _ = writeln!(s, "settling time  none (no successful episode)");
                }
            }
            let _ = writeln!(s, "path length    {}", fmt(&c.path_length));
            if c.speed_violations > 0 {
                let _ = writeln!(s, "episodes with v_H <= kT*lambda: {}", c.speed_violations);
            }
            s.push('\n');
        }
        for t in &self.comparisons {
            let _ = writeln!(
                s,
                "Mann-Whitney {} {} vs {}: U = {:.1}, p = {:.3e}{}",
                t.metric,
                t.first,
                t.second,
                t.u_first,
                t.p_value,
                if t.exact { " (exact)" } else { "" }
            );
        }
        s
    }
}

pub fn write_episode_rows(path: &Path, rows: &[EpisodeRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_episode_rows(path: &Path) -> Result<Vec<EpisodeRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<EpisodeRow>, _>>()?)
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn write_report(dir: &Path, report: &Report) -> Result<(), HarnessError> {
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report)? + "\n",
    )?;
    std::fs::write(dir.join("report.txt"), report.to_text())?;
    Ok(())
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrajectoryRow {
    step: usize,
    agent: &'static str,
    index: usize,
    x: f64,
    y: f64,
}

/// Long-format snapshots: `step,agent,index,x,y` with agent `herder` or `target`.
pub fn write_trajectory(path: &Path, snapshots: &[WorldState]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for s in snapshots {
        for (agent, points) in [("herder", &s.herders), ("target", &s.targets)] {
            for (index, p) in points.iter().enumerate() {
                w.serialize(TrajectoryRow {
                    step: s.step_index,
                    agent,
                    index,
                    x: p.x,
                    y: p.y,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Vec2;

    fn row(controller: &str, i: usize, n_star: Option<usize>, path: f64) -> EpisodeRow {
        EpisodeRow {
            episode_index: i,
            seed: i as u64,
            controller: controller.into(),
            success: n_star.is_some(),
            n_star,
            path_length: path,
            diffusion: 0.5,
            repulsion_range: 2.5,
            repulsion_gain: 3.0,
        }
    }

    #[test]
    fn report_aggregates_per_controller() {
        let mut rows = Vec::new();
        for i in 0..20 {
            rows.push(row("heuristic", i, Some(100 + i), 50.0 + i as f64));
            rows.push(row(
                "learned",
                i,
                if i % 4 == 0 { None } else { Some(300 + i) },
                90.0 + i as f64,
            ));
        }
        let rep = build_report(&rows, 8.0).unwrap();
        assert_eq!(rep.controllers[0].controller, "heuristic");
        assert_eq!(rep.controllers[0].success_rate, 1.0);
        assert_eq!(rep.controllers[1].successes, 15);
        assert_eq!(rep.comparisons.len(), 2);
        assert!(rep.comparisons.iter().all(|c| c.p_value < 1e-3));
        assert_eq!(rep.controllers[0].speed_violations, 0);
        assert!(rep.to_text().contains("success rate   1.0000 (20/20)"));
    }

    #[test]
    fn episode_csv_roundtrip_and_empty_n_star() {
        let dir = std::env::temp_dir().join(format!("episodes-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("episodes.csv");
        let rows = vec![
            row("heuristic", 0, Some(12), 3.5),
            row("heuristic", 1, None, 4.25),
        ];
        write_episode_rows(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "episode_index,seed,controller,success,n_star,path_length,D,lambda,kT"
        );
        assert_eq!(
            lines.nth(1).unwrap(),
            "1,1,heuristic,false,,4.25,0.5,2.5,3.0"
        );
        assert_eq!(read_episode_rows(&path).unwrap(), rows);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn trace_row_statistics() {
        let s = WorldState {
            herders: vec![Vec2::ZERO],
            targets: vec![Vec2::new(3.0, 4.0), Vec2::new(0.0, 7.0)],
            step_index: 9,
        };
        let t = TraceRow::from_state(&s, &SimParams::nominal(1, 2));
        assert_eq!(
            (
                t.step,
                t.mean_radius,
                t.std_radius,
                t.min_radius,
                t.max_radius,
                t.chi
            ),
            (9, 6.0, 1.0, 5.0, 7.0, 0.5)
        );
    }
}

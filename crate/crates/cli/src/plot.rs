//! SVG figures from the CSV outputs. All inputs are read and checked before
//! any file is written, so a bad input leaves the output directory untouched.

use std::collections::BTreeMap;
use std::error::Error;
use std::path::{Path, PathBuf};

use plotters::coord::Shift;
use plotters::prelude::*;
use serde::Deserialize;
use shepherd_core::harness::{read_episode_rows, EpisodeRow, TraceRow};
use shepherd_core::rl::{self, DRIVING_WINDOW, SELECTION_WINDOW};
use shepherd_core::stats::{self, SampleSummary};
use shepherd_core::SimParams;

use crate::CliError;

type DrawResult = Result<(), Box<dyn Error>>;
type Area<'a> = DrawingArea<SVGBackend<'a>, Shift>;

const PALETTE: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
];
const HERDER: RGBColor = RGBColor(200, 30, 30);
const TARGET: RGBColor = RGBColor(30, 80, 200);
const GOAL: RGBColor = RGBColor(60, 170, 60);

#[derive(Debug, Deserialize)]
struct TrajectoryRow {
    step: usize,
    agent: String,
    index: usize,
    x: f64,
    y: f64,
}

#[derive(Debug, Default)]
struct Frame {
    herders: Vec<(f64, f64)>,
    targets: Vec<(f64, f64)>,
}

enum Figure {
    Curve {
        stem: String,
        rewards: Vec<f64>,
        window: usize,
    },
    Boxes {
        rows: Vec<EpisodeRow>,
    },
    Trajectory {
        stem: String,
        frames: BTreeMap<usize, Frame>,
    },
    Radius {
        stem: String,
        rows: Vec<TraceRow>,
    },
}

impl Figure {
    fn file_name(&self) -> String {
        match self {
            Figure::Curve { stem, .. }
            | Figure::Trajectory { stem, .. }
            | Figure::Radius { stem, .. } => {
                format!("{stem}.svg")
            }
            Figure::Boxes { .. } => "boxplots.svg".into(),
        }
    }
}

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn nonempty<T>(path: &Path, rows: Vec<T>) -> Result<Vec<T>, CliError> {
    if rows.is_empty() {
        Err(input_err(path, "no data rows"))
    } else {
        Ok(rows)
    }
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| input_err(path, e))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| input_err(path, e))?;
    nonempty(path, rows)
}

fn read_trajectory(path: &Path) -> Result<BTreeMap<usize, Frame>, CliError> {
    let mut frames: BTreeMap<usize, Frame> = BTreeMap::new();
    for row in read_rows::<TrajectoryRow>(path)? {
        let f = frames.entry(row.step).or_default();
        let list = match row.agent.as_str() {
            "herder" => &mut f.herders,
            "target" => &mut f.targets,
            other => return Err(input_err(path, format!("unknown agent kind `{other}`"))),
        };
        if list.len() != row.index {
            return Err(input_err(
                path,
                format!(
                    "step {}: {} index {} out of order",
                    row.step, row.agent, row.index
                ),
            ));
        }
        list.push((row.x, row.y));
    }
    Ok(frames)
}

/// Recognized inputs, keyed by file name.
fn classify(path: &Path) -> Result<Option<Figure>, CliError> {
    let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
        return Ok(None);
    };
    let Some(stem) = name.strip_suffix(".csv") else {
        return Ok(None);
    };
    let curve = |window: usize| -> Result<Option<Figure>, CliError> {
        let rows = nonempty(
            path,
            rl::read_learning_curve(path).map_err(|e| input_err(path, e))?,
        )?;
        Ok(Some(Figure::Curve {
            stem: stem.to_string(),
            rewards: rows.iter().map(|r| r.cumulative_reward).collect(),
            window,
        }))
    };
    match stem {
        "driving_curve" => curve(DRIVING_WINDOW),
        "selection_curve" => curve(SELECTION_WINDOW),
        "episodes" => {
            let rows = nonempty(
                path,
                read_episode_rows(path).map_err(|e| input_err(path, e))?,
            )?;
            Ok(Some(Figure::Boxes { rows }))
        }
        s if s.starts_with("trajectory_") || s == "scale_trajectory" => {
            Ok(Some(Figure::Trajectory {
                stem: s.to_string(),
                frames: read_trajectory(path)?,
            }))
        }
        s if s.starts_with("trace_") || s == "scale_trace" => Ok(Some(Figure::Radius {
            stem: format!("{s}_radius"),
            rows: read_rows(path)?,
        })),
        _ => Ok(None),
    }
}

/// Renders every recognized CSV in `input` to an SVG in `out` and returns the
/// written paths.
pub fn emit_plots(input: &Path, out: &Path, sim: &SimParams) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(input).map_err(|e| input_err(input, e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    let mut figures = Vec::new();
    for p in &paths {
        if let Some(f) = classify(p)? {
            figures.push(f);
        }
    }
    if figures.is_empty() {
        return Err(input_err(input, "no result CSV files to plot"));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(e.into()))?;
    let mut written = Vec::new();
    for fig in &figures {
        let path = out.join(fig.file_name());
        let result = match fig {
            Figure::Curve {
                stem,
                rewards,
                window,
            } => render(&path, (900, 500), |a| curve(a, stem, rewards, *window)),
            Figure::Boxes { rows } => render(&path, (1000, 450), |a| boxes(a, rows)),
            Figure::Trajectory { stem, frames } => {
                render(&path, (900, 900), |a| trajectory(a, stem, frames, sim))
            }
            Figure::Radius { stem, rows } => {
                render(&path, (900, 500), |a| radius(a, stem, rows, sim))
            }
        };
        if let Err(e) = result {
            let _ = std::fs::remove_file(&path);
            return Err(CliError::Runtime(anyhow::anyhow!(
                "drawing {}: {e}",
                path.display()
            )));
        }
        written.push(path);
    }
    Ok(written)
}

fn render(path: &Path, size: (u32, u32), draw: impl FnOnce(&Area) -> DrawResult) -> DrawResult {
    let root = SVGBackend::new(path, size).into_drawing_area();
    root.fill(&WHITE)?;
    draw(&root)?;
    root.present()?;
    Ok(())
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
        (l.min(v), h.max(v))
    });
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

fn curve(area: &Area, stem: &str, rewards: &[f64], window: usize) -> DrawResult {
    let smooth = rl::moving_average(rewards, window);
    let (lo, hi) = bounds(rewards.iter().copied());
    let mut chart = ChartBuilder::on(area)
        .caption(
            format!("{stem} (moving average over {window} episodes)"),
            ("sans-serif", 20),
        )
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..rewards.len().max(2) as f64, lo..hi)?;
    chart
        .configure_mesh()
        .x_desc("episode")
        .y_desc("cumulative reward")
        .draw()?;
    chart
        .draw_series(LineSeries::new(
            rewards.iter().enumerate().map(|(i, &r)| (i as f64, r)),
            PALETTE[0].mix(0.25),
        ))?
        .label("episode reward")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], PALETTE[0].mix(0.25)));
    chart
        .draw_series(LineSeries::new(
            smooth.iter().enumerate().map(|(i, &r)| (i as f64, r)),
            PALETTE[0].stroke_width(2),
        ))?
        .label("moving average")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], PALETTE[0].stroke_width(2)));
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()?;
    Ok(())
}

fn box_panel(area: &Area, title: &str, groups: &[(String, Option<SampleSummary>)]) -> DrawResult {
    let present: Vec<&SampleSummary> = groups.iter().filter_map(|(_, s)| s.as_ref()).collect();
    let (lo, hi) = bounds(present.iter().flat_map(|s| [s.min, s.max]));
    let names: Vec<String> = groups.iter().map(|(n, _)| n.clone()).collect();
    let label = move |x: &f64| -> String {
        let i = x.round();
        if (x - i).abs() < 1e-9 && i >= 0.0 {
            names.get(i as usize).cloned().unwrap_or_default()
        } else {
            String::new()
        }
    };
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(-0.5f64..groups.len() as f64 - 0.5, lo..hi)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups.len() * 2 + 1)
        .x_label_formatter(&label)
        .draw()?;
    for (i, (_, summary)) in groups.iter().enumerate() {
        let Some(s) = summary else { continue };
        let c = PALETTE[i % PALETTE.len()];
        let x = i as f64;
        chart.draw_series([
            Rectangle::new([(x - 0.25, s.q1), (x + 0.25, s.q3)], c.mix(0.3).filled()),
            Rectangle::new([(x - 0.25, s.q1), (x + 0.25, s.q3)], c.stroke_width(1)),
        ])?;
        chart.draw_series([
            PathElement::new(
                vec![(x - 0.25, s.median), (x + 0.25, s.median)],
                c.stroke_width(3),
            ),
            PathElement::new(vec![(x, s.q3), (x, s.max)], c.stroke_width(1)),
            PathElement::new(vec![(x, s.q1), (x, s.min)], c.stroke_width(1)),
            PathElement::new(
                vec![(x - 0.12, s.max), (x + 0.12, s.max)],
                c.stroke_width(1),
            ),
            PathElement::new(
                vec![(x - 0.12, s.min), (x + 0.12, s.min)],
                c.stroke_width(1),
            ),
        ])?;
    }
    Ok(())
}

fn boxes(area: &Area, rows: &[EpisodeRow]) -> DrawResult {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.controller) {
            order.push(r.controller.clone());
        }
    }
    let of =
        |name: &str| -> Vec<&EpisodeRow> { rows.iter().filter(|r| r.controller == name).collect() };
    let summary = |v: Vec<f64>| {
        if v.is_empty() {
            None
        } else {
            stats::summarize(&v).ok()
        }
    };
    let settling: Vec<(String, Option<SampleSummary>)> = order
        .iter()
        .map(|n| {
            let group = of(n);
            let ok = group.iter().filter(|r| r.success).count();
            let total = group.len();
            let label = format!("{n} ({ok}/{total})");
            (
                label,
                summary(
                    group
                        .iter()
                        .filter_map(|r| r.n_star.map(|s| s as f64))
                        .collect(),
                ),
            )
        })
        .collect();
    let paths: Vec<(String, Option<SampleSummary>)> = order
        .iter()
        .map(|n| {
            (
                n.clone(),
                summary(of(n).iter().map(|r| r.path_length).collect()),
            )
        })
        .collect();
    let panels = area.split_evenly((1, 2));
    box_panel(
        &panels[0],
        "settling time n* (successful episodes)",
        &settling,
    )?;
    box_panel(&panels[1], "herder path length", &paths)?;
    Ok(())
}

fn circle(radius: f64) -> Vec<(f64, f64)> {
    (0..=180)
        .map(|k| {
            let a = k as f64 / 180.0 * std::f64::consts::TAU;
            (radius * a.cos(), radius * a.sin())
        })
        .collect()
}

fn trajectory(
    area: &Area,
    stem: &str,
    frames: &BTreeMap<usize, Frame>,
    sim: &SimParams,
) -> DrawResult {
    let steps: Vec<usize> = frames.keys().copied().collect();
    let picks: Vec<usize> = {
        let mut p: Vec<usize> = (0..4).map(|k| steps[k * (steps.len() - 1) / 3]).collect();
        p.dedup();
        p
    };
    let title_area = area.titled(stem, ("sans-serif", 22))?;
    let panels = title_area.split_evenly((2, 2));
    let r = sim.arena_half_width;
    for (panel, step) in panels.iter().zip(&picks) {
        let f = &frames[step];
        let mut chart = ChartBuilder::on(panel)
            .caption(format!("step {step}"), ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(25)
            .y_label_area_size(35)
            .build_cartesian_2d(-r..r, -r..r)?;
        chart.configure_mesh().disable_mesh().draw()?;
        chart.draw_series([Polygon::new(
            circle(sim.goal_radius),
            GOAL.mix(0.25).filled(),
        )])?;
        chart.draw_series([
            PathElement::new(circle(sim.goal_radius), GOAL.stroke_width(2)),
            PathElement::new(
                circle(sim.buffered_goal_radius()),
                GOAL.mix(0.6).stroke_width(1),
            ),
        ])?;
        chart.draw_series(
            f.targets
                .iter()
                .map(|&p| Circle::new(p, 3, TARGET.filled())),
        )?;
        chart.draw_series(f.herders.iter().map(|&p| {
            EmptyElement::at(p)
                + Polygon::new(vec![(0, -6), (6, 0), (0, 6), (-6, 0)], HERDER.filled())
        }))?;
    }
    Ok(())
}

fn radius(area: &Area, stem: &str, rows: &[TraceRow], sim: &SimParams) -> DrawResult {
    let last = rows.last().map(|r| r.step).unwrap_or(1).max(1) as f64;
    let (_, hi) = bounds(
        rows.iter()
            .map(|r| r.max_radius)
            .chain([sim.buffered_goal_radius()]),
    );
    let mut chart = ChartBuilder::on(area)
        .caption(stem, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..last, 0f64..hi)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("target distance from goal")
        .draw()?;
    let c = PALETTE[0];
    type Series<'a> = (&'a str, fn(&TraceRow) -> f64, ShapeStyle);
    let series: [Series; 3] = [
        ("mean", |r| r.mean_radius, c.stroke_width(2)),
        ("min", |r| r.min_radius, c.mix(0.4).stroke_width(1)),
        ("max", |r| r.max_radius, c.mix(0.4).stroke_width(1)),
    ];
    for (name, get, style) in series {
        chart
            .draw_series(LineSeries::new(
                rows.iter().map(|r| (r.step as f64, get(r))),
                style,
            ))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], style));
    }
    for (name, level, style) in [
        ("goal radius", sim.goal_radius, GOAL.stroke_width(2)),
        (
            "buffered goal",
            sim.buffered_goal_radius(),
            GOAL.mix(0.6).stroke_width(1),
        ),
    ] {
        chart
            .draw_series(LineSeries::new([(0.0, level), (last, level)], style))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], style));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()?;
    Ok(())
}

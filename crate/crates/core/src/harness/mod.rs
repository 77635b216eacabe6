//! Seeded experiment batches: validation, robustness sweeps and the
//! large-population demonstration, plus their CSV and JSON outputs.

mod output;

pub use output::{
    build_report, read_episode_rows, trace_rows, write_episode_rows, write_report, write_trace,
    write_trajectory, Comparison, ControllerReport, EpisodeRow, Report, TraceRow,
};

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, streams, Controller, EpisodeConfig, EpisodeRecord, RewardGains};
use crate::heuristic::{HeuristicController, HeuristicParams};
use crate::hierarchy::{HierarchicalController, HierarchyError, SensingConfig};
use crate::nn::{self, MlpParams, NnError};
use crate::rl::LearnedDriver;
use crate::sim::{RngStream, SimError, SimParams, WorldState};
use crate::stats::StatsError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: NnError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Heuristic,
    Learned,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Heuristic => "heuristic",
            ControllerKind::Learned => "learned",
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Gaussian perturbation of `D`, `lambda` and `kT` around their nominal values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Perturbation {
    pub enabled: bool,
    /// Standard deviation as a fraction of the nominal value.
    pub std_fraction: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            enabled: false,
            std_fraction: 0.3,
        }
    }
}

impl Perturbation {
    /// Parameters for one episode. Draws come from the episode's perturbation
    /// sub-stream in the order `D`, `lambda`, `kT`; non-positive draws are redrawn.
    pub fn apply(&self, nominal: &SimParams, episode_seed: u64) -> SimParams {
        if !self.enabled {
            return *nominal;
        }
        let mut rng = RngStream::with_stream(episode_seed, streams::PERTURBATION);
        let mut draw = |centre: f64| {
            if centre <= 0.0 {
                return centre;
            }
            loop {
                let v = centre + self.std_fraction * centre * rng.standard_normal();
                if v > 0.0 {
                    return v;
                }
            }
        };
        let diffusion = draw(nominal.diffusion);
        let repulsion_range = draw(nominal.repulsion_range);
        let repulsion_gain = draw(nominal.repulsion_gain);
        SimParams {
            diffusion,
            repulsion_range,
            repulsion_gain,
            ..*nominal
        }
    }
}

/// Checkpoint files of the learned controllers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointPaths {
    pub driving: Option<PathBuf>,
    pub selection: Option<PathBuf>,
}

/// Population and sensing of the large-scale demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleConfig {
    pub num_herders: usize,
    pub num_targets: usize,
    pub sensing: SensingConfig,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self {
            num_herders: 10,
            num_targets: 100,
            sensing: SensingConfig {
                herders: 2,
                targets: 5,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Controllers to run on identical seeds, compared pairwise.
    pub controllers: Vec<ControllerKind>,
    pub episodes: usize,
    pub base_seed: u64,
    pub episode: EpisodeConfig,
    pub sim: SimParams,
    pub gains: RewardGains,
    pub heuristic: HeuristicParams,
    pub perturbation: Perturbation,
    pub checkpoints: CheckpointPaths,
    /// Steps a learned selection is held at evaluation time.
    pub selection_hold: usize,
    pub scale: ScaleConfig,
    /// Every how many steps a world snapshot is kept for trajectory output.
    pub trajectory_stride: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            controllers: vec![ControllerKind::Heuristic],
            episodes: 1000,
            base_seed: 0,
            episode: EpisodeConfig::driving(),
            sim: SimParams::nominal(1, 1),
            gains: RewardGains::default(),
            heuristic: HeuristicParams::default(),
            perturbation: Perturbation::default(),
            checkpoints: CheckpointPaths::default(),
            selection_hold: 1,
            scale: ScaleConfig::default(),
            trajectory_stride: 5,
        }
    }
}

impl ExperimentConfig {
    /// Single herder, single target validation protocol.
    pub fn drive_1v1() -> Self {
        Self::default()
    }

    /// Two herders, five targets validation protocol.
    pub fn select_2v5() -> Self {
        Self {
            episode: EpisodeConfig {
                action_hold: 1,
                ..EpisodeConfig::selection()
            },
            sim: SimParams::nominal(2, 5),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.episodes == 0 {
            return bad("episodes must be at least 1".into());
        }
        if self.controllers.is_empty() {
            return bad("at least one controller is required".into());
        }
        let p = &self.perturbation;
        if !(0.0..1.0).contains(&p.std_fraction) {
            return bad(format!(
                "perturbation.std_fraction must lie in [0, 1), got {}",
                p.std_fraction
            ));
        }
        if self.selection_hold == 0 || self.trajectory_stride == 0 {
            return bad("selection_hold and trajectory_stride must be at least 1".into());
        }
        self.sim.validate()?;
        self.episode
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.gains
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.heuristic.validate().map_err(HarnessError::Config)?;
        Ok(())
    }

    fn needs_learned(&self) -> bool {
        self.controllers.contains(&ControllerKind::Learned)
    }
}

/// Networks of the learned controller.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Policies {
    pub driver: Option<MlpParams>,
    pub selector: Option<MlpParams>,
}

fn load(path: &Option<PathBuf>, what: &str) -> Result<MlpParams, HarnessError> {
    let path = path.as_ref().ok_or_else(|| {
        HarnessError::Config(format!(
            "checkpoints.{what} is required for the learned controller"
        ))
    })?;
    if !path.is_file() {
        return Err(HarnessError::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    nn::load_checkpoint(path).map_err(|source| HarnessError::Checkpoint {
        path: path.clone(),
        source,
    })
}

impl Policies {
    /// Loads what the configured scenario needs. Fails before any episode runs.
    pub fn load(config: &ExperimentConfig, multi_agent: bool) -> Result<Self, HarnessError> {
        if !config.needs_learned() {
            return Ok(Self::default());
        }
        let driver = Some(load(&config.checkpoints.driving, "driving")?);
        let selector = if multi_agent {
            Some(load(&config.checkpoints.selection, "selection")?)
        } else {
            None
        };
        Ok(Self { driver, selector })
    }
}

fn build_controller(
    kind: ControllerKind,
    config: &ExperimentConfig,
    params: &SimParams,
    policies: &Policies,
    sensing: SensingConfig,
) -> Result<Box<dyn Controller>, HarnessError> {
    Ok(match kind {
        ControllerKind::Heuristic => Box::new(HeuristicController::new(config.heuristic)),
        ControllerKind::Learned => {
            let driver = policies.driver.clone().ok_or_else(|| {
                HarnessError::Config("learned controller needs a driving policy".into())
            })?;
            if params.num_herders == 1 && params.num_targets == 1 {
                Box::new(LearnedDriver { actor: driver })
            } else {
                let selector = policies.selector.clone().ok_or_else(|| {
                    HarnessError::Config("learned controller needs a selection policy".into())
                })?;
                Box::new(HierarchicalController::new(
                    selector,
                    driver,
                    sensing,
                    config.selection_hold,
                )?)
            }
        }
    })
}

/// One finished episode with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub controller: ControllerKind,
    pub episode_index: usize,
    pub seed: u64,
    pub params: SimParams,
    pub record: EpisodeRecord,
}

/// Records plus the snapshots of episode 0 per controller.
#[derive(Debug, Clone)]
pub struct ValidationOutput {
    pub results: Vec<EpisodeResult>,
    pub report: Report,
    /// `(controller, snapshots of episode 0 every trajectory_stride steps)`.
    pub trajectories: Vec<(ControllerKind, Vec<WorldState>)>,
    /// Per-step radius statistics of episode 0 per controller.
    pub traces: Vec<(ControllerKind, Vec<TraceRow>)>,
}

impl ValidationOutput {
    pub fn rows(&self) -> Vec<EpisodeRow> {
        self.results.iter().map(EpisodeRow::from).collect()
    }
}

struct Captured {
    snapshots: Vec<WorldState>,
    trace: Vec<TraceRow>,
}

fn run_one(
    controller: &mut dyn Controller,
    seed: u64,
    params: &SimParams,
    config: &ExperimentConfig,
    capture: bool,
) -> (EpisodeRecord, Option<Captured>) {
    let episode = config.episode.with_seed(seed);
    let stride = config.trajectory_stride;
    let mut snapshots = Vec::new();
    let mut trace = Vec::new();
    let mut observer = |s: &WorldState| {
        if capture {
            trace.push(TraceRow::from_state(s, params));
            if s.step_index.is_multiple_of(stride) {
                snapshots.push(s.clone());
            }
        }
    };
    let record = env::run_episode(controller, &episode, params, &config.gains, &mut observer);
    let captured = capture.then_some(Captured { snapshots, trace });
    (record, captured)
}

/// Runs every configured controller on episodes `base_seed + i`. Perturbed
/// parameters (when enabled) depend only on the episode seed, so every
/// controller sees the same initial conditions, noise and parameters.
pub fn run_validation(config: &ExperimentConfig) -> Result<ValidationOutput, HarnessError> {
    config.validate()?;
    let multi = config.sim.num_herders > 1 || config.sim.num_targets > 1;
    let policies = Policies::load(config, multi)?;
    run_validation_with(config, &policies)
}

/// As [`run_validation`] with already loaded networks.
pub fn run_validation_with(
    config: &ExperimentConfig,
    policies: &Policies,
) -> Result<ValidationOutput, HarnessError> {
    config.validate()?;
    let sensing = SensingConfig::full(&config.sim);
    // Build once up front so configuration problems surface before any episode.
    for &kind in &config.controllers {
        build_controller(kind, config, &config.sim, policies, sensing)?;
    }

    let mut results = Vec::new();
    let mut trajectories = Vec::new();
    let mut traces = Vec::new();
    for &kind in &config.controllers {
        let batch: Vec<(EpisodeResult, Option<Captured>)> = (0..config.episodes)
            .into_par_iter()
            .map(|i| {
                let seed = config.base_seed.wrapping_add(i as u64);
                let params = config.perturbation.apply(&config.sim, seed);
                if params.herder_max_speed <= params.target_escape_speed() {
                    log::warn!(
                        "episode {i}: perturbed kT*lambda = {:.3} reaches v_H = {}",
                        params.target_escape_speed(),
                        params.herder_max_speed
                    );
                }
                let mut controller = build_controller(kind, config, &params, policies, sensing)
                    .expect("checked above");
                let (record, captured) =
                    run_one(controller.as_mut(), seed, &params, config, i == 0);
                let result = EpisodeResult {
                    controller: kind,
                    episode_index: i,
                    seed,
                    params,
                    record,
                };
                (result, captured)
            })
            .collect();
        for (result, captured) in batch {
            if let Some(c) = captured {
                trajectories.push((kind, c.snapshots));
                traces.push((kind, c.trace));
            }
            results.push(result);
        }
    }
    let rows: Vec<EpisodeRow> = results.iter().map(EpisodeRow::from).collect();
    let report = build_report(&rows, config.sim.herder_max_speed)?;
    Ok(ValidationOutput {
        results,
        report,
        trajectories,
        traces,
    })
}

/// Validation with the perturbation switched on.
pub fn run_robustness(config: &ExperimentConfig) -> Result<ValidationOutput, HarnessError> {
    let mut config = config.clone();
    config.perturbation.enabled = true;
    run_validation(&config)
}

#[derive(Debug, Clone)]
pub struct ScaleOutput {
    pub trace: Vec<TraceRow>,
    pub record: EpisodeRecord,
    pub snapshots: Vec<WorldState>,
    pub params: SimParams,
}

/// One episode of the learned hierarchy with `scale.num_herders` herders and
/// `scale.num_targets` targets, each perceiving only its nearest neighbours.
/// Uses episode seed `base_seed` and nominal parameters.
pub fn run_scale_demo(config: &ExperimentConfig) -> Result<ScaleOutput, HarnessError> {
    let policies = Policies::load(
        &ExperimentConfig {
            controllers: vec![ControllerKind::Learned],
            ..config.clone()
        },
        true,
    )?;
    run_scale_demo_with(config, &policies)
}

pub fn run_scale_demo_with(
    config: &ExperimentConfig,
    policies: &Policies,
) -> Result<ScaleOutput, HarnessError> {
    let params = SimParams {
        num_herders: config.scale.num_herders,
        num_targets: config.scale.num_targets,
        ..config.sim
    };
    let config = ExperimentConfig {
        sim: params,
        controllers: vec![ControllerKind::Learned],
        ..config.clone()
    };
    config.validate()?;
    let sensing = config.scale.sensing.validate(&params)?;
    let mut controller =
        build_controller(ControllerKind::Learned, &config, &params, policies, sensing)?;
    let (record, captured) = run_one(
        controller.as_mut(),
        config.base_seed,
        &params,
        &config,
        true,
    );
    let captured = captured.expect("capture requested");
    Ok(ScaleOutput {
        trace: captured.trace,
        record,
        snapshots: captured.snapshots,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::{new_driving_actor, new_selection_actor};

    fn quick(mut c: ExperimentConfig, episodes: usize) -> ExperimentConfig {
        c.episodes = episodes;
        c.episode.max_steps = 200;
        c.episode.success_window = 50;
        c
    }

    fn policies(n: usize, m: usize) -> Policies {
        let mut rng = RngStream::new(5);
        Policies {
            selector: Some(new_selection_actor(n, m, &mut rng)),
            driver: Some(new_driving_actor(&mut rng)),
        }
    }

    #[test]
    fn perturbation_is_seeded_and_positive() {
        let p = Perturbation {
            enabled: true,
            std_fraction: 0.9,
        };
        let nominal = SimParams::nominal(2, 5);
        for seed in 0..200 {
            let a = p.apply(&nominal, seed);
            assert_eq!(a, p.apply(&nominal, seed));
            assert!(a.diffusion > 0.0 && a.repulsion_range > 0.0 && a.repulsion_gain > 0.0);
            assert_eq!(a.herder_max_speed, nominal.herder_max_speed);
        }
        let off = Perturbation {
            enabled: false,
            ..p
        };
        assert_eq!(off.apply(&nominal, 3), nominal);
        let zero = Perturbation {
            enabled: true,
            std_fraction: 0.0,
        };
        assert_eq!(zero.apply(&nominal, 3), nominal);
    }

    #[test]
    fn validation_is_deterministic_and_paired() {
        let mut c = quick(ExperimentConfig::select_2v5(), 3);
        c.controllers = vec![ControllerKind::Heuristic, ControllerKind::Learned];
        let pol = policies(2, 5);
        let a = run_validation_with(&c, &pol).unwrap();
        let b = run_validation_with(&c, &pol).unwrap();
        assert_eq!(a.results, b.results);
        assert_eq!(a.results.len(), 6);
        for i in 0..3 {
            assert_eq!(a.results[i].seed, a.results[i + 3].seed);
        }
        // Same initial state for both controllers.
        assert_eq!(a.trajectories[0].1[0], a.trajectories[1].1[0]);
        assert_eq!(a.report.controllers.len(), 2);
    }

    #[test]
    fn zero_spread_robustness_equals_validation() {
        let mut c = quick(ExperimentConfig::select_2v5(), 2);
        c.perturbation.std_fraction = 0.0;
        let v = run_validation(&c).unwrap();
        let r = run_robustness(&c).unwrap();
        assert_eq!(v.results, r.results);
    }

    #[test]
    fn missing_checkpoint_is_a_config_error() {
        let mut c = quick(ExperimentConfig::drive_1v1(), 1);
        c.controllers = vec![ControllerKind::Learned];
        assert!(matches!(run_validation(&c), Err(HarnessError::Config(_))));
        c.checkpoints.driving = Some(PathBuf::from("/nonexistent/driver.ckpt"));
        assert!(matches!(run_validation(&c), Err(HarnessError::Config(_))));
        assert!(matches!(run_scale_demo(&c), Err(HarnessError::Config(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = ExperimentConfig {
            episodes: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.perturbation.std_fraction = 1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.sim.repulsion_gain = 4.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn scale_demo_reduces_to_validation() {
        let mut c = quick(ExperimentConfig::select_2v5(), 1);
        c.controllers = vec![ControllerKind::Learned];
        c.trajectory_stride = 1;
        c.scale = ScaleConfig {
            num_herders: 2,
            num_targets: 5,
            sensing: SensingConfig {
                herders: 2,
                targets: 5,
            },
        };
        let pol = policies(2, 5);
        let v = run_validation_with(&c, &pol).unwrap();
        let s = run_scale_demo_with(&c, &pol).unwrap();
        assert_eq!(v.trajectories[0].1, s.snapshots);
        assert_eq!(v.results[0].record, s.record);
        assert_eq!(s.trace.len(), s.record.steps + 1);
    }
}

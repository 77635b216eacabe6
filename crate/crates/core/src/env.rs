//! Episode orchestration, observations, rewards and the success metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{self, RngStream, SimParams, Vec2, WorldState};

/// Fraction of targets that counts as "all contained".
pub const CONTAINED_FRACTION: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("herder trace {index} has {len} entries, need at least {need}")]
    TraceTooShort {
        index: usize,
        len: usize,
        need: usize,
    },
    #[error("invalid episode configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid reward gains: {0}")]
    InvalidGains(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Step budget `n_h`.
    pub max_steps: usize,
    /// Steps the targets must stay contained, `n_t`.
    pub success_window: usize,
    /// Steps a high-level selection is held, `n_w`.
    pub action_hold: usize,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self::driving()
    }
}

impl EpisodeConfig {
    /// Single herder, single target protocol.
    pub fn driving() -> Self {
        Self {
            max_steps: 1200,
            success_window: 200,
            action_hold: 1,
            seed: 0,
        }
    }

    /// Two herders, five targets protocol (training hold of 100 steps).
    pub fn selection() -> Self {
        Self {
            max_steps: 3000,
            success_window: 200,
            action_hold: 100,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(self) -> Result<Self, EnvError> {
        if self.success_window > self.max_steps {
            return Err(EnvError::InvalidConfig(format!(
                "success_window ({}) must not exceed max_steps ({})",
                self.success_window, self.max_steps
            )));
        }
        if self.action_hold == 0 {
            return Err(EnvError::InvalidConfig(
                "action_hold must be at least 1".into(),
            ));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardGains {
    /// Target approach.
    pub k1: f64,
    /// Goal guidance.
    pub k2: f64,
    /// Control effort.
    pub k3: f64,
    /// Team penalty for targets outside the goal.
    pub k4: f64,
}

impl Default for RewardGains {
    fn default() -> Self {
        Self {
            k1: 5e-2,
            k2: 1e-1,
            k3: 1.5e-2,
            k4: 1e-2,
        }
    }
}

impl RewardGains {
    pub fn validate(self) -> Result<Self, EnvError> {
        for (name, v) in [
            ("k1", self.k1),
            ("k2", self.k2),
            ("k3", self.k3),
            ("k4", self.k4),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(EnvError::InvalidGains(format!(
                    "{name} must be > 0, got {v}"
                )));
            }
        }
        if !(self.k3 < self.k1 && self.k1 < self.k2) {
            log::warn!(
                "reward gains break the k3 < k1 < k2 ordering (k1={}, k2={}, k3={})",
                self.k1,
                self.k2,
                self.k3
            );
        }
        Ok(self)
    }
}

/// Outcome of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub success: bool,
    pub settling_time: Option<usize>,
    pub path_length: f64,
    pub chi_trace: Vec<f64>,
    pub cumulative_reward: f64,
    /// Simulation steps executed.
    pub steps: usize,
}

/// Fraction of targets inside the buffered goal disk (boundary inclusive).
pub fn chi(state: &WorldState, params: &SimParams) -> f64 {
    let radius = params.buffered_goal_radius();
    let inside = state.targets.iter().filter(|t| t.norm() <= radius).count();
    inside as f64 / state.targets.len() as f64
}

/// First step `n` after which `chi >= 0.99` holds on the whole window
/// `[n, min(n + n_t, n_h)]`. The window must lie inside the trace.
pub fn settling_time(chi_trace: &[f64], success_window: usize, max_steps: usize) -> Option<usize> {
    if chi_trace.is_empty() {
        return None;
    }
    // run[k] = number of consecutive contained steps starting at k.
    let mut run = vec![0usize; chi_trace.len() + 1];
    for k in (0..chi_trace.len()).rev() {
        if chi_trace[k] >= CONTAINED_FRACTION {
            run[k] = run[k + 1] + 1;
        }
    }
    let last = chi_trace.len() - 1;
    (0..chi_trace.len()).find(|&n| {
        let end = (n + success_window).min(max_steps);
        end >= n && end <= last && run[n] > end - n
    })
}

/// Mean distance travelled per herder over the first `n` steps.
pub fn path_length(herder_traces: &[Vec<Vec2>], n: usize) -> Result<f64, EnvError> {
    if herder_traces.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (index, trace) in herder_traces.iter().enumerate() {
        if trace.len() < n + 1 {
            return Err(EnvError::TraceTooShort {
                index,
                len: trace.len(),
                need: n + 1,
            });
        }
        total += trace[..=n]
            .windows(2)
            .map(|w| w[1].distance(w[0]))
            .sum::<f64>();
    }
    Ok(total / herder_traces.len() as f64)
}

fn outside_goal_excess(t: Vec2, goal_radius: f64) -> f64 {
    let r = t.norm();
    if r > goal_radius {
        r - goal_radius
    } else {
        0.0
    }
}

/// Low-level reward for a single herder/target pair. Approach and guidance
/// terms apply only while the target is outside the (unbuffered) goal disk.
pub fn reward_driving(state: &WorldState, u: Vec2, params: &SimParams, gains: &RewardGains) -> f64 {
    let h = state.herders[0];
    let t = state.targets[0];
    let mut r = -gains.k3 * u.norm();
    if t.norm() > params.goal_radius {
        r -= gains.k1 * t.distance(h);
        r -= gains.k2 * (t.norm() - params.goal_radius);
    }
    r
}

/// Team reward shared by all herders: penalty per target outside the goal disk.
pub fn reward_selection(state: &WorldState, params: &SimParams, gains: &RewardGains) -> f64 {
    let excess: f64 = state
        .targets
        .iter()
        .map(|&t| outside_goal_excess(t, params.goal_radius))
        .sum();
    -gains.k4 * excess
}

/// `[T/R, (T-H)/R]` for one herder and the target it drives.
pub fn driving_features(herder: Vec2, target: Vec2, arena_half_width: f64) -> [f64; 4] {
    let t = target / arena_half_width;
    let rel = (target - herder) / arena_half_width;
    [t.x, t.y, rel.x, rel.y]
}

pub fn observe_driving(state: &WorldState, params: &SimParams) -> [f64; 4] {
    driving_features(state.herders[0], state.targets[0], params.arena_half_width)
}

/// Indices of `points` sorted by distance to `origin`, ascending. Equal
/// distances fall back to `x`, then `y`, then index, so relabelling targets
/// never changes the resulting feature vector.
pub(crate) fn indices_by_distance(origin: Vec2, points: &[Vec2]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (points[a], points[b]);
        pa.distance(origin)
            .total_cmp(&pb.distance(origin))
            .then(pa.x.total_cmp(&pb.x))
            .then(pa.y.total_cmp(&pb.y))
            .then(a.cmp(&b))
    });
    idx
}

/// Observation for the target-selection policy together with the ordering of
/// the target block, so an output index can be mapped back to a global target.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionObservation {
    pub features: Vec<f64>,
    /// Global herder ids in the order they appear (self first).
    pub herder_order: Vec<usize>,
    /// Global target ids in the order they appear.
    pub target_order: Vec<usize>,
}

impl SelectionObservation {
    pub(crate) fn build(
        state: &WorldState,
        self_index: usize,
        max_herders: usize,
        max_targets: usize,
        arena_half_width: f64,
    ) -> Self {
        let me = state.herders[self_index];
        let mut herder_order = vec![self_index];
        herder_order.extend(
            indices_by_distance(me, &state.herders)
                .into_iter()
                .filter(|&j| j != self_index)
                .take(max_herders.saturating_sub(1)),
        );
        let target_order: Vec<usize> = indices_by_distance(me, &state.targets)
            .into_iter()
            .take(max_targets)
            .collect();
        let mut features = Vec::with_capacity(2 * (herder_order.len() + target_order.len()));
        for &j in &herder_order {
            let p = state.herders[j] / arena_half_width;
            features.extend([p.x, p.y]);
        }
        for &a in &target_order {
            let p = state.targets[a] / arena_half_width;
            features.extend([p.x, p.y]);
        }
        Self {
            features,
            herder_order,
            target_order,
        }
    }
}

/// Full observation for herder `self_index`: own position, the other herders
/// and all targets, both blocks sorted by distance to self.
pub fn observe_selection(
    state: &WorldState,
    self_index: usize,
    params: &SimParams,
) -> SelectionObservation {
    SelectionObservation::build(
        state,
        self_index,
        state.herders.len(),
        state.targets.len(),
        params.arena_half_width,
    )
}

/// Anything that issues one velocity command per herder each step.
pub trait Controller {
    /// Called once before the first step of every episode.
    fn reset(&mut self, _initial: &WorldState, _params: &SimParams) {}

    fn commands(
        &mut self,
        state: &WorldState,
        params: &SimParams,
        rng: &mut RngStream,
    ) -> Vec<Vec2>;
}

/// Sub-stream ids derived from an episode seed.
pub mod streams {
    pub const INITIAL: u64 = 0;
    pub const NOISE: u64 = 1;
    pub const POLICY: u64 = 2;
    pub const PERTURBATION: u64 = 3;
}

/// Tracks the trailing run of contained steps to implement early termination.
#[derive(Debug, Clone, Default)]
pub(crate) struct ContainmentTracker {
    run: usize,
}

impl ContainmentTracker {
    /// Records `chi` and reports whether the episode should stop.
    pub(crate) fn push(&mut self, chi: f64, success_window: usize) -> bool {
        if chi >= CONTAINED_FRACTION {
            self.run += 1;
        } else {
            self.run = 0;
        }
        self.run > success_window
    }
}

/// Reward used for cumulative-reward accounting: the driving reward for a
/// single pair, the team selection reward otherwise.
pub fn step_reward(
    next: &WorldState,
    applied: &[Vec2],
    params: &SimParams,
    gains: &RewardGains,
) -> f64 {
    if params.num_herders == 1 && params.num_targets == 1 {
        reward_driving(next, applied[0], params, gains)
    } else {
        reward_selection(next, params, gains)
    }
}

/// Runs one episode from an initial state sampled with `config.seed`.
pub fn run_episode<C: Controller + ?Sized>(
    controller: &mut C,
    config: &EpisodeConfig,
    params: &SimParams,
    gains: &RewardGains,
    observer: &mut dyn FnMut(&WorldState),
) -> EpisodeRecord {
    let mut init_rng = RngStream::with_stream(config.seed, streams::INITIAL);
    let initial = sim::sample_initial(params, &mut init_rng);
    run_episode_from(controller, initial, config, params, gains, observer)
}

/// Runs one episode from a given initial state. Noise and policy sampling use
/// the sub-streams of `config.seed`.
pub fn run_episode_from<C: Controller + ?Sized>(
    controller: &mut C,
    initial: WorldState,
    config: &EpisodeConfig,
    params: &SimParams,
    gains: &RewardGains,
    observer: &mut dyn FnMut(&WorldState),
) -> EpisodeRecord {
    let mut noise_rng = RngStream::with_stream(config.seed, streams::NOISE);
    let mut policy_rng = RngStream::with_stream(config.seed, streams::POLICY);

    controller.reset(&initial, params);
    let mut state = initial;
    observer(&state);

    let mut traces: Vec<Vec<Vec2>> = state.herders.iter().map(|&h| vec![h]).collect();
    let mut chi_trace = vec![chi(&state, params)];
    let mut tracker = ContainmentTracker::default();
    let mut done = tracker.push(chi_trace[0], config.success_window);
    let mut cumulative_reward = 0.0;
    let mut steps = 0;

    while !done && steps < config.max_steps {
        let commands = controller.commands(&state, params, &mut policy_rng);
        let applied: Vec<Vec2> = commands
            .iter()
            .map(|u| u.saturate(params.herder_max_speed))
            .collect();
        state = sim::step_world(&state, &applied, params, &mut noise_rng);
        steps += 1;
        observer(&state);

        cumulative_reward += step_reward(&state, &applied, params, gains);
        for (trace, &h) in traces.iter_mut().zip(&state.herders) {
            trace.push(h);
        }
        let c = chi(&state, params);
        chi_trace.push(c);
        done = tracker.push(c, config.success_window);
    }

    let settling_time = settling_time(&chi_trace, config.success_window, config.max_steps);
    let path_length = path_length(&traces, steps).expect("traces hold every executed step");
    EpisodeRecord {
        success: settling_time.is_some(),
        settling_time,
        path_length,
        chi_trace,
        cumulative_reward,
        steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(herders: &[(f64, f64)], targets: &[(f64, f64)]) -> WorldState {
        WorldState {
            herders: herders.iter().map(|&(x, y)| Vec2::new(x, y)).collect(),
            targets: targets.iter().map(|&(x, y)| Vec2::new(x, y)).collect(),
            step_index: 0,
        }
    }

    struct Still;
    impl Controller for Still {
        fn commands(&mut self, s: &WorldState, _: &SimParams, _: &mut RngStream) -> Vec<Vec2> {
            vec![Vec2::ZERO; s.herders.len()]
        }
    }

    #[test]
    fn chi_examples() {
        let p = SimParams::nominal(1, 5);
        let s = state(&[(0.0, 0.0)], &[(1.0, 0.0); 5]);
        assert_eq!(chi(&s, &p), 1.0);
        let s = state(
            &[(0.0, 0.0)],
            &[(5.4, 0.0), (0.0, 5.6), (1.0, 0.0), (9.0, 0.0), (0.0, -2.0)],
        );
        assert!((chi(&s, &p) - 0.6).abs() < 1e-15);
        let s = state(&[(0.0, 0.0)], &[(10.0, 0.0); 5]);
        assert_eq!(chi(&s, &p), 0.0);
        // Boundary is inside.
        let s = state(&[(0.0, 0.0)], &[(5.5, 0.0); 5]);
        assert_eq!(chi(&s, &p), 1.0);
    }

    #[test]
    fn settling_time_examples() {
        let trace: Vec<f64> = (0..=12).map(|k| if k >= 7 { 1.0 } else { 0.0 }).collect();
        assert_eq!(settling_time(&trace, 5, 20), Some(7));
        assert_eq!(settling_time(&[1.0; 30], 5, 20), Some(0));
        assert_eq!(settling_time(&[0.98; 30], 5, 20), None);
        // Window not yet observed.
        assert_eq!(settling_time(&[0.0, 0.0, 1.0, 1.0], 5, 20), None);
        // Window truncated by the step budget.
        assert_eq!(settling_time(&[0.0, 0.0, 1.0, 1.0], 5, 3), Some(2));
    }

    #[test]
    fn path_length_examples() {
        let one = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(3.0, 4.0),
            Vec2::new(3.0, 5.0),
        ];
        assert!((path_length(std::slice::from_ref(&one), 2).unwrap() - 6.0).abs() < 1e-12);
        assert_eq!(
            path_length(&[vec![Vec2::new(1.0, 1.0); 3]], 2).unwrap(),
            0.0
        );
        let four = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(2.0, 0.0),
            Vec2::new(4.0, 0.0),
        ];
        assert!((path_length(&[one, four], 2).unwrap() - 5.0).abs() < 1e-12);
        assert!(matches!(
            path_length(&[vec![Vec2::ZERO; 2]], 2),
            Err(EnvError::TraceTooShort {
                index: 0,
                len: 2,
                need: 3
            })
        ));
    }

    #[test]
    fn driving_reward_examples() {
        let p = SimParams::default();
        let g = RewardGains::default();
        let r = reward_driving(
            &state(&[(8.0, 0.0)], &[(10.0, 0.0)]),
            Vec2::new(8.0, 0.0),
            &p,
            &g,
        );
        assert!((r + 0.72).abs() < 1e-12);
        let r = reward_driving(&state(&[(8.0, 0.0)], &[(2.0, 0.0)]), Vec2::ZERO, &p, &g);
        assert_eq!(r, 0.0);
        let r = reward_driving(
            &state(&[(8.0, 0.0)], &[(0.0, 4.0)]),
            Vec2::new(0.0, 8.0),
            &p,
            &g,
        );
        assert!((r + 0.12).abs() < 1e-12);
    }

    #[test]
    fn selection_reward_examples() {
        let p = SimParams::nominal(2, 5);
        let g = RewardGains::default();
        let s = state(
            &[(0.0, 0.0), (1.0, 1.0)],
            &[(10.0, 0.0), (0.0, 7.0), (3.0, 0.0), (0.0, 2.0), (1.0, 0.0)],
        );
        assert!((reward_selection(&s, &p, &g) + 0.07).abs() < 1e-12);
        let s = state(&[(0.0, 0.0), (1.0, 1.0)], &[(1.0, 0.0); 5]);
        assert_eq!(reward_selection(&s, &p, &g), 0.0);
        let s = state(
            &[(0.0, 0.0), (1.0, 1.0)],
            &[(5.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0)],
        );
        assert_eq!(reward_selection(&s, &p, &g), 0.0);
    }

    #[test]
    fn driving_observation_examples() {
        let p = SimParams::default();
        assert_eq!(
            observe_driving(&state(&[(0.0, 0.0)], &[(5.0, 0.0)]), &p),
            [0.2, 0.0, 0.2, 0.0]
        );
        assert_eq!(
            observe_driving(&state(&[(0.0, 0.0)], &[(0.0, 0.0)]), &p),
            [0.0; 4]
        );
        assert_eq!(
            observe_driving(&state(&[(-25.0, -25.0)], &[(25.0, 25.0)]), &p),
            [1.0, 1.0, 2.0, 2.0]
        );
    }

    #[test]
    fn selection_observation_layout_and_order() {
        let p = SimParams::nominal(2, 5);
        let s = state(
            &[(0.0, 0.0), (10.0, 0.0)],
            &[
                (9.0, 0.0),
                (0.0, 3.0),
                (0.0, -7.0),
                (20.0, 0.0),
                (-12.0, 0.0),
            ],
        );
        let obs = observe_selection(&s, 0, &p);
        assert_eq!(obs.features.len(), 14);
        assert_eq!(obs.herder_order, vec![0, 1]);
        assert_eq!(obs.target_order, vec![1, 2, 0, 4, 3]);
        assert_eq!(&obs.features[..4], &[0.0, 0.0, 0.4, 0.0]);
        assert_eq!(&obs.features[4..6], &[0.0, 3.0 / 25.0]);

        // Herder 1 sees itself first.
        let obs1 = observe_selection(&s, 1, &p);
        assert_eq!(obs1.herder_order, vec![1, 0]);
        assert_eq!(obs1.target_order[0], 0);
    }

    #[test]
    fn selection_observation_tie_break_is_stable() {
        let p = SimParams::nominal(1, 2);
        let a = state(&[(0.0, 0.0)], &[(3.0, 0.0), (-3.0, 0.0)]);
        let b = state(&[(0.0, 0.0)], &[(-3.0, 0.0), (3.0, 0.0)]);
        let oa = observe_selection(&a, 0, &p);
        let ob = observe_selection(&b, 0, &p);
        assert_eq!(oa.features, ob.features);
        assert_eq!(oa.target_order, vec![1, 0]);
        assert_eq!(ob.target_order, vec![0, 1]);
        // Coincident targets fall back to index order.
        let same = state(&[(0.0, 0.0)], &[(3.0, 0.0), (3.0, 0.0)]);
        assert_eq!(observe_selection(&same, 0, &p).target_order, vec![0, 1]);
    }

    #[test]
    fn episode_contained_from_start_terminates_after_window() {
        let p = SimParams {
            diffusion: 0.0,
            ..SimParams::nominal(1, 1)
        };
        let cfg = EpisodeConfig {
            max_steps: 100,
            success_window: 20,
            action_hold: 1,
            seed: 0,
        };
        let s = state(&[(20.0, 0.0)], &[(1.0, 0.0)]);
        let rec = run_episode_from(
            &mut Still,
            s,
            &cfg,
            &p,
            &RewardGains::default(),
            &mut |_| {},
        );
        assert!(rec.success);
        assert_eq!(rec.settling_time, Some(0));
        assert_eq!(rec.steps, 20);
        assert_eq!(rec.chi_trace.len(), 21);
        assert_eq!(rec.path_length, 0.0);
    }

    #[test]
    fn episode_out_of_reach_runs_to_budget() {
        let p = SimParams {
            diffusion: 0.0,
            ..SimParams::nominal(1, 1)
        };
        let cfg = EpisodeConfig {
            max_steps: 50,
            success_window: 20,
            action_hold: 1,
            seed: 0,
        };
        let s = state(&[(-20.0, 0.0)], &[(15.0, 0.0)]);
        let rec = run_episode_from(
            &mut Still,
            s,
            &cfg,
            &p,
            &RewardGains::default(),
            &mut |_| {},
        );
        assert!(!rec.success);
        assert_eq!(rec.settling_time, None);
        assert_eq!(rec.steps, 50);
        // Constant driving penalty for 50 steps.
        let per_step = -(0.05 * 35.0 + 0.1 * 10.0);
        assert!((rec.cumulative_reward - 50.0 * per_step).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(EpisodeConfig::driving().validate().is_ok());
        let bad = EpisodeConfig {
            success_window: 10,
            max_steps: 5,
            ..EpisodeConfig::driving()
        };
        assert!(bad.validate().is_err());
        let bad = EpisodeConfig {
            action_hold: 0,
            ..EpisodeConfig::driving()
        };
        assert!(bad.validate().is_err());
        assert!(RewardGains {
            k1: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}

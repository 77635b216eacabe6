//! Multi-herder target-selection environment and parameter-shared MAPPO.

use rand::RngCore;
use rayon::prelude::*;

use crate::env::{
    self, streams, ContainmentTracker, EpisodeConfig, RewardGains, SelectionObservation,
};
use crate::nn::MlpParams;
use crate::sim::{self, RngStream, SimParams, Vec2, WorldState};

use super::buffer::{RolloutBuffer, Segment};
use super::driving::driving_command;
use super::policy::{self, new_critic, new_selection_actor, Action, SELECTION_HIDDEN};
use super::ppo::{ppo_update, PpoOptimizer};
use super::{ActorCritic, PpoHyper, RlError, TrainOutput};

/// Result of holding one joint selection for up to `action_hold` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutcome {
    /// Team reward summed over the executed steps.
    pub reward: f64,
    /// Simulation steps executed in this window.
    pub steps: usize,
    pub terminated: bool,
    pub truncated: bool,
    /// Per-herder selection features after the window, before any reset.
    pub next_observations: Vec<Vec<f64>>,
    pub episode_reward: Option<f64>,
}

/// Auto-resetting environment whose action is one global target id per
/// herder. A frozen driving actor turns each selection into velocities.
#[derive(Debug, Clone)]
pub struct SelectionEnv {
    params: SimParams,
    config: EpisodeConfig,
    gains: RewardGains,
    driver: MlpParams,
    seed_source: RngStream,
    state: WorldState,
    noise: RngStream,
    tracker: ContainmentTracker,
    steps: usize,
    episode_reward: f64,
    /// Decision epochs taken since construction.
    pub decisions: usize,
    /// Simulation steps taken since construction.
    pub sim_steps: usize,
}

impl SelectionEnv {
    pub fn new(
        params: SimParams,
        config: EpisodeConfig,
        gains: RewardGains,
        driver: MlpParams,
        seed_source: RngStream,
    ) -> Result<Self, RlError> {
        if driver.input_len() != 4 || driver.output_len() != 2 {
            return Err(RlError::Setup(format!(
                "driving actor must map 4 inputs to 2 outputs, has {:?}",
                driver.layer_sizes
            )));
        }
        let mut env = Self {
            params,
            config,
            gains,
            driver,
            seed_source,
            state: WorldState {
                herders: vec![],
                targets: vec![],
                step_index: 0,
            },
            noise: RngStream::new(0),
            tracker: ContainmentTracker::default(),
            steps: 0,
            episode_reward: 0.0,
            decisions: 0,
            sim_steps: 0,
        };
        env.reset();
        Ok(env)
    }

    fn reset(&mut self) {
        let seed = self.seed_source.next_u64();
        self.state = sim::sample_initial(
            &self.params,
            &mut RngStream::with_stream(seed, streams::INITIAL),
        );
        self.noise = RngStream::with_stream(seed, streams::NOISE);
        self.tracker = ContainmentTracker::default();
        self.tracker.push(
            env::chi(&self.state, &self.params),
            self.config.success_window,
        );
        self.steps = 0;
        self.episode_reward = 0.0;
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn observations(&self) -> Vec<SelectionObservation> {
        (0..self.params.num_herders)
            .map(|i| env::observe_selection(&self.state, i, &self.params))
            .collect()
    }

    /// Holds `targets` (global ids, one per herder) for `action_hold` steps or
    /// until the episode ends.
    pub fn advance(&mut self, targets: &[usize]) -> Result<WindowOutcome, RlError> {
        if targets.len() != self.params.num_herders
            || targets.iter().any(|&t| t >= self.params.num_targets)
        {
            return Err(RlError::Setup(format!(
                "invalid joint selection {targets:?}"
            )));
        }
        self.decisions += 1;
        let mut reward = 0.0;
        let mut steps = 0;
        let mut terminated = false;
        let mut truncated = false;
        while steps < self.config.action_hold {
            let commands = targets
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    driving_command(
                        &self.driver,
                        self.state.herders[i],
                        self.state.targets[a],
                        &self.params,
                    )
                })
                .collect::<Result<Vec<Vec2>, RlError>>()?;
            self.state = sim::step_world(&self.state, &commands, &self.params, &mut self.noise);
            self.steps += 1;
            self.sim_steps += 1;
            steps += 1;
            reward += env::reward_selection(&self.state, &self.params, &self.gains);
            terminated = self.tracker.push(
                env::chi(&self.state, &self.params),
                self.config.success_window,
            );
            truncated = !terminated && self.steps >= self.config.max_steps;
            if terminated || truncated {
                break;
            }
        }
        self.episode_reward += reward;
        let next_observations = self
            .observations()
            .into_iter()
            .map(|o| o.features)
            .collect();
        let episode_reward = (terminated || truncated).then_some(self.episode_reward);
        if episode_reward.is_some() {
            self.reset();
        }
        Ok(WindowOutcome {
            reward,
            steps,
            terminated,
            truncated,
            next_observations,
            episode_reward,
        })
    }
}

struct Worker {
    env: SelectionEnv,
    actions: RngStream,
}

impl Worker {
    /// Collects `horizon` decision epochs; returns one segment per herder.
    fn collect(
        &mut self,
        nets: &ActorCritic,
        horizon: usize,
        gamma: f64,
    ) -> Result<(Vec<Segment>, Vec<f64>), RlError> {
        let n = self.env.params.num_herders;
        let mut segs = vec![Segment::default(); n];
        let mut finished = Vec::new();
        for _ in 0..horizon {
            let obs = self.env.observations();
            let mut picks = Vec::with_capacity(n);
            let mut decided = Vec::with_capacity(n);
            for o in obs {
                let (action, logp) =
                    policy::sample_action(&nets.actor, &o.features, &mut self.actions)?;
                let value = policy::value(&nets.critic, &o.features)?;
                picks.push(o.target_order[action.discrete()]);
                decided.push((o.features, action, logp, value));
            }
            let out = self.env.advance(&picks)?;
            let done = out.terminated || out.truncated;
            for (i, (features, action, logp, value)) in decided.into_iter().enumerate() {
                let mut reward = out.reward;
                if out.truncated {
                    reward += gamma * policy::value(&nets.critic, &out.next_observations[i])?;
                }
                segs[i].push(features, action, logp, value, reward, done);
            }
            if let Some(r) = out.episode_reward {
                finished.push(r);
            }
        }
        for (seg, o) in segs.iter_mut().zip(self.env.observations()) {
            seg.bootstrap = policy::value(&nets.critic, &o.features)?;
        }
        Ok((segs, finished))
    }
}

/// Trains one shared selection actor and critic for all herders until
/// `hyper.total_episodes` episodes have finished. `driver` stays frozen.
pub fn train_selection(
    hyper: &PpoHyper,
    params: &SimParams,
    config: &EpisodeConfig,
    gains: &RewardGains,
    driver: &MlpParams,
    seed: u64,
) -> Result<TrainOutput, RlError> {
    let hyper = hyper.validate()?;
    let params = params
        .validate()
        .map_err(|e| RlError::Setup(e.to_string()))?;
    let config = config
        .validate()
        .map_err(|e| RlError::Setup(e.to_string()))?;
    let gains = gains
        .validate()
        .map_err(|e| RlError::Setup(e.to_string()))?;

    let (n, m) = (params.num_herders, params.num_targets);
    let mut init = RngStream::with_stream(seed, 20);
    let mut nets = ActorCritic {
        actor: new_selection_actor(n, m, &mut init),
        critic: new_critic(2 * (n + m), &SELECTION_HIDDEN, &mut init),
    };
    let mut workers = (0..hyper.num_actors as u64)
        .map(|a| {
            Ok(Worker {
                env: SelectionEnv::new(
                    params,
                    config,
                    gains,
                    driver.clone(),
                    RngStream::with_stream(seed, 300 + a),
                )?,
                actions: RngStream::with_stream(seed, 3000 + a),
            })
        })
        .collect::<Result<Vec<_>, RlError>>()?;
    let mut shuffle = RngStream::with_stream(seed, 21);
    let mut opt = PpoOptimizer::new(&nets, hyper.stepsize);
    let mut episode_rewards = Vec::new();
    let mut updates = Vec::new();

    while episode_rewards.len() < hyper.total_episodes {
        let snapshot = &nets;
        let collected = workers
            .par_iter_mut()
            .map(|w| w.collect(snapshot, hyper.horizon, hyper.gamma))
            .collect::<Result<Vec<_>, RlError>>()?;
        let mut segments = Vec::new();
        for (segs, finished) in collected {
            segments.extend(segs);
            episode_rewards.extend(finished);
        }
        let mut buffer = RolloutBuffer::new(segments);
        buffer.finish(hyper.gamma, hyper.gae_lambda)?;
        let stats = ppo_update(&mut nets, &mut opt, buffer.samples()?, &hyper, &mut shuffle)?;
        log::info!(
            "selection update {}: {} episodes, value loss {:.4}, entropy {:.3}",
            stats.update,
            episode_rewards.len(),
            stats.value_loss,
            stats.entropy
        );
        updates.push(stats);
    }
    episode_rewards.truncate(hyper.total_episodes);
    Ok(TrainOutput {
        actor: nets.actor,
        critic: nets.critic,
        episode_rewards,
        updates,
    })
}

/// Probability of each local target slot for one observation. Exposed for
/// structural checks on the categorical head.
pub fn selection_distribution(actor: &MlpParams, features: &[f64]) -> Result<Vec<f64>, RlError> {
    policy::selection_probs(actor, features)
}

/// Greedy local target slot.
pub fn greedy_selection(actor: &MlpParams, features: &[f64]) -> Result<usize, RlError> {
    Ok(match policy::greedy_action(actor, features)? {
        Action::Discrete(k) => k,
        Action::Continuous(_) => {
            return Err(RlError::Setup("selection actor must be categorical".into()))
        }
    })
}

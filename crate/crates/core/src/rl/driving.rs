//! Single herder, single target environment and its PPO training loop.

use rand::RngCore;
use rayon::prelude::*;

use crate::env::{self, streams, ContainmentTracker, EpisodeConfig, RewardGains};
use crate::nn::MlpParams;
use crate::sim::{self, RngStream, SimParams, Vec2, WorldState};

use super::buffer::{RolloutBuffer, Segment};
use super::policy::{self, new_critic, new_driving_actor, DRIVING_HIDDEN};
use super::ppo::{ppo_update, PpoOptimizer};
use super::{ActorCritic, PpoHyper, RlError, TrainOutput};

/// Maps a raw (normalized) driving action to the applied velocity.
pub fn scale_action(raw: &[f64], params: &SimParams) -> Vec2 {
    (Vec2::new(raw[0], raw[1]) * params.herder_max_speed).saturate(params.herder_max_speed)
}

/// Deterministic velocity of a herder driving `target` with the actor mean.
pub fn driving_command(
    actor: &MlpParams,
    herder: Vec2,
    target: Vec2,
    params: &SimParams,
) -> Result<Vec2, RlError> {
    let obs = env::driving_features(herder, target, params.arena_half_width);
    let mean = actor.forward(&obs)?;
    Ok(scale_action(&mean, params))
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// Containment held long enough: the episode ended on success.
    pub terminated: bool,
    /// The step budget ran out.
    pub truncated: bool,
    /// Observation after the step, before any automatic reset.
    pub next_observation: Vec<f64>,
    /// Cumulative reward of the episode that just ended, if any.
    pub episode_reward: Option<f64>,
}

/// Auto-resetting 1v1 environment. Every episode draws a fresh seed from
/// `seed_source`; initial conditions and noise use that seed's sub-streams.
#[derive(Debug, Clone)]
pub struct DrivingEnv {
    params: SimParams,
    config: EpisodeConfig,
    gains: RewardGains,
    seed_source: RngStream,
    state: WorldState,
    noise: RngStream,
    tracker: ContainmentTracker,
    steps: usize,
    episode_reward: f64,
}

impl DrivingEnv {
    pub fn new(
        params: SimParams,
        config: EpisodeConfig,
        gains: RewardGains,
        seed_source: RngStream,
    ) -> Result<Self, RlError> {
        if params.num_herders != 1 || params.num_targets != 1 {
            return Err(RlError::Setup(
                "driving environment needs exactly one herder and one target".into(),
            ));
        }
        let mut env = Self {
            params,
            config,
            gains,
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

    pub fn observation(&self) -> Vec<f64> {
        env::observe_driving(&self.state, &self.params).to_vec()
    }

    pub fn step(&mut self, raw_action: &[f64]) -> StepOutcome {
        let u = scale_action(raw_action, &self.params);
        self.state = sim::step_world(&self.state, &[u], &self.params, &mut self.noise);
        self.steps += 1;
        let reward = env::reward_driving(&self.state, u, &self.params, &self.gains);
        self.episode_reward += reward;
        let terminated = self.tracker.push(
            env::chi(&self.state, &self.params),
            self.config.success_window,
        );
        let truncated = !terminated && self.steps >= self.config.max_steps;
        let next_observation = self.observation();
        let episode_reward = (terminated || truncated).then_some(self.episode_reward);
        if episode_reward.is_some() {
            self.reset();
        }
        StepOutcome {
            reward,
            terminated,
            truncated,
            next_observation,
            episode_reward,
        }
    }
}

struct Worker {
    env: DrivingEnv,
    actions: RngStream,
}

impl Worker {
    /// Collects `horizon` steps with the current policy. Truncated episodes
    /// fold the discounted critic estimate of the final state into the reward.
    fn collect(
        &mut self,
        nets: &ActorCritic,
        horizon: usize,
        gamma: f64,
    ) -> Result<(Segment, Vec<f64>), RlError> {
        let mut seg = Segment::default();
        let mut finished = Vec::new();
        let mut obs = self.env.observation();
        for _ in 0..horizon {
            let (action, logp) = policy::sample_action(&nets.actor, &obs, &mut self.actions)?;
            let value = policy::value(&nets.critic, &obs)?;
            let out = self.env.step(action.continuous());
            let mut reward = out.reward;
            if out.truncated {
                reward += gamma * policy::value(&nets.critic, &out.next_observation)?;
            }
            let done = out.terminated || out.truncated;
            seg.push(obs, action, logp, value, reward, done);
            if let Some(r) = out.episode_reward {
                finished.push(r);
            }
            obs = self.env.observation();
        }
        seg.bootstrap = policy::value(&nets.critic, &obs)?;
        Ok((seg, finished))
    }
}

/// Trains the driving actor and critic with PPO until `hyper.total_episodes`
/// episodes have finished. Fully determined by `seed`.
pub fn train_driving(
    hyper: &PpoHyper,
    params: &SimParams,
    config: &EpisodeConfig,
    gains: &RewardGains,
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

    let mut init = RngStream::with_stream(seed, 10);
    let mut nets = ActorCritic {
        actor: new_driving_actor(&mut init),
        critic: new_critic(4, &DRIVING_HIDDEN, &mut init),
    };
    train_driving_from(&mut nets, &hyper, params, config, gains, seed)
}

fn train_driving_from(
    nets: &mut ActorCritic,
    hyper: &PpoHyper,
    params: SimParams,
    config: EpisodeConfig,
    gains: RewardGains,
    seed: u64,
) -> Result<TrainOutput, RlError> {
    let mut workers = (0..hyper.num_actors as u64)
        .map(|a| {
            Ok(Worker {
                env: DrivingEnv::new(params, config, gains, RngStream::with_stream(seed, 100 + a))?,
                actions: RngStream::with_stream(seed, 1000 + a),
            })
        })
        .collect::<Result<Vec<_>, RlError>>()?;
    let mut shuffle = RngStream::with_stream(seed, 11);
    let mut opt = PpoOptimizer::new(nets, hyper.stepsize);
    let mut episode_rewards = Vec::new();
    let mut updates = Vec::new();

    while episode_rewards.len() < hyper.total_episodes {
        let snapshot: &ActorCritic = nets;
        let collected = workers
            .par_iter_mut()
            .map(|w| w.collect(snapshot, hyper.horizon, hyper.gamma))
            .collect::<Result<Vec<_>, RlError>>()?;
        let mut segments = Vec::with_capacity(collected.len());
        for (seg, finished) in collected {
            segments.push(seg);
            episode_rewards.extend(finished);
        }
        let mut buffer = RolloutBuffer::new(segments);
        buffer.finish(hyper.gamma, hyper.gae_lambda)?;
        let stats = ppo_update(nets, &mut opt, buffer.samples()?, hyper, &mut shuffle)?;
        log::info!(
            "driving update {}: {} episodes, value loss {:.4}, entropy {:.3}, clip {:.3}",
            stats.update,
            episode_rewards.len(),
            stats.value_loss,
            stats.entropy,
            stats.clip_fraction
        );
        updates.push(stats);
    }
    episode_rewards.truncate(hyper.total_episodes);
    Ok(TrainOutput {
        actor: nets.actor.clone(),
        critic: nets.critic.clone(),
        episode_rewards,
        updates,
    })
}

/// Controller that drives the single target with the actor mean.
#[derive(Debug, Clone)]
pub struct LearnedDriver {
    pub actor: MlpParams,
}

impl env::Controller for LearnedDriver {
    fn commands(
        &mut self,
        state: &WorldState,
        params: &SimParams,
        _rng: &mut RngStream,
    ) -> Vec<Vec2> {
        let cmd = driving_command(&self.actor, state.herders[0], state.targets[0], params)
            .expect("driving actor takes four inputs");
        vec![cmd]
    }
}

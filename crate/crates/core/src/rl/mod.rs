//! PPO for the continuous driving policy and parameter-shared MAPPO for the
//! discrete target-selection policy.

mod buffer;
mod curve;
mod driving;
mod policy;
mod ppo;
mod selection;

pub use buffer::{RolloutBuffer, Segment};
pub use curve::{
    curve_rows, moving_average, read_learning_curve, write_learning_curve, CurveRow,
    DRIVING_WINDOW, SELECTION_WINDOW,
};
pub use driving::{
    driving_command, scale_action, train_driving, DrivingEnv, LearnedDriver, StepOutcome,
};
pub use policy::{
    greedy_action, new_critic, new_driving_actor, new_selection_actor, sample_action,
    selection_probs, value, Action, PolicyEval, PolicyKind, DRIVING_HIDDEN, SELECTION_HIDDEN,
};
pub use ppo::{ppo_loss_and_grads, ppo_update, LossBreakdown, PpoOptimizer, Sample, UpdateStats};
pub use selection::{
    greedy_selection, selection_distribution, train_selection, SelectionEnv, WindowOutcome,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{MlpParams, NnError};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("non-finite {what} during update {update}, epoch {epoch}")]
    NonFinite {
        what: &'static str,
        update: usize,
        epoch: usize,
    },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("invalid setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoHyper {
    pub stepsize: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub vf_coeff: f64,
    pub entropy_coeff: f64,
    pub epochs: usize,
    /// Steps (decision epochs for selection) per actor between updates.
    pub horizon: usize,
    pub minibatch_size: usize,
    pub num_actors: usize,
    /// Episodes to consume before training stops.
    pub total_episodes: usize,
    /// Global gradient-norm clip per network; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self::driving()
    }
}

impl PpoHyper {
    pub fn driving() -> Self {
        Self {
            stepsize: 5e-4,
            gamma: 0.98,
            gae_lambda: 0.95,
            clip: 0.2,
            vf_coeff: 0.5,
            entropy_coeff: 0.1,
            epochs: 10,
            horizon: 4096,
            minibatch_size: 128,
            num_actors: 8,
            total_episodes: 20_000,
            max_grad_norm: 0.5,
        }
    }

    pub fn selection() -> Self {
        Self {
            entropy_coeff: 0.0,
            horizon: 32,
            minibatch_size: 1024,
            num_actors: 32,
            total_episodes: 200_000,
            ..Self::driving()
        }
    }

    pub fn validate(self) -> Result<Self, RlError> {
        let bad = |msg: String| Err(RlError::InvalidHyper(msg));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!(
                "gae_lambda must lie in [0, 1], got {}",
                self.gae_lambda
            ));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad(format!("clip must be > 0, got {}", self.clip));
        }
        let non_negative = |v: f64| (0.0..).contains(&v);
        if !non_negative(self.stepsize)
            || !non_negative(self.vf_coeff)
            || !non_negative(self.entropy_coeff)
        {
            return bad("stepsize, vf_coeff and entropy_coeff must be >= 0".into());
        }
        if self.epochs == 0 || self.horizon == 0 || self.num_actors == 0 || self.minibatch_size == 0
        {
            return bad("epochs, horizon, num_actors and minibatch_size must be >= 1".into());
        }
        if self.minibatch_size > self.horizon * self.num_actors {
            return bad(format!(
                "minibatch_size ({}) exceeds horizon * num_actors ({})",
                self.minibatch_size,
                self.horizon * self.num_actors
            ));
        }
        if !non_negative(self.max_grad_norm) {
            return bad("max_grad_norm must be >= 0".into());
        }
        Ok(self)
    }
}

/// Generalized advantage estimates and returns-to-go for one trajectory
/// segment. `bootstrap` is the value of the state following the last step; it
/// is ignored when the last step is terminal.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    dones: &[bool],
    gamma: f64,
    gae_lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), RlError> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(RlError::Length(format!(
            "rewards {n}, values {}, dones {}",
            values.len(),
            dones.len()
        )));
    }
    let mut advantages = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * gae_lambda * live * next_adv;
        advantages[t] = next_adv;
        next_value = values[t];
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

/// Clipped surrogate `min(ρA, clip(ρ, 1-ε, 1+ε)A)` with `ρ = exp(new - old)`.
pub fn ppo_surrogate(new_log_prob: f64, old_log_prob: f64, advantage: f64, clip: f64) -> f64 {
    let ratio = (new_log_prob - old_log_prob).exp();
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

/// Zero-mean, unit-variance rescaling in place. Constant inputs map to zero.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { 0.0 };
    }
}

/// Actor and critic trained together; the critic always outputs one value.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub actor: MlpParams,
    pub critic: MlpParams,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub actor: MlpParams,
    pub critic: MlpParams,
    /// Undiscounted cumulative reward of every finished episode, in completion order.
    pub episode_rewards: Vec<f64>,
    pub updates: Vec<UpdateStats>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gae_hand_values() {
        let (a, r) =
            compute_gae(&[1.0, 1.0], &[0.0, 0.0], 0.0, &[false, false], 0.98, 0.95).unwrap();
        assert!((a[0] - 1.931).abs() < 1e-12 && (a[1] - 1.0).abs() < 1e-12);
        assert!((r[0] - 1.931).abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let rewards = [0.5, -1.0, 2.0];
        let values = [0.1, 0.4, -0.3];
        let (a, _) = compute_gae(&rewards, &values, 0.7, &[false, true, false], 0.9, 0.0).unwrap();
        assert_eq!(a[0], 0.5 + 0.9 * 0.4 - 0.1);
        assert_eq!(a[1], -1.0 - 0.4);
        assert_eq!(a[2], 2.0 + 0.9 * 0.7 + 0.3);
    }

    #[test]
    fn gae_unit_discount_is_reward_to_go() {
        let rewards = [1.0, -2.0, 3.0, 0.5];
        let (a, _) = compute_gae(&rewards, &[0.0; 4], 0.0, &[false; 4], 1.0, 1.0).unwrap();
        assert_eq!(a, vec![2.5, 1.5, 3.5, 0.5]);
    }

    #[test]
    fn gae_rejects_mismatched_lengths() {
        assert!(compute_gae(&[1.0], &[0.0, 0.0], 0.0, &[false], 0.9, 0.9).is_err());
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(ppo_surrogate(0.3, 0.3, 1.7, 0.2), 1.7);
        let r15 = 1.5f64.ln();
        assert!((ppo_surrogate(r15, 0.0, 2.0, 0.2) - 2.4).abs() < 1e-12);
        let r05 = 0.5f64.ln();
        assert!((ppo_surrogate(r05, 0.0, -1.0, 0.2) + 0.8).abs() < 1e-12);
    }

    #[test]
    fn hyper_defaults_and_validation() {
        let d = PpoHyper::driving().validate().unwrap();
        assert_eq!((d.horizon, d.num_actors, d.minibatch_size), (4096, 8, 128));
        let s = PpoHyper::selection().validate().unwrap();
        assert_eq!(
            (s.horizon, s.num_actors, s.minibatch_size, s.entropy_coeff),
            (32, 32, 1024, 0.0)
        );
        assert_eq!(s.stepsize, 5e-4);
        assert!(PpoHyper { gamma: 1.2, ..d }.validate().is_err());
        assert!(PpoHyper { clip: 0.0, ..d }.validate().is_err());
        assert!(PpoHyper {
            minibatch_size: 1 << 20,
            ..d
        }
        .validate()
        .is_err());
    }

    fn brute_force_gae(
        rewards: &[f64],
        values: &[f64],
        bootstrap: f64,
        dones: &[bool],
        g: f64,
        l: f64,
    ) -> Vec<f64> {
        let n = rewards.len();
        (0..n)
            .map(|t| {
                let mut total = 0.0;
                let mut weight = 1.0;
                for k in t..n {
                    let next_v = if k + 1 < n { values[k + 1] } else { bootstrap };
                    let live = if dones[k] { 0.0 } else { 1.0 };
                    let delta = rewards[k] + g * next_v * live - values[k];
                    total += weight * delta;
                    if dones[k] {
                        break;
                    }
                    weight *= g * l;
                }
                total
            })
            .collect()
    }

    proptest! {
        #[test]
        fn gae_matches_double_loop(
            data in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, any::<bool>()), 1..=10),
            bootstrap in -5.0..5.0f64,
            g in 0.0..=1.0f64,
            l in 0.0..=1.0f64,
        ) {
            let rewards: Vec<f64> = data.iter().map(|d| d.0).collect();
            let values: Vec<f64> = data.iter().map(|d| d.1).collect();
            let dones: Vec<bool> = data.iter().map(|d| d.2).collect();
            let (a, r) = compute_gae(&rewards, &values, bootstrap, &dones, g, l).unwrap();
            let oracle = brute_force_gae(&rewards, &values, bootstrap, &dones, g, l);
            for t in 0..a.len() {
                prop_assert!((a[t] - oracle[t]).abs() < 1e-12);
                prop_assert!((r[t] - a[t] - values[t]).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_advantages_are_standard(adv in prop::collection::vec(-100.0..100.0f64, 2..200)) {
            let mut a = adv.clone();
            normalize_advantages(&mut a);
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let spread = adv.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - adv.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(mean.abs() < 1e-10);
            if spread > 1e-6 {
                let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!((std - 1.0).abs() < 1e-10);
            }
        }

        #[test]
        fn surrogate_is_advantage_inside_trust_region(log_ratio in -0.15..0.15f64, adv in -3.0..3.0f64) {
            // Inside the clip interval the surrogate is the unclipped ratio objective.
            let s = ppo_surrogate(log_ratio, 0.0, adv, 0.2);
            prop_assert!((s - log_ratio.exp() * adv).abs() < 1e-12);
        }
    }
}

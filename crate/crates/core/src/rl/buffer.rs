//! On-policy rollout storage.

use super::policy::Action;
use super::ppo::Sample;
use super::{compute_gae, RlError};

/// One contiguous trajectory piece from a single actor (and, for MAPPO, a
/// single herder). Episode boundaries inside it are marked by `dones`.
#[derive(Debug, Clone, Default)]
pub struct Segment {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Critic value after the last step; ignored when that step is terminal.
    pub bootstrap: f64,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Segment {
    pub fn push(
        &mut self,
        obs: Vec<f64>,
        action: Action,
        log_prob: f64,
        value: f64,
        reward: f64,
        done: bool,
    ) {
        self.observations.push(obs);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.values.push(value);
        self.rewards.push(reward);
        self.dones.push(done);
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn check(&self) -> Result<(), RlError> {
        let n = self.len();
        let lens = [
            self.observations.len(),
            self.actions.len(),
            self.log_probs.len(),
            self.values.len(),
            self.dones.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(RlError::Length(format!(
                "segment columns {lens:?} vs {n} rewards"
            )));
        }
        Ok(())
    }

    pub fn compute_advantages(&mut self, gamma: f64, gae_lambda: f64) -> Result<(), RlError> {
        self.check()?;
        let (adv, ret) = compute_gae(
            &self.rewards,
            &self.values,
            self.bootstrap,
            &self.dones,
            gamma,
            gae_lambda,
        )?;
        self.advantages = adv;
        self.returns = ret;
        Ok(())
    }
}

/// All segments collected between two updates.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub segments: Vec<Segment>,
    finished: bool,
}

impl RolloutBuffer {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self {
            segments,
            finished: false,
        }
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs GAE on every segment. Must precede [`RolloutBuffer::samples`].
    pub fn finish(&mut self, gamma: f64, gae_lambda: f64) -> Result<(), RlError> {
        for s in &mut self.segments {
            s.compute_advantages(gamma, gae_lambda)?;
        }
        self.finished = true;
        Ok(())
    }

    /// Flattens segments in order into training samples.
    pub fn samples(&self) -> Result<Vec<Sample>, RlError> {
        if !self.finished {
            return Err(RlError::Setup(
                "advantages requested before finish()".into(),
            ));
        }
        let mut out = Vec::with_capacity(self.len());
        for s in &self.segments {
            for t in 0..s.len() {
                out.push(Sample {
                    observation: s.observations[t].clone(),
                    action: s.actions[t].clone(),
                    old_log_prob: s.log_probs[t],
                    advantage: s.advantages[t],
                    return_to_go: s.returns[t],
                });
            }
        }
        Ok(out)
    }

    pub fn clear(&mut self) {
        self.segments.clear();
        self.finished = false;
    }
}

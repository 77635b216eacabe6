//! Gaussian and categorical policy heads on top of [`MlpParams`].

use crate::nn::{
    categorical_entropy, categorical_log_prob, categorical_probs, gaussian_entropy,
    gaussian_log_prob, ForwardCache, Gradients, MlpParams, OutputActivation,
};
use crate::sim::RngStream;

use super::RlError;

/// Hidden widths of the driving actor and critic.
pub const DRIVING_HIDDEN: [usize; 5] = [64; 5];
/// Hidden widths of the selection actor and critic.
pub const SELECTION_HIDDEN: [usize; 2] = [256, 128];

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Raw Gaussian sample in normalized units (before scaling by `v_H`).
    Continuous(Vec<f64>),
    Discrete(usize),
}

impl Action {
    pub fn continuous(&self) -> &[f64] {
        match self {
            Action::Continuous(a) => a,
            Action::Discrete(_) => panic!("expected a continuous action"),
        }
    }

    pub fn discrete(&self) -> usize {
        match self {
            Action::Discrete(i) => *i,
            Action::Continuous(_) => panic!("expected a discrete action"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Gaussian,
    Categorical,
}

impl PolicyKind {
    pub fn of(net: &MlpParams) -> Result<Self, RlError> {
        match (net.output_activation, net.log_std.is_some()) {
            (OutputActivation::Softmax, false) => Ok(PolicyKind::Categorical),
            (_, true) => Ok(PolicyKind::Gaussian),
            _ => Err(RlError::Setup(
                "actor needs either a softmax head or a log-std vector".into(),
            )),
        }
    }
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

/// 4 → 5×64 → 2 tanh with a learned log-std.
pub fn new_driving_actor(rng: &mut RngStream) -> MlpParams {
    MlpParams::init(
        &sizes(4, &DRIVING_HIDDEN, 2),
        OutputActivation::Tanh,
        true,
        0.01,
        rng,
    )
}

/// `2(N+M)` → 256 → 128 → `M` softmax.
pub fn new_selection_actor(
    num_herders: usize,
    num_targets: usize,
    rng: &mut RngStream,
) -> MlpParams {
    MlpParams::init(
        &sizes(
            2 * (num_herders + num_targets),
            &SELECTION_HIDDEN,
            num_targets,
        ),
        OutputActivation::Softmax,
        false,
        0.01,
        rng,
    )
}

/// Linear single-output value network with the given hidden widths.
pub fn new_critic(input: usize, hidden: &[usize], rng: &mut RngStream) -> MlpParams {
    MlpParams::init(
        &sizes(input, hidden, 1),
        OutputActivation::Linear,
        false,
        1.0,
        rng,
    )
}

/// Forward pass of an actor evaluated at a stored action.
#[derive(Debug, Clone)]
pub struct PolicyEval {
    pub cache: ForwardCache,
    pub log_prob: f64,
    pub entropy: f64,
}

impl PolicyEval {
    pub fn evaluate(net: &MlpParams, obs: &[f64], action: &Action) -> Result<Self, RlError> {
        let cache = net.forward_cached(obs)?;
        let (log_prob, entropy) = match action {
            Action::Continuous(a) => {
                let log_std = net.log_std.as_ref().ok_or_else(|| {
                    RlError::Setup("gaussian action for a net without log-std".into())
                })?;
                (
                    gaussian_log_prob(&cache.output, log_std, a),
                    gaussian_entropy(log_std),
                )
            }
            Action::Discrete(i) => {
                if *i >= net.output_len() {
                    return Err(RlError::Setup(format!("action index {i} out of range")));
                }
                (
                    categorical_log_prob(cache.logits(), *i),
                    categorical_entropy(&cache.output),
                )
            }
        };
        Ok(Self {
            cache,
            log_prob,
            entropy,
        })
    }

    /// Accumulates the gradient of `d_log_prob * log π(a|s) + d_entropy * H(π(·|s))`.
    pub fn backward(
        &self,
        net: &MlpParams,
        action: &Action,
        d_log_prob: f64,
        d_entropy: f64,
        grads: &mut Gradients,
    ) -> Result<(), RlError> {
        match action {
            Action::Continuous(a) => {
                let log_std = net.log_std.as_ref().expect("checked in evaluate");
                let mean = &self.cache.output;
                let mut upstream = Vec::with_capacity(a.len());
                let g_std = grads.log_std.as_mut().expect("congruent gradients");
                for j in 0..a.len() {
                    let var = (2.0 * log_std[j]).exp();
                    let diff = a[j] - mean[j];
                    upstream.push(d_log_prob * diff / var);
                    g_std[j] += d_log_prob * (diff * diff / var - 1.0) + d_entropy;
                }
                net.accumulate_backward(&self.cache, &upstream, grads)?;
            }
            Action::Discrete(i) => {
                let p = &self.cache.output;
                let h = self.entropy;
                let delta: Vec<f64> = p
                    .iter()
                    .enumerate()
                    .map(|(k, &pk)| {
                        let onehot = if k == *i { 1.0 } else { 0.0 };
                        let d_h = if pk > 0.0 { -pk * (pk.ln() + h) } else { 0.0 };
                        d_log_prob * (onehot - pk) + d_entropy * d_h
                    })
                    .collect();
                net.accumulate_backward_pre(&self.cache, delta, grads)?;
            }
        }
        Ok(())
    }
}

/// Draws an action and returns it with its log-probability.
pub fn sample_action(
    net: &MlpParams,
    obs: &[f64],
    rng: &mut RngStream,
) -> Result<(Action, f64), RlError> {
    let out = net.forward(obs)?;
    match PolicyKind::of(net)? {
        PolicyKind::Gaussian => {
            let log_std = net.log_std.as_ref().expect("gaussian");
            let a: Vec<f64> = out
                .iter()
                .zip(log_std)
                .map(|(mu, ls)| mu + ls.exp() * rng.standard_normal())
                .collect();
            let lp = gaussian_log_prob(&out, log_std, &a);
            Ok((Action::Continuous(a), lp))
        }
        PolicyKind::Categorical => {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut pick = out.len() - 1;
            for (k, p) in out.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            let logits = net.forward_cached(obs)?;
            let lp = categorical_log_prob(logits.logits(), pick);
            Ok((Action::Discrete(pick), lp))
        }
    }
}

/// Mean action (Gaussian) or most probable index (categorical, ties to lowest).
pub fn greedy_action(net: &MlpParams, obs: &[f64]) -> Result<Action, RlError> {
    let out = net.forward(obs)?;
    Ok(match PolicyKind::of(net)? {
        PolicyKind::Gaussian => Action::Continuous(out),
        PolicyKind::Categorical => {
            let mut best = 0;
            for (k, p) in out.iter().enumerate() {
                if *p > out[best] {
                    best = k;
                }
            }
            Action::Discrete(best)
        }
    })
}

/// Scalar critic output.
pub fn value(critic: &MlpParams, obs: &[f64]) -> Result<f64, RlError> {
    Ok(critic.forward(obs)?[0])
}

/// Probability vector of a categorical actor.
pub fn selection_probs(net: &MlpParams, obs: &[f64]) -> Result<Vec<f64>, RlError> {
    let cache = net.forward_cached(obs)?;
    Ok(categorical_probs(cache.logits()))
}

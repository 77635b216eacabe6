//! Clipped-surrogate loss, its gradients, and the multi-epoch update.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::nn::{AdamState, Gradients, MlpParams};
use crate::sim::RngStream;

use super::policy::{Action, PolicyEval};
use super::{normalize_advantages, ActorCritic, PpoHyper, RlError};

/// One transition ready for optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub observation: Vec<f64>,
    pub action: Action,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub return_to_go: f64,
}

/// Minibatch-averaged loss terms. `total` is the quantity minimized:
/// `-surrogate + vf_coeff * value_loss - entropy_coeff * entropy`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// Diagnostics of one call to [`ppo_update`], averaged over all minibatches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub update: usize,
    pub samples: usize,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

/// Evaluates the loss on `batch` and accumulates its gradients (mean over the
/// batch) into `actor_grads` and `critic_grads`.
pub fn ppo_loss_and_grads(
    nets: &ActorCritic,
    batch: &[&Sample],
    hyper: &PpoHyper,
    actor_grads: &mut Gradients,
    critic_grads: &mut Gradients,
) -> Result<LossBreakdown, RlError> {
    if batch.is_empty() {
        return Err(RlError::Length("empty minibatch".into()));
    }
    let b = batch.len() as f64;
    let mut out = LossBreakdown::default();
    let mut clipped = 0usize;
    for s in batch {
        let eval = PolicyEval::evaluate(&nets.actor, &s.observation, &s.action)?;
        let ratio = (eval.log_prob - s.old_log_prob).exp();
        let unclipped = ratio * s.advantage;
        let bounded = ratio.clamp(1.0 - hyper.clip, 1.0 + hyper.clip) * s.advantage;
        // The gradient flows only through the unclipped branch when it is the minimum.
        let d_logp = if unclipped <= bounded {
            -unclipped / b
        } else {
            0.0
        };
        if (ratio - 1.0).abs() > hyper.clip {
            clipped += 1;
        }
        eval.backward(
            &nets.actor,
            &s.action,
            d_logp,
            -hyper.entropy_coeff / b,
            actor_grads,
        )?;

        let vcache = nets.critic.forward_cached(&s.observation)?;
        let err = vcache.output[0] - s.return_to_go;
        nets.critic.accumulate_backward(
            &vcache,
            &[2.0 * hyper.vf_coeff * err / b],
            critic_grads,
        )?;

        out.surrogate += unclipped.min(bounded) / b;
        out.value_loss += err * err / b;
        out.entropy += eval.entropy / b;
        out.mean_ratio += ratio / b;
    }
    out.clip_fraction = clipped as f64 / b;
    out.total =
        -out.surrogate + hyper.vf_coeff * out.value_loss - hyper.entropy_coeff * out.entropy;
    Ok(out)
}

fn clip_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Optimizer state for an actor-critic pair.
#[derive(Debug, Clone)]
pub struct PpoOptimizer {
    pub actor: AdamState,
    pub critic: AdamState,
    pub updates: usize,
}

impl PpoOptimizer {
    pub fn new(nets: &ActorCritic, stepsize: f64) -> Self {
        Self {
            actor: AdamState::new(&nets.actor, stepsize),
            critic: AdamState::new(&nets.critic, stepsize),
            updates: 0,
        }
    }
}

/// Keeps the Gaussian spread within `[LOG_STD_MIN, LOG_STD_MAX]`. Actions are
/// saturated at the speed limit, so without an upper bound the entropy bonus
/// inflates the spread at no cost in reward.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 0.0;

fn project_log_std(actor: &mut MlpParams) {
    if let Some(s) = &mut actor.log_std {
        s.iter_mut()
            .for_each(|v| *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }
}

fn check_finite(
    net: &MlpParams,
    what: &'static str,
    update: usize,
    epoch: usize,
) -> Result<(), RlError> {
    if net.is_finite() {
        Ok(())
    } else {
        Err(RlError::NonFinite {
            what,
            update,
            epoch,
        })
    }
}

/// Runs `epochs` passes of shuffled minibatch Adam steps on `samples`.
/// Advantages are normalized over the whole batch first.
pub fn ppo_update(
    nets: &mut ActorCritic,
    opt: &mut PpoOptimizer,
    mut samples: Vec<Sample>,
    hyper: &PpoHyper,
    rng: &mut RngStream,
) -> Result<UpdateStats, RlError> {
    if samples.is_empty() {
        return Err(RlError::Length("no samples to update on".into()));
    }
    let update = opt.updates;
    let mut adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
    normalize_advantages(&mut adv);
    for (s, a) in samples.iter_mut().zip(adv) {
        s.advantage = a;
    }

    let mut stats = UpdateStats {
        update,
        samples: samples.len(),
        ..Default::default()
    };
    let mut batches = 0usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut ga = Gradients::zeros_like(&nets.actor);
    let mut gc = Gradients::zeros_like(&nets.critic);
    for epoch in 0..hyper.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(hyper.minibatch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            ga.clear();
            gc.clear();
            let loss = ppo_loss_and_grads(nets, &batch, hyper, &mut ga, &mut gc)?;
            if !loss.total.is_finite() {
                return Err(RlError::NonFinite {
                    what: "loss",
                    update,
                    epoch,
                });
            }
            if !ga.is_finite() || !gc.is_finite() {
                return Err(RlError::NonFinite {
                    what: "gradient",
                    update,
                    epoch,
                });
            }
            stats.actor_grad_norm += clip_norm(&mut ga, hyper.max_grad_norm);
            stats.critic_grad_norm += clip_norm(&mut gc, hyper.max_grad_norm);
            opt.actor.step(&mut nets.actor, &ga)?;
            project_log_std(&mut nets.actor);
            opt.critic.step(&mut nets.critic, &gc)?;
            check_finite(&nets.actor, "actor parameters", update, epoch)?;
            check_finite(&nets.critic, "critic parameters", update, epoch)?;

            stats.surrogate += loss.surrogate;
            stats.value_loss += loss.value_loss;
            stats.entropy += loss.entropy;
            stats.mean_ratio += loss.mean_ratio;
            stats.clip_fraction += loss.clip_fraction;
            batches += 1;
        }
    }
    let n = batches as f64;
    stats.surrogate /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats.mean_ratio /= n;
    stats.clip_fraction /= n;
    stats.actor_grad_norm /= n;
    stats.critic_grad_norm /= n;
    opt.updates += 1;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OutputActivation;

    fn jitter(mut net: MlpParams, rng: &mut RngStream) -> MlpParams {
        for s in net.slices_mut() {
            s.iter_mut().for_each(|v| *v += 0.3 * rng.standard_normal());
        }
        net
    }

    fn nets(seed: u64, gaussian: bool) -> ActorCritic {
        let mut rng = RngStream::new(seed);
        let actor = if gaussian {
            MlpParams::init(&[3, 8, 6, 2], OutputActivation::Tanh, true, 0.5, &mut rng)
        } else {
            MlpParams::init(&[3, 8, 4], OutputActivation::Softmax, false, 0.5, &mut rng)
        };
        let critic = MlpParams::init(&[3, 7, 1], OutputActivation::Linear, false, 1.0, &mut rng);
        ActorCritic {
            actor: jitter(actor, &mut rng),
            critic: jitter(critic, &mut rng),
        }
    }

    fn samples(seed: u64, gaussian: bool, n: usize) -> Vec<Sample> {
        let mut rng = RngStream::new(seed);
        (0..n)
            .map(|i| Sample {
                observation: (0..3).map(|_| rng.standard_normal()).collect(),
                action: if gaussian {
                    Action::Continuous(vec![rng.standard_normal(), rng.standard_normal()])
                } else {
                    Action::Discrete(i % 4)
                },
                old_log_prob: -1.0 + 0.3 * rng.standard_normal(),
                advantage: rng.standard_normal(),
                return_to_go: rng.standard_normal(),
            })
            .collect()
    }

    fn total_loss(nets: &ActorCritic, batch: &[&Sample], hyper: &PpoHyper) -> f64 {
        let mut ga = Gradients::zeros_like(&nets.actor);
        let mut gc = Gradients::zeros_like(&nets.critic);
        ppo_loss_and_grads(nets, batch, hyper, &mut ga, &mut gc)
            .unwrap()
            .total
    }

    fn check_fd(gaussian: bool) {
        let base = nets(1, gaussian);
        let data = samples(2, gaussian, 6);
        let batch: Vec<&Sample> = data.iter().collect();
        // Wide clip keeps every sample on the smooth branch.
        let hyper = PpoHyper {
            clip: 10.0,
            entropy_coeff: 0.07,
            ..PpoHyper::driving()
        };
        let mut ga = Gradients::zeros_like(&base.actor);
        let mut gc = Gradients::zeros_like(&base.critic);
        ppo_loss_and_grads(&base, &batch, &hyper, &mut ga, &mut gc).unwrap();
        let h = 1e-5;
        for (which, analytic) in [(0, ga.flat()), (1, gc.flat())] {
            let flat = if which == 0 {
                base.actor.flat()
            } else {
                base.critic.flat()
            };
            for i in 0..flat.len() {
                let eval = |delta: f64| {
                    let mut n = base.clone();
                    let mut v = flat.clone();
                    v[i] += delta;
                    if which == 0 {
                        n.actor.set_flat(&v)
                    } else {
                        n.critic.set_flat(&v)
                    }
                    .unwrap();
                    total_loss(&n, &batch, &hyper)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
                assert!(
                    err < 1e-4,
                    "net {which} param {i}: fd {fd}, analytic {}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn total_loss_gradient_gaussian() {
        check_fd(true);
    }

    #[test]
    fn total_loss_gradient_categorical() {
        check_fd(false);
    }

    #[test]
    fn first_epoch_gradient_is_vanilla_policy_gradient() {
        let n = nets(3, true);
        let mut data = samples(4, true, 5);
        for s in &mut data {
            s.old_log_prob = PolicyEval::evaluate(&n.actor, &s.observation, &s.action)
                .unwrap()
                .log_prob;
        }
        let batch: Vec<&Sample> = data.iter().collect();
        let hyper = PpoHyper {
            entropy_coeff: 0.0,
            ..PpoHyper::driving()
        };
        let mut ga = Gradients::zeros_like(&n.actor);
        let mut gc = Gradients::zeros_like(&n.critic);
        let loss = ppo_loss_and_grads(&n, &batch, &hyper, &mut ga, &mut gc).unwrap();
        assert!((loss.mean_ratio - 1.0).abs() < 1e-12);
        assert_eq!(loss.clip_fraction, 0.0);

        // -(1/B) sum A_i grad log pi(a_i|s_i)
        let mut pg = Gradients::zeros_like(&n.actor);
        for s in &data {
            let eval = PolicyEval::evaluate(&n.actor, &s.observation, &s.action).unwrap();
            eval.backward(&n.actor, &s.action, -s.advantage / 5.0, 0.0, &mut pg)
                .unwrap();
        }
        for (a, b) in ga.flat().iter().zip(pg.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_advantage_leaves_actor_unchanged() {
        let mut n = nets(5, true);
        // Start from a feasible spread so the projection is a no-op.
        project_log_std(&mut n.actor);
        let before = n.actor.clone();
        // A single sample normalizes to advantage 0.
        let data = samples(6, true, 1);
        let hyper = PpoHyper {
            entropy_coeff: 0.0,
            minibatch_size: 1,
            ..PpoHyper::driving()
        };
        let mut opt = PpoOptimizer::new(&n, hyper.stepsize);
        ppo_update(&mut n, &mut opt, data, &hyper, &mut RngStream::new(0)).unwrap();
        assert_eq!(n.actor, before);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut n = nets(7, false);
            let hyper = PpoHyper {
                minibatch_size: 4,
                epochs: 3,
                ..PpoHyper::selection()
            };
            let mut opt = PpoOptimizer::new(&n, hyper.stepsize);
            let stats = ppo_update(
                &mut n,
                &mut opt,
                samples(8, false, 10),
                &hyper,
                &mut RngStream::new(1),
            )
            .unwrap();
            (n, stats)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        let bits = |n: &ActorCritic| {
            n.actor
                .flat()
                .iter()
                .chain(n.critic.flat().iter())
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(sa, sb);
        assert_ne!(a, nets(7, false));
    }

    #[test]
    fn non_finite_inputs_abort() {
        let mut n = nets(9, true);
        let mut data = samples(10, true, 4);
        data[1].return_to_go = f64::NAN;
        let hyper = PpoHyper {
            minibatch_size: 4,
            ..PpoHyper::driving()
        };
        let mut opt = PpoOptimizer::new(&n, hyper.stepsize);
        let err = ppo_update(&mut n, &mut opt, data, &hyper, &mut RngStream::new(0)).unwrap_err();
        assert!(
            matches!(
                err,
                RlError::NonFinite {
                    update: 0,
                    epoch: 0,
                    ..
                }
            ),
            "{err}"
        );
    }
}

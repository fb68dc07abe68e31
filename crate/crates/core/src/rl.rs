//! Advantage estimation and the clipped surrogate objectives.
//!
//! Two objectives share one policy: a step-level one driven by process rewards
//! and a sequence-level one driven by binary outcomes with a KL penalty toward
//! a frozen reference. Both return their value and an analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{chain_features, PolicyParams, StepFeatures};
use crate::prm::{reward_from_parts, PrmParams};
use crate::types::{Question, Rollout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub group_size: usize,
    pub advantage_floor: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 0.5,
            clip_epsilon: 0.2,
            kl_beta: 0.001,
            group_size: 8,
            advantage_floor: 1e-8,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::Config("clip_epsilon must be > 0".into()));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(Error::Config("kl_beta must be >= 0".into()));
        }
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if !(self.advantage_floor > 0.0) {
            return Err(Error::Config("advantage_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// G rollouts of one question, with per-step feature caches.
#[derive(Debug, Clone)]
pub struct GroupRollouts {
    pub question_id: u64,
    pub rollouts: Vec<Rollout>,
    pub steps: Vec<Vec<StepFeatures>>,
}

impl GroupRollouts {
    pub fn new(question: &Question, rollouts: Vec<Rollout>, d: usize) -> Result<Self> {
        let mut steps = Vec::with_capacity(rollouts.len());
        for r in &rollouts {
            if r.question_id != question.id {
                return Err(Error::InvalidRollout(format!(
                    "rollout for question {} in group {}",
                    r.question_id, question.id
                )));
            }
            steps.push(chain_features(question, &r.steps, d)?);
        }
        Ok(GroupRollouts {
            question_id: question.id,
            rollouts,
            steps,
        })
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn outcome_rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| f64::from(r.outcome_reward)).collect()
    }

    /// Temperature-1 sequence log-probability of each rollout.
    pub fn sequence_logprobs(&self, weights: &[f64]) -> Vec<f64> {
        self.steps
            .iter()
            .map(|chain| chain.iter().map(|s| s.logprob(weights)).sum())
            .collect()
    }

    /// Process rewards of every step under `prm`, judged against `policy`.
    pub fn step_rewards(&self, prm: &PrmParams, policy: &PolicyParams) -> Vec<Vec<f64>> {
        self.steps
            .iter()
            .map(|chain| {
                chain
                    .iter()
                    .map(|s| reward_from_parts(prm.score_features(s.chosen_features()), s.logprob(&policy.weights)))
                    .collect()
            })
            .collect()
    }
}

fn mean_and_pop_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// (r - mean) / (population std + floor). A group with identical rewards
/// yields exact zeros.
pub fn grpo_advantages(outcome_rewards: &[f64], floor: f64) -> Result<Vec<f64>> {
    if outcome_rewards.len() < 2 {
        return Err(Error::GroupTooSmall(outcome_rewards.len()));
    }
    let (mean, std) = mean_and_pop_std(outcome_rewards);
    Ok(outcome_rewards.iter().map(|r| (r - mean) / (std + floor)).collect())
}

/// Reward-to-go minus the group mean of total return, scaled by the
/// population std of total returns plus `floor`.
///
/// When every rollout has the same total return the group carries no relative
/// signal and all advantages are zero.
pub fn airl_advantages_from_rewards(step_rewards: &[Vec<f64>], floor: f64) -> Vec<Vec<f64>> {
    let totals: Vec<f64> = step_rewards.iter().map(|r| r.iter().sum()).collect();
    if totals.is_empty() {
        return Vec::new();
    }
    let (baseline, std) = mean_and_pop_std(&totals);
    if totals.iter().all(|t| *t == totals[0]) {
        return step_rewards.iter().map(|r| vec![0.0; r.len()]).collect();
    }
    let scale = 1.0 / (std + floor);
    step_rewards
        .iter()
        .map(|rewards| {
            let mut rtg = vec![0.0; rewards.len()];
            let mut acc = 0.0;
            for i in (0..rewards.len()).rev() {
                acc += rewards[i];
                rtg[i] = acc;
            }
            rtg.into_iter().map(|g| (g - baseline) * scale).collect()
        })
        .collect()
}

pub fn airl_step_advantages(group: &GroupRollouts, prm: &PrmParams, policy_snapshot: &PolicyParams, floor: f64) -> Vec<Vec<f64>> {
    airl_advantages_from_rewards(&group.step_rewards(prm, policy_snapshot), floor)
}

/// min(r A, clip(r, 1-eps, 1+eps) A)
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the unclipped branch of [`clipped_term`] is the active one, i.e.
/// whether the ratio path carries gradient.
fn ratio_path_active(ratio: f64, advantage: f64, epsilon: f64) -> bool {
    if advantage >= 0.0 {
        ratio <= 1.0 + epsilon
    } else {
        ratio >= 1.0 - epsilon
    }
}

/// k3 estimator with ratio = pi_ref / pi_theta: ratio - log(ratio) - 1.
pub fn kl_k3(logp_theta: f64, logp_ref: f64) -> f64 {
    let x = logp_ref - logp_theta;
    x.exp_m1() - x
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Mean k3 penalty over the group (zero for the step-level objective).
    pub mean_kl: f64,
}

/// Sequence-level clipped surrogate on outcome advantages, minus beta times
/// the k3 penalty, averaged over the group.
pub fn j_grpo(
    group: &GroupRollouts,
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    theta_ref: &PolicyParams,
    config: &ObjectiveConfig,
) -> Result<ObjectiveValue> {
    let adv = grpo_advantages(&group.outcome_rewards(), config.advantage_floor)?;
    let logp_old = group.sequence_logprobs(&theta_old.weights);
    let logp_ref = group.sequence_logprobs(&theta_ref.weights);
    let g = group.len() as f64;
    let mut grad = vec![0.0; theta.d];
    let mut value = 0.0;
    let mut kl_total = 0.0;
    for k in 0..group.len() {
        let logp = group.steps[k].iter().map(|s| s.logprob(&theta.weights)).sum::<f64>();
        if !logp.is_finite() {
            return Err(Error::SupportMismatch(k));
        }
        let ratio = (logp - logp_old[k]).exp();
        let kl = kl_k3(logp, logp_ref[k]);
        value += clipped_term(ratio, adv[k], config.clip_epsilon) - config.kl_beta * kl;
        kl_total += kl;
        // d/dtheta of the per-rollout term, as a multiple of grad log pi(C^k).
        let mut coeff = 0.0;
        if ratio_path_active(ratio, adv[k], config.clip_epsilon) {
            coeff += adv[k] * ratio;
        }
        coeff -= config.kl_beta * -(logp_ref[k] - logp).exp_m1();
        if coeff != 0.0 {
            for s in &group.steps[k] {
                s.accumulate_grad(&theta.weights, coeff / g, &mut grad);
            }
        }
    }
    Ok(ObjectiveValue {
        value: value / g,
        grad,
        mean_kl: kl_total / g,
    })
}

/// Step-level clipped surrogate summed over steps, averaged over rollouts,
/// for advantages that are held fixed with respect to theta.
pub fn j_airl_with_advantages(
    group: &GroupRollouts,
    advantages: &[Vec<f64>],
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    config: &ObjectiveConfig,
) -> Result<ObjectiveValue> {
    let g = group.len() as f64;
    let mut grad = vec![0.0; theta.d];
    let mut value = 0.0;
    for (k, chain) in group.steps.iter().enumerate() {
        for (i, s) in chain.iter().enumerate() {
            let a = advantages[k][i];
            let lp_old = s.logprob(&theta_old.weights);
            let lp = s.logprob(&theta.weights);
            if !lp.is_finite() {
                return Err(Error::SupportMismatch(k));
            }
            let ratio = (lp - lp_old).exp();
            value += clipped_term(ratio, a, config.clip_epsilon);
            if a != 0.0 && ratio_path_active(ratio, a, config.clip_epsilon) {
                s.accumulate_grad(&theta.weights, a * ratio / g, &mut grad);
            }
        }
    }
    Ok(ObjectiveValue {
        value: value / g,
        grad,
        mean_kl: 0.0,
    })
}

/// Step-level objective with advantages from `prm`, judged against the
/// sampling policy `theta_old`.
pub fn j_airl(
    group: &GroupRollouts,
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    prm: &PrmParams,
    config: &ObjectiveConfig,
) -> Result<ObjectiveValue> {
    let adv = airl_step_advantages(group, prm, theta_old, config.advantage_floor);
    j_airl_with_advantages(group, &adv, theta, theta_old, config)
}

/// Both parts of the composite objective.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeValue {
    pub value: f64,
    pub grad: Vec<f64>,
    pub j_airl: Option<f64>,
    pub j_grpo: Option<f64>,
    pub mean_kl: f64,
}

/// lambda * J_airl + (1 - lambda) * J_grpo. At the endpoints only one
/// objective is evaluated, so lambda = 0 never touches the PRM.
pub fn composite_objective(
    group: &GroupRollouts,
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    theta_ref: &PolicyParams,
    prm: &PrmParams,
    config: &ObjectiveConfig,
) -> Result<CompositeValue> {
    let lambda = config.lambda;
    let airl = if lambda > 0.0 {
        Some(j_airl(group, theta, theta_old, prm, config)?)
    } else {
        None
    };
    let grpo = if lambda < 1.0 {
        Some(j_grpo(group, theta, theta_old, theta_ref, config)?)
    } else {
        None
    };
    Ok(combine(lambda, airl, grpo))
}

pub(crate) fn combine(lambda: f64, airl: Option<ObjectiveValue>, grpo: Option<ObjectiveValue>) -> CompositeValue {
    match (airl, grpo) {
        (Some(a), None) => CompositeValue {
            value: a.value,
            j_airl: Some(a.value),
            j_grpo: None,
            mean_kl: 0.0,
            grad: a.grad,
        },
        (None, Some(g)) => CompositeValue {
            value: g.value,
            j_airl: None,
            j_grpo: Some(g.value),
            mean_kl: g.mean_kl,
            grad: g.grad,
        },
        (Some(a), Some(g)) => CompositeValue {
            value: lambda * a.value + (1.0 - lambda) * g.value,
            grad: a
                .grad
                .iter()
                .zip(&g.grad)
                .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
                .collect(),
            j_airl: Some(a.value),
            j_grpo: Some(g.value),
            mean_kl: g.mean_kl,
        },
        (None, None) => unreachable!("lambda selects at least one objective"),
    }
}

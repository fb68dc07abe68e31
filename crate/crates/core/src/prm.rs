//! Learned step scorer, the structured discriminator built on it, and the
//! step-wise process reward it induces.
//!
//! The discriminator compares `exp(f)` with the policy probability of the
//! same step, so the induced reward is `f - log pi`. Every query takes the
//! policy snapshot explicitly; nothing about the policy is cached here.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SparseVec;
use crate::optim::{self, AdamHyper, AdamState};
use crate::policy::{PolicyParams, StepFeatures};
use crate::types::{Question, Step};

#[derive(Debug, Clone, PartialEq)]
pub struct PrmParams {
    pub d: usize,
    pub version: u64,
    pub weights: Vec<f64>,
}

impl PrmParams {
    /// Fresh scalar head over the policy feature space.
    pub fn zeros(d: usize) -> Result<Self> {
        let p = PolicyParams::zeros(d)?;
        Ok(PrmParams {
            d: p.d,
            version: 0,
            weights: p.weights,
        })
    }

    pub fn score_features(&self, features: &SparseVec) -> f64 {
        features.dot(&self.weights)
    }
}

/// f(q, C_{<=i}): the last element of `chain` is the step being scored.
pub fn score_f(prm: &PrmParams, question: &Question, chain: &[Step]) -> Result<f64> {
    let (step, prefix) = chain
        .split_last()
        .ok_or_else(|| Error::IllegalStep("cannot score an empty chain".into()))?;
    let sf = StepFeatures::new(question, prefix, step, prm.d)?;
    Ok(prm.score_features(sf.chosen_features()))
}

fn logaddexp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (-(a - b).abs()).exp().ln_1p()
}

/// `(log D, log(1 - D))` for D = exp(f) / (exp(f) + exp(policy_logprob)).
pub fn log_discriminator(f: f64, policy_logprob: f64) -> (f64, f64) {
    let norm = logaddexp(f, policy_logprob);
    (f - norm, policy_logprob - norm)
}

pub fn discriminator(f: f64, policy_logprob: f64) -> f64 {
    log_discriminator(f, policy_logprob).0.exp()
}

/// log(D / (1 - D)) evaluated through the identity f - log pi.
pub fn reward_from_parts(f: f64, policy_logprob: f64) -> f64 {
    f - policy_logprob
}

pub fn step_reward(prm: &PrmParams, policy: &PolicyParams, question: &Question, prefix: &[Step], step: &Step) -> Result<f64> {
    check_dims(prm, policy)?;
    let sf = StepFeatures::new(question, prefix, step, prm.d)?;
    Ok(reward_from_parts(
        prm.score_features(sf.chosen_features()),
        sf.logprob(&policy.weights),
    ))
}

/// Rewards for every step of a chain.
pub fn chain_rewards(prm: &PrmParams, policy: &PolicyParams, question: &Question, steps: &[Step]) -> Result<Vec<f64>> {
    check_dims(prm, policy)?;
    (0..steps.len())
        .map(|i| {
            let sf = StepFeatures::new(question, &steps[..i], &steps[i], prm.d)?;
            Ok(reward_from_parts(
                prm.score_features(sf.chosen_features()),
                sf.logprob(&policy.weights),
            ))
        })
        .collect()
}

fn check_dims(prm: &PrmParams, policy: &PolicyParams) -> Result<()> {
    if prm.d != policy.d {
        return Err(Error::DimensionMismatch(format!("prm d={} policy d={}", prm.d, policy.d)));
    }
    Ok(())
}

/// One step as the discriminator sees it: its scorer features and its
/// temperature-1 log-probability under the policy being discriminated.
#[derive(Debug, Clone)]
pub struct DiscriminatorSample {
    pub features: SparseVec,
    pub policy_logprob: f64,
}

impl DiscriminatorSample {
    pub fn new(policy: &PolicyParams, question: &Question, prefix: &[Step], step: &Step) -> Result<Self> {
        let sf = StepFeatures::new(question, prefix, step, policy.d)?;
        Ok(Self::from_step_features(&sf, policy))
    }

    pub fn from_step_features(sf: &StepFeatures, policy: &PolicyParams) -> Self {
        DiscriminatorSample {
            features: sf.chosen_features().clone(),
            policy_logprob: sf.logprob(&policy.weights),
        }
    }

    pub fn every_step(policy: &PolicyParams, question: &Question, steps: &[Step]) -> Result<Vec<Self>> {
        (0..steps.len())
            .map(|i| Self::new(policy, question, &steps[..i], &steps[i]))
            .collect()
    }
}

/// Per-step average of -log D over reference steps plus per-step average of
/// -log(1 - D) over policy steps.
pub fn airl_loss(prm: &PrmParams, expert: &[DiscriminatorSample], policy: &[DiscriminatorSample]) -> Result<f64> {
    if expert.is_empty() || policy.is_empty() {
        return Err(Error::EmptyInput("discriminator batch"));
    }
    let e: f64 = expert
        .iter()
        .map(|s| -log_discriminator(prm.score_features(&s.features), s.policy_logprob).0)
        .sum::<f64>()
        / expert.len() as f64;
    let p: f64 = policy
        .iter()
        .map(|s| -log_discriminator(prm.score_features(&s.features), s.policy_logprob).1)
        .sum::<f64>()
        / policy.len() as f64;
    Ok(e + p)
}

/// Dense gradient of [`airl_loss`] with respect to the scorer weights.
pub fn airl_loss_grad(prm: &PrmParams, expert: &[DiscriminatorSample], policy: &[DiscriminatorSample]) -> Result<Vec<f64>> {
    if expert.is_empty() || policy.is_empty() {
        return Err(Error::EmptyInput("discriminator batch"));
    }
    let mut grad = vec![0.0; prm.d];
    let we = 1.0 / expert.len() as f64;
    for s in expert {
        let d = discriminator(prm.score_features(&s.features), s.policy_logprob);
        s.features.add_scaled_to(-(1.0 - d) * we, &mut grad);
    }
    let wp = 1.0 / policy.len() as f64;
    for s in policy {
        let d = discriminator(prm.score_features(&s.features), s.policy_logprob);
        s.features.add_scaled_to(d * wp, &mut grad);
    }
    Ok(grad)
}

/// One descent step on the discriminator loss.
pub fn prm_update(prm: &mut PrmParams, grad: &[f64], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    if grad.len() != prm.d {
        return Err(Error::DimensionMismatch(format!("gradient has {} entries, prm d={}", grad.len(), prm.d)));
    }
    optim::step(&mut prm.weights, grad, state, hyper)?;
    prm.version += 1;
    Ok(())
}

/// A trained scorer bundled with the policy snapshot its rewards are
/// evaluated against at search time.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub prm: PrmParams,
    pub frozen_policy: PolicyParams,
    pub metadata: BTreeMap<String, String>,
}

const PRM_FORMAT: &str = "airls-prm";

#[derive(Serialize, Deserialize)]
struct PrmCheckpoint {
    format: String,
    format_version: u32,
    d: usize,
    version: u64,
    #[serde(with = "crate::numfmt::vec")]
    weights: Vec<f64>,
    frozen_policy_version: u64,
    #[serde(with = "crate::numfmt::vec")]
    frozen_policy_weights: Vec<f64>,
    training_metadata: BTreeMap<String, String>,
}

impl RewardModel {
    pub fn new(prm: PrmParams, frozen_policy: PolicyParams) -> Result<Self> {
        check_dims(&prm, &frozen_policy)?;
        Ok(RewardModel {
            prm,
            frozen_policy,
            metadata: BTreeMap::new(),
        })
    }

    pub fn step_reward(&self, question: &Question, prefix: &[Step], step: &Step) -> Result<f64> {
        step_reward(&self.prm, &self.frozen_policy, question, prefix, step)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = PrmCheckpoint {
            format: PRM_FORMAT.into(),
            format_version: 1,
            d: self.prm.d,
            version: self.prm.version,
            weights: self.prm.weights.clone(),
            frozen_policy_version: self.frozen_policy.version,
            frozen_policy_weights: self.frozen_policy.weights.clone(),
            training_metadata: self.metadata.clone(),
        };
        std::fs::write(path, serde_json::to_string(&ckpt)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: PrmCheckpoint =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if c.format != PRM_FORMAT || c.format_version != 1 {
            return Err(Error::Format(format!("{}: not a PRM checkpoint", path.display())));
        }
        if c.weights.len() != c.d || c.frozen_policy_weights.len() != c.d {
            return Err(Error::DimensionMismatch(format!("{}: inconsistent dimensions", path.display())));
        }
        let mut prm = PrmParams::zeros(c.d)?;
        if c.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Diverged("prm weight"));
        }
        prm.weights = c.weights;
        prm.version = c.version;
        let policy = PolicyParams::from_weights(c.frozen_policy_weights, c.frozen_policy_version)?;
        Ok(RewardModel {
            prm,
            frozen_policy: policy,
            metadata: c.training_metadata,
        })
    }
}

//! Linear softmax step policy over hashed features.
//!
//! Training-time log-probabilities are always taken at temperature 1; the
//! sampling temperature only affects which chains get generated.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, ActionCandidate, EnvSpec};
use crate::error::{Error, Result};
use crate::features::{candidate_features, featurize_at, SparseVec};
use crate::types::{Question, Rollout, Step};

pub const DEFAULT_DIM: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub d: usize,
    pub version: u64,
    pub weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(d: usize) -> Result<Self> {
        if d == 0 || !d.is_power_of_two() {
            return Err(Error::Config(format!("feature dimension {d} must be a power of two")));
        }
        Ok(PolicyParams {
            d,
            version: 0,
            weights: vec![0.0; d],
        })
    }

    pub fn from_weights(weights: Vec<f64>, version: u64) -> Result<Self> {
        let mut p = Self::zeros(weights.len())?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Diverged("policy weight"));
        }
        p.weights = weights;
        p.version = version;
        Ok(p)
    }

    pub fn logits(&self, feats: &[SparseVec]) -> Vec<f64> {
        feats.iter().map(|f| f.dot(&self.weights)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = PolicyCheckpoint {
            format: POLICY_FORMAT.into(),
            format_version: 1,
            d: self.d,
            version: self.version,
            weights: self.weights.clone(),
        };
        let text = serde_json::to_string(&ckpt)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: PolicyCheckpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if ckpt.format != POLICY_FORMAT || ckpt.format_version != 1 {
            return Err(Error::Format(format!("{}: not a policy checkpoint", path.display())));
        }
        if ckpt.weights.len() != ckpt.d {
            return Err(Error::DimensionMismatch(format!("d={} but {} weights", ckpt.d, ckpt.weights.len())));
        }
        Self::from_weights(ckpt.weights, ckpt.version)
    }
}

const POLICY_FORMAT: &str = "airls-policy";

#[derive(Serialize, Deserialize)]
struct PolicyCheckpoint {
    format: String,
    format_version: u32,
    d: usize,
    version: u64,
    #[serde(with = "crate::numfmt::vec")]
    weights: Vec<f64>,
}

pub(crate) fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Probabilities of candidates with the given logits. Candidates are assumed
/// to be ordered by action id, so temperature 0 breaks ties to the lowest id.
pub fn distribution_from_logits(logits: &[f64], temperature: f64) -> Vec<f64> {
    assert!(!logits.is_empty(), "at least one candidate");
    if temperature <= 0.0 {
        let mut p = vec![0.0; logits.len()];
        p[argmax_lowest(logits)] = 1.0;
        return p;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Natural-log probabilities at `temperature` (> 0).
pub fn log_distribution_from_logits(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|z| (z - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

pub fn step_distribution(
    params: &PolicyParams,
    question: &Question,
    prefix: &[Step],
    temperature: f64,
) -> Result<(Vec<ActionCandidate>, Vec<f64>)> {
    let (cands, feats) = candidate_features(question, prefix, params.d)?;
    let probs = distribution_from_logits(&params.logits(&feats), temperature);
    Ok((cands, probs))
}

/// Features of every candidate at one position plus the index of the step
/// actually taken. Enough to evaluate log pi and its gradient for any weights.
#[derive(Debug, Clone)]
pub struct StepFeatures {
    pub feats: Vec<SparseVec>,
    pub chosen: usize,
}

impl StepFeatures {
    pub fn new(question: &Question, prefix: &[Step], step: &Step, d: usize) -> Result<Self> {
        let (cands, feats) = candidate_features(question, prefix, d)?;
        let chosen = cands
            .iter()
            .position(|c| &c.step == step)
            .ok_or_else(|| Error::IllegalStep(format!("{step:?} at position {}", prefix.len())))?;
        Ok(StepFeatures { feats, chosen })
    }

    /// Temperature-1 log-probability of the chosen step.
    pub fn logprob(&self, weights: &[f64]) -> f64 {
        let logits: Vec<f64> = self.feats.iter().map(|f| f.dot(weights)).collect();
        log_distribution_from_logits(&logits, 1.0)[self.chosen]
    }

    /// `grad += scale * d/dw log pi(chosen)`; returns log pi(chosen).
    pub fn accumulate_grad(&self, weights: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
        let logits: Vec<f64> = self.feats.iter().map(|f| f.dot(weights)).collect();
        let logp = log_distribution_from_logits(&logits, 1.0);
        if scale != 0.0 {
            self.feats[self.chosen].add_scaled_to(scale, grad);
            for (f, lp) in self.feats.iter().zip(&logp) {
                f.add_scaled_to(-scale * lp.exp(), grad);
            }
        }
        logp[self.chosen]
    }

    pub fn chosen_features(&self) -> &SparseVec {
        &self.feats[self.chosen]
    }
}

/// Per-step caches for a whole chain.
pub fn chain_features(question: &Question, steps: &[Step], d: usize) -> Result<Vec<StepFeatures>> {
    (0..steps.len())
        .map(|i| StepFeatures::new(question, &steps[..i], &steps[i], d))
        .collect()
}

pub fn logprob_step(params: &PolicyParams, question: &Question, prefix: &[Step], step: &Step) -> Result<f64> {
    Ok(StepFeatures::new(question, prefix, step, params.d)?.logprob(&params.weights))
}

/// Sparse gradient of log pi(step) with respect to the weights:
/// phi(step) - sum_a pi(a) phi(a).
pub fn grad_logprob(params: &PolicyParams, question: &Question, prefix: &[Step], step: &Step) -> Result<SparseVec> {
    let sf = StepFeatures::new(question, prefix, step, params.d)?;
    let logits = params.logits(&sf.feats);
    let probs = distribution_from_logits(&logits, 1.0);
    let mut pairs: Vec<(u32, f64)> = sf.feats[sf.chosen]
        .indices
        .iter()
        .copied()
        .zip(sf.feats[sf.chosen].values.iter().copied())
        .collect();
    for (f, p) in sf.feats.iter().zip(&probs) {
        pairs.extend(f.indices.iter().copied().zip(f.values.iter().map(|v| -p * v)));
    }
    let mut g = SparseVec::from_pairs(pairs);
    // Cancellation leaves round-off dust; keep the support exact.
    let keep: Vec<bool> = g.values.iter().map(|v| v.abs() > 1e-15).collect();
    let mut it = keep.iter();
    g.indices.retain(|_| *it.next().expect("aligned"));
    g.values.retain(|v| v.abs() > 1e-15);
    Ok(g)
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Round-off: fall back to the last candidate with positive mass.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Samples one step at `prefix`. Temperature 0 consumes no randomness.
pub fn sample_step<R: Rng + ?Sized>(
    params: &PolicyParams,
    question: &Question,
    prefix: &[Step],
    temperature: f64,
    rng: &mut R,
) -> Result<(Step, f64)> {
    let (cands, feats) = candidate_features(question, prefix, params.d)?;
    let logits = params.logits(&feats);
    if temperature <= 0.0 {
        let i = argmax_lowest(&logits);
        return Ok((cands[i].step.clone(), 0.0));
    }
    let logp = log_distribution_from_logits(&logits, temperature);
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let i = draw(&probs, rng);
    Ok((cands[i].step.clone(), logp[i].min(0.0)))
}

/// Completes `prefix` into a full chain.
pub fn complete_chain<R: Rng + ?Sized>(
    params: &PolicyParams,
    spec: &EnvSpec,
    question: &Question,
    prefix: Vec<Step>,
    prefix_logprobs: Vec<f64>,
    temperature: f64,
    rng: &mut R,
) -> Result<Rollout> {
    let mut steps = prefix;
    let mut logprobs = prefix_logprobs;
    let mut truncated = false;
    while !steps.last().is_some_and(|s| s.is_terminal) {
        if steps.len() >= spec.max_steps {
            steps.push(forced_terminal(params, question, &steps)?);
            logprobs.push(0.0);
            truncated = true;
            break;
        }
        let (step, lp) = sample_step(params, question, &steps, temperature, rng)?;
        steps.push(step);
        logprobs.push(lp);
    }
    let mut rollout = Rollout {
        question_id: question.id,
        steps,
        step_logprobs: logprobs,
        outcome_reward: 0,
        prm_rewards: None,
        truncated,
    };
    env::score_rollout(question, &mut rollout)?;
    Ok(rollout)
}

/// Argmax answer declaration used when a chain runs out of steps.
fn forced_terminal(params: &PolicyParams, question: &Question, prefix: &[Step]) -> Result<Step> {
    let ctx = env::context(question, prefix)?;
    let cands: Vec<ActionCandidate> = env::answer_space(question)
        .into_iter()
        .enumerate()
        .map(|(i, a)| ActionCandidate {
            action_id: i as u32,
            step: Step::terminal(i as u32, a),
            token: a,
        })
        .collect();
    let feats: Vec<SparseVec> = cands.iter().map(|c| featurize_at(&ctx, c, params.d)).collect();
    let i = argmax_lowest(&params.logits(&feats));
    Ok(cands[i].step.clone())
}

pub fn sample_chain<R: Rng + ?Sized>(
    params: &PolicyParams,
    spec: &EnvSpec,
    question: &Question,
    temperature: f64,
    rng: &mut R,
) -> Result<Rollout> {
    complete_chain(params, spec, question, Vec::new(), Vec::new(), temperature, rng)
}

/// Temperature-0 rollout.
pub fn greedy_chain(params: &PolicyParams, spec: &EnvSpec, question: &Question) -> Result<Rollout> {
    let mut unused = crate::rng::stream(0, "greedy", &[]);
    sample_chain(params, spec, question, 0.0, &mut unused)
}

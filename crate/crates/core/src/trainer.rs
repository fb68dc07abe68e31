//! The alternating training loop: discriminator step, policy step, old-policy
//! refresh and buffer growth, once per iteration.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::ReplayBuffer;
use crate::env::{self, EnvSpec};
use crate::error::{Error, Result};
use crate::optim::{self, AdamHyper, AdamState};
use crate::policy::{self, PolicyParams};
use crate::prm::{self, DiscriminatorSample, PrmParams, RewardModel};
use crate::rl::{self, GroupRollouts, ObjectiveConfig};
use crate::rng::stream;
use crate::types::{Question, Rollout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub seed: u64,
    pub env: EnvSpec,
    pub dim: usize,
    pub iterations: usize,
    pub batch_questions: usize,
    pub seed_rollouts: usize,
    pub objective: ObjectiveConfig,
    pub policy_lr: f64,
    pub prm_lr: f64,
    pub rollout_temperature: f64,
    pub buffer_capacity: usize,
    pub per_question_cap: usize,
    pub eval_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            seed: 0,
            env: EnvSpec::default_arithmetic(),
            dim: policy::DEFAULT_DIM,
            iterations: 300,
            batch_questions: 64,
            seed_rollouts: 64,
            objective: ObjectiveConfig::default(),
            policy_lr: 0.05,
            prm_lr: 0.02,
            rollout_temperature: 0.7,
            buffer_capacity: 65_536,
            per_question_cap: crate::buffer::DEFAULT_PER_QUESTION_CAP,
            eval_every: 50,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.objective.validate()?;
        PolicyParams::zeros(self.dim)?;
        if self.batch_questions == 0 || self.seed_rollouts == 0 {
            return Err(Error::Config("batch_questions and seed_rollouts must be positive".into()));
        }
        if !(self.policy_lr > 0.0 && self.prm_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.rollout_temperature >= 0.0) {
            return Err(Error::Config("rollout temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub config: TrainerConfig,
    pub theta: PolicyParams,
    pub theta_old: PolicyParams,
    pub theta_ref: PolicyParams,
    pub prm: PrmParams,
    pub buffer: ReplayBuffer,
    pub iteration: usize,
    pub policy_opt: AdamState,
    pub prm_opt: AdamState,
    pub questions: BTreeMap<u64, Question>,
    /// Questions with no correct rollout after buffer seeding.
    pub uncovered: Vec<u64>,
}

impl TrainerState {
    pub fn coverage(&self) -> f64 {
        let n = self.questions.len();
        (n - self.uncovered.len()) as f64 / n as f64
    }

    /// Trained scorer bundled with the current policy as its frozen snapshot.
    pub fn reward_model(&self) -> RewardModel {
        let mut rm = RewardModel::new(self.prm.clone(), self.theta.clone()).expect("dimensions agree");
        rm.metadata.insert("iteration".into(), self.iteration.to_string());
        rm.metadata.insert("seed".into(), self.config.seed.to_string());
        rm.metadata.insert("lambda".into(), self.config.objective.lambda.to_string());
        rm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub train_accuracy: f64,
    pub mean_length: f64,
    pub airl_loss: f64,
    pub j_grpo: Option<f64>,
    pub j_airl: Option<f64>,
    pub mean_kl: f64,
    pub buffer_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub iteration: usize,
    pub accuracy: f64,
    pub mean_length: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Train(IterationMetrics),
    Eval(EvalMetrics),
}

/// Zero-initialized policy, reference and old policy, a fresh scorer head, and
/// a buffer seeded with the correct rollouts among `seed_rollouts` samples
/// per question.
pub fn init_run(config: TrainerConfig, question_set: &[Question]) -> Result<TrainerState> {
    config.validate()?;
    if question_set.is_empty() {
        return Err(Error::EmptyInput("training question set"));
    }
    let theta = PolicyParams::zeros(config.dim)?;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity, config.per_question_cap)?;
    let seeded: Vec<Vec<Rollout>> = question_set
        .par_iter()
        .map(|q| {
            let mut rng = stream(config.seed, "seed-buffer", &[q.id]);
            (0..config.seed_rollouts)
                .map(|_| policy::sample_chain(&theta, &config.env, q, config.rollout_temperature, &mut rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut uncovered = Vec::new();
    for (q, rollouts) in question_set.iter().zip(seeded) {
        let mut any = false;
        for r in rollouts {
            if r.is_correct() {
                any = true;
                buffer.insert(r);
            }
        }
        if !any {
            uncovered.push(q.id);
        }
    }
    if buffer.is_empty() {
        return Err(Error::UnlearnableSeed);
    }
    let questions = question_set.iter().map(|q| (q.id, q.clone())).collect();
    Ok(TrainerState {
        theta_old: theta.clone(),
        theta_ref: theta.clone(),
        prm: PrmParams::zeros(config.dim)?,
        policy_opt: AdamState::new(config.dim),
        prm_opt: AdamState::new(config.dim),
        theta,
        buffer,
        iteration: 0,
        questions,
        uncovered,
        config,
    })
}

struct Batch {
    group: GroupRollouts,
    expert: Vec<DiscriminatorSample>,
    policy: Vec<DiscriminatorSample>,
}

pub fn train_iteration(state: &mut TrainerState) -> Result<IterationMetrics> {
    let cfg = state.config.clone();
    let iter = state.iteration as u64 + 1;
    let qids = state
        .buffer
        .sample_questions(cfg.batch_questions, &mut stream(cfg.seed, "batch", &[iter]))?;
    let g = cfg.objective.group_size;

    let batches: Vec<Batch> = qids
        .par_iter()
        .map(|qid| {
            let q = state
                .questions
                .get(qid)
                .ok_or_else(|| Error::Format(format!("buffer references unknown question {qid}")))?;
            let mut rng = stream(cfg.seed, "rollout", &[iter, *qid]);
            let rollouts = (0..g)
                .map(|_| policy::sample_chain(&state.theta_old, &cfg.env, q, cfg.rollout_temperature, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let refs = state
                .buffer
                .sample_reference(*qid, g, &mut stream(cfg.seed, "reference", &[iter, *qid]))?;
            let group = GroupRollouts::new(q, rollouts, cfg.dim)?;
            let mut expert = Vec::new();
            for r in refs {
                expert.extend(DiscriminatorSample::every_step(&state.theta, q, &r.steps)?);
            }
            let policy: Vec<DiscriminatorSample> = group
                .steps
                .iter()
                .flatten()
                .map(|s| DiscriminatorSample::from_step_features(s, &state.theta))
                .collect();
            Ok(Batch { group, expert, policy })
        })
        .collect::<Result<_>>()?;

    // Discriminator step on balanced step counts.
    let mut expert: Vec<DiscriminatorSample> = batches.iter().flat_map(|b| b.expert.iter().cloned()).collect();
    let mut pol: Vec<DiscriminatorSample> = batches.iter().flat_map(|b| b.policy.iter().cloned()).collect();
    let n = expert.len().min(pol.len());
    expert.truncate(n);
    pol.truncate(n);
    let airl_loss = prm::airl_loss(&state.prm, &expert, &pol)?;
    let prm_grad = prm::airl_loss_grad(&state.prm, &expert, &pol)?;
    prm::prm_update(&mut state.prm, &prm_grad, &mut state.prm_opt, &AdamHyper::with_lr(cfg.prm_lr))?;

    // Policy step ascending the composite objective, averaged over groups.
    let per_group: Vec<rl::CompositeValue> = batches
        .par_iter()
        .map(|b| {
            rl::composite_objective(
                &b.group,
                &state.theta,
                &state.theta_old,
                &state.theta_ref,
                &state.prm,
                &cfg.objective,
            )
        })
        .collect::<Result<_>>()?;
    let nb = per_group.len() as f64;
    let mut grad = vec![0.0; cfg.dim];
    let (mut j_airl, mut j_grpo) = (0.0, 0.0);
    for c in &per_group {
        for (acc, x) in grad.iter_mut().zip(&c.grad) {
            *acc -= x / nb;
        }
        j_airl += c.j_airl.unwrap_or(0.0) / nb;
        j_grpo += c.j_grpo.unwrap_or(0.0) / nb;
    }
    let mut kl = 0.0;
    let mut correct = 0usize;
    let mut steps = 0usize;
    let mut count = 0usize;
    for b in &batches {
        let lp = b.group.sequence_logprobs(&state.theta.weights);
        let lr = b.group.sequence_logprobs(&state.theta_ref.weights);
        for k in 0..b.group.len() {
            kl += rl::kl_k3(lp[k], lr[k]);
            correct += usize::from(b.group.rollouts[k].is_correct());
            steps += b.group.rollouts[k].len();
            count += 1;
        }
    }
    optim::step(&mut state.theta.weights, &grad, &mut state.policy_opt, &AdamHyper::with_lr(cfg.policy_lr))?;
    state.theta.version += 1;
    state.theta_old = state.theta.clone();

    for b in batches {
        let q = &state.questions[&b.group.question_id];
        for r in b.group.rollouts {
            if env::check_answer(q, &r.steps)? == 1 && r.is_correct() {
                state.buffer.insert(r);
            }
        }
    }
    state.iteration += 1;
    let lambda = cfg.objective.lambda;
    Ok(IterationMetrics {
        iteration: state.iteration,
        train_accuracy: correct as f64 / count as f64,
        mean_length: steps as f64 / count as f64,
        airl_loss,
        j_grpo: (lambda < 1.0).then_some(j_grpo),
        j_airl: (lambda > 0.0).then_some(j_airl),
        mean_kl: kl / count as f64,
        buffer_size: state.buffer.len(),
    })
}

/// Temperature-0 accuracy and mean chain length.
pub fn evaluate(policy: &PolicyParams, spec: &EnvSpec, questions: &[Question]) -> Result<(f64, f64)> {
    if questions.is_empty() {
        return Err(Error::EmptyInput("evaluation question set"));
    }
    let results: Vec<(u8, usize)> = questions
        .par_iter()
        .map(|q| policy::greedy_chain(policy, spec, q).map(|r| (r.outcome_reward, r.len())))
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    let acc = results.iter().map(|r| f64::from(r.0)).sum::<f64>() / n;
    let len = results.iter().map(|r| r.1 as f64).sum::<f64>() / n;
    Ok((acc, len))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub iterations: Vec<IterationMetrics>,
    pub evals: Vec<EvalMetrics>,
}

/// Where a run persists its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dir: PathBuf,
}

impl RunOutputs {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn policy_checkpoint(&self, tag: &str) -> PathBuf {
        self.checkpoint_dir().join(format!("policy-{tag}.json"))
    }

    pub fn prm_checkpoint(&self, tag: &str) -> PathBuf {
        self.checkpoint_dir().join(format!("prm-{tag}.json"))
    }

    pub fn buffer_path(&self) -> PathBuf {
        self.dir.join("buffer.jsonl")
    }
}

fn write_checkpoints(state: &TrainerState, out: &RunOutputs, tag: &str) -> Result<()> {
    state.theta.save(&out.policy_checkpoint(tag))?;
    state.reward_model().save(&out.prm_checkpoint(tag))
}

fn append_record(w: &mut impl Write, rec: &MetricRecord, path: &Path) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs `iterations` loop bodies, evaluating on `validation` at iteration 0,
/// every `eval_every` iterations and at the end. With `outputs`, writes the
/// metrics log, checkpoints at each evaluation and at the end, and the buffer.
pub fn run(
    state: &mut TrainerState,
    iterations: usize,
    validation: &[Question],
    eval_every: usize,
    outputs: Option<&RunOutputs>,
) -> Result<RunLog> {
    if iterations == 0 {
        return Err(Error::Config("iteration count must be >= 1".into()));
    }
    let mut metrics_file = match outputs {
        Some(out) => {
            std::fs::create_dir_all(out.checkpoint_dir()).map_err(|e| Error::io(out.checkpoint_dir(), e))?;
            let path = out.metrics_path();
            Some((
                std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?),
                path,
            ))
        }
        None => None,
    };
    let mut log = RunLog::default();
    let spec = state.config.env.clone();
    let do_eval = |state: &TrainerState, log: &mut RunLog, file: &mut Option<(std::io::BufWriter<std::fs::File>, PathBuf)>| -> Result<()> {
        if validation.is_empty() {
            return Ok(());
        }
        let (accuracy, mean_length) = evaluate(&state.theta, &spec, validation)?;
        let rec = EvalMetrics {
            iteration: state.iteration,
            accuracy,
            mean_length,
        };
        if let Some((w, path)) = file.as_mut() {
            append_record(w, &MetricRecord::Eval(rec.clone()), path)?;
        }
        if let Some(out) = outputs {
            write_checkpoints(state, out, &format!("iter{:05}", state.iteration))?;
        }
        log.evals.push(rec);
        Ok(())
    };
    do_eval(state, &mut log, &mut metrics_file)?;
    for _ in 0..iterations {
        let m = train_iteration(state)?;
        if let Some((w, path)) = metrics_file.as_mut() {
            append_record(w, &MetricRecord::Train(m.clone()), path)?;
        }
        log.iterations.push(m);
        let last = log.iterations.len() == iterations;
        if (eval_every > 0 && state.iteration.is_multiple_of(eval_every)) || last {
            do_eval(state, &mut log, &mut metrics_file)?;
        }
    }
    if let Some(out) = outputs {
        write_checkpoints(state, out, "final")?;
        state.buffer.save(&out.buffer_path())?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_question_set;

    fn tiny() -> TrainerConfig {
        TrainerConfig {
            batch_questions: 8,
            seed_rollouts: 16,
            iterations: 3,
            dim: 1024,
            ..Default::default()
        }
    }

    #[test]
    fn init_state_invariants() {
        let qs = generate_question_set(&EnvSpec::default_arithmetic(), 1, 0, 20).unwrap();
        let s = init_run(tiny(), &qs).unwrap();
        assert_eq!(s.theta, s.theta_ref);
        assert_eq!(s.theta, s.theta_old);
        assert!(s.buffer.entries().iter().all(|r| r.is_correct()));
        assert!(s.coverage() > 0.5);
        assert!(init_run(tiny(), &[]).is_err());
    }

    #[test]
    fn trivially_solvable_question_is_covered() {
        let spec = EnvSpec::arithmetic(2, 2, vec![crate::types::Operator::Add]);
        let qs = generate_question_set(&spec, 3, 0, 1).unwrap();
        let cfg = TrainerConfig { env: spec, ..tiny() };
        let s = init_run(cfg, &qs).unwrap();
        assert_eq!(s.coverage(), 1.0);
    }

    #[test]
    fn iterations_keep_invariants() {
        let qs = generate_question_set(&EnvSpec::default_arithmetic(), 1, 0, 20).unwrap();
        let mut s = init_run(tiny(), &qs).unwrap();
        let reference = s.theta_ref.clone();
        let mut size = s.buffer.len();
        for i in 1..=3 {
            let m = train_iteration(&mut s).unwrap();
            assert_eq!(m.iteration, i);
            assert!(m.buffer_size >= size);
            size = m.buffer_size;
            assert_eq!(s.theta_old, s.theta);
            assert_eq!(s.theta_ref, reference);
            assert!(s.buffer.entries().iter().all(|r| r.is_correct()));
        }
    }

    #[test]
    fn grpo_only_skips_process_advantages() {
        let qs = generate_question_set(&EnvSpec::default_arithmetic(), 1, 0, 10).unwrap();
        let mut cfg = tiny();
        cfg.objective.lambda = 0.0;
        let mut s = init_run(cfg, &qs).unwrap();
        let m = train_iteration(&mut s).unwrap();
        assert!(m.j_airl.is_none());
        assert!(m.j_grpo.is_some());
        assert_eq!(s.prm.version, 1);
    }

    #[test]
    fn zero_iterations_rejected() {
        let qs = generate_question_set(&EnvSpec::default_arithmetic(), 1, 0, 5).unwrap();
        let mut s = init_run(tiny(), &qs).unwrap();
        assert!(run(&mut s, 0, &[], 1, None).is_err());
    }
}

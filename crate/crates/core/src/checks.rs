//! Self-checks that compare the implementation against the oracles and
//! closed forms. Each check yields one pass/fail record with the measured
//! quantity and the tolerance it was judged against.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{generate_question_set, EnvSpec};
use crate::error::Result;
use crate::features::SparseVec;
use crate::optim::{AdamHyper, AdamState};
use crate::oracle::{self, enumerate_all_chains, exact_best_of_n_accuracy, finite_difference_grad};
use crate::policy::{self, PolicyParams, StepFeatures};
use crate::prm::{self, DiscriminatorSample, PrmParams};
use crate::rl::{self, GroupRollouts, ObjectiveConfig};
use crate::rng::stream;
use crate::search::{self, AnswerAgg, Aggregation, CandidateSolution, OracleScorer, SearchConfig, StepAgg};
use crate::types::{Operator, Question};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub check: String,
    pub passed: bool,
    #[serde(with = "crate::numfmt")]
    pub measured: f64,
    #[serde(with = "crate::numfmt")]
    pub tolerance: f64,
    pub detail: String,
}

impl CheckRecord {
    fn new(check: &str, passed: bool, measured: f64, tolerance: f64, detail: String) -> Self {
        CheckRecord {
            check: check.to_string(),
            passed,
            measured,
            tolerance,
            detail,
        }
    }
}

fn random_weights(d: usize, scale: f64, seed: u64, purpose: &str) -> Vec<f64> {
    let mut rng = stream(seed, purpose, &[]);
    (0..d).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm = na.max(nb);
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

/// log(D / (1 - D)) against f - log pi over random pairs.
pub fn reward_identity(seed: u64, pairs: usize) -> CheckRecord {
    let mut rng = stream(seed, "check-reward", &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let f = rng.random_range(-50.0..=50.0);
        let lp = rng.random_range(-50.0..=0.0);
        let (log_d, log_1md) = prm::log_discriminator(f, lp);
        worst = worst.max((log_d - log_1md - prm::reward_from_parts(f, lp)).abs());
    }
    CheckRecord::new("reward-identity", worst < 1e-9, worst, 1e-9, format!("{pairs} pairs, |f|<=50, -50<=log pi<=0"))
}

struct GradInstance {
    question: Question,
    group: GroupRollouts,
    old: PolicyParams,
    theta: PolicyParams,
    reference: PolicyParams,
    prm: PrmParams,
}

fn grad_instance(seed: u64) -> Result<GradInstance> {
    let d = 64;
    let spec = EnvSpec::arithmetic(5, 3, vec![Operator::Add, Operator::Mul]);
    let question = generate_question_set(&spec, seed, 0, 1)?.remove(0);
    let old = PolicyParams::from_weights(random_weights(d, 0.6, seed, "grad-old"), 0)?;
    let nudge = |scale: f64, purpose: &str| -> Result<PolicyParams> {
        let w = old
            .weights
            .iter()
            .zip(random_weights(d, scale, seed, purpose))
            .map(|(a, b)| a + b)
            .collect();
        PolicyParams::from_weights(w, 0)
    };
    let theta = nudge(0.15, "grad-theta")?;
    let reference = nudge(0.3, "grad-ref")?;
    let mut rng = stream(seed, "grad-group", &[]);
    let rollouts = (0..5)
        .map(|_| policy::sample_chain(&old, &spec, &question, 1.0, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut group = GroupRollouts::new(&question, rollouts, d)?;
    // Mixed outcomes keep the outcome advantages away from the all-zero case.
    for (k, r) in group.rollouts.iter_mut().enumerate() {
        r.outcome_reward = u8::from(k % 3 == 0);
    }
    let mut prm = PrmParams::zeros(d)?;
    prm.weights = random_weights(d, 1.0, seed, "grad-prm");
    Ok(GradInstance {
        question,
        group,
        old,
        theta,
        reference,
        prm,
    })
}

fn active_indices(group: &GroupRollouts) -> Vec<usize> {
    let set: BTreeSet<usize> = group
        .steps
        .iter()
        .flatten()
        .flat_map(|s| s.feats.iter().flat_map(|f| f.indices.iter().map(|&i| i as usize)))
        .collect();
    set.into_iter().collect()
}

/// Analytic gradients of log pi, the discriminator loss, and the three
/// policy objectives against central differences.
pub fn gradient_oracles(seed: u64, instances: u64) -> Result<CheckRecord> {
    let tol = 1e-4;
    let h = 1e-5;
    let mut worst = [0.0f64; 5];
    for s in 0..instances {
        let inst = grad_instance(seed.wrapping_add(s))?;
        let cfg = ObjectiveConfig::default();
        let active = active_indices(&inst.group);
        let with = |w: &[f64]| PolicyParams::from_weights(w.to_vec(), 0).expect("finite weights");

        let rollout = &inst.group.rollouts[0];
        for i in 0..rollout.steps.len() {
            let (prefix, step) = (&rollout.steps[..i], &rollout.steps[i]);
            let analytic = policy::grad_logprob(&inst.theta, &inst.question, prefix, step)?.to_dense(inst.theta.d);
            let numeric = finite_difference_grad(
                |w| policy::logprob_step(&with(w), &inst.question, prefix, step).expect("legal step"),
                &inst.theta.weights,
                h,
                Some(&active),
            );
            worst[0] = worst[0].max(rel_err(&analytic, &numeric));
        }

        let expert: Vec<DiscriminatorSample> = inst.group.steps[0]
            .iter()
            .chain(&inst.group.steps[1])
            .map(|sf| DiscriminatorSample::from_step_features(sf, &inst.old))
            .collect();
        let pol: Vec<DiscriminatorSample> = inst.group.steps[2..]
            .iter()
            .flatten()
            .map(|sf| DiscriminatorSample::from_step_features(sf, &inst.old))
            .collect();
        let analytic = prm::airl_loss_grad(&inst.prm, &expert, &pol)?;
        let numeric = finite_difference_grad(
            |w| {
                let mut p = inst.prm.clone();
                p.weights.copy_from_slice(w);
                prm::airl_loss(&p, &expert, &pol).expect("non-empty batches")
            },
            &inst.prm.weights,
            h,
            Some(&active),
        );
        worst[1] = worst[1].max(rel_err(&analytic, &numeric));

        let a = rl::j_airl(&inst.group, &inst.theta, &inst.old, &inst.prm, &cfg)?;
        let n = finite_difference_grad(
            |w| rl::j_airl(&inst.group, &with(w), &inst.old, &inst.prm, &cfg).expect("objective").value,
            &inst.theta.weights,
            h,
            Some(&active),
        );
        worst[2] = worst[2].max(rel_err(&a.grad, &n));

        let g = rl::j_grpo(&inst.group, &inst.theta, &inst.old, &inst.reference, &cfg)?;
        let n = finite_difference_grad(
            |w| rl::j_grpo(&inst.group, &with(w), &inst.old, &inst.reference, &cfg).expect("objective").value,
            &inst.theta.weights,
            h,
            Some(&active),
        );
        worst[3] = worst[3].max(rel_err(&g.grad, &n));

        let c = rl::composite_objective(&inst.group, &inst.theta, &inst.old, &inst.reference, &inst.prm, &cfg)?;
        let n = finite_difference_grad(
            |w| {
                rl::composite_objective(&inst.group, &with(w), &inst.old, &inst.reference, &inst.prm, &cfg)
                    .expect("objective")
                    .value
            },
            &inst.theta.weights,
            h,
            Some(&active),
        );
        worst[4] = worst[4].max(rel_err(&c.grad, &n));
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    Ok(CheckRecord::new(
        "gradient-oracles",
        max < tol,
        max,
        tol,
        format!(
            "{instances} instances; worst relative error logprob {:.2e} airl_loss {:.2e} j_airl {:.2e} j_grpo {:.2e} composite {:.2e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    ))
}

/// Trains a tabular discriminator against fixed distributions and compares
/// it with p_e / (p_e + p_theta).
pub fn discriminator_convergence(steps: usize) -> Result<CheckRecord> {
    let tol = 0.02;
    // Distributions with denominator 10, realised as sample multiplicities.
    let expert_counts = [4usize, 3, 2, 1];
    let policy_counts = [1usize, 2, 3, 4];
    let d = 8;
    let p_theta: Vec<f64> = policy_counts.iter().map(|&c| c as f64 / 10.0).collect();
    let p_e: Vec<f64> = expert_counts.iter().map(|&c| c as f64 / 10.0).collect();
    let sample = |x: usize| DiscriminatorSample {
        features: SparseVec::from_pairs(vec![(x as u32, 1.0)]),
        policy_logprob: p_theta[x].ln(),
    };
    let expand = |counts: &[usize]| -> Vec<DiscriminatorSample> {
        counts.iter().enumerate().flat_map(|(x, &c)| (0..c).map(move |_| x)).map(sample).collect()
    };
    let (expert, pol) = (expand(&expert_counts), expand(&policy_counts));
    let mut prm = PrmParams::zeros(d)?;
    let mut state = AdamState::new(d);
    let hyper = AdamHyper::with_lr(0.05);
    for _ in 0..steps {
        let g = prm::airl_loss_grad(&prm, &expert, &pol)?;
        prm::prm_update(&mut prm, &g, &mut state, &hyper)?;
    }
    let target = oracle::optimal_discriminator_table(&p_e, &p_theta)?;
    let mut worst: f64 = 0.0;
    for x in 0..expert_counts.len() {
        let d_hat = prm::discriminator(prm.weights[x], p_theta[x].ln());
        worst = worst.max((d_hat - target[x].expect("positive support")).abs());
    }
    Ok(CheckRecord::new(
        "discriminator-convergence",
        worst < tol,
        worst,
        tol,
        format!("{steps} Adam steps on a 4-point support"),
    ))
}

/// k3 non-negativity, its value at ratio 2, and its zero set.
pub fn kl_term(seed: u64, samples: usize) -> CheckRecord {
    let mut rng = stream(seed, "check-kl", &[]);
    let mut min_kl = f64::INFINITY;
    let mut zero_ok = true;
    for _ in 0..samples {
        let lt: f64 = rng.random_range(-30.0..0.0);
        let lr: f64 = rng.random_range(-30.0..0.0);
        min_kl = min_kl.min(rl::kl_k3(lt, lr));
        zero_ok &= rl::kl_k3(lt, lt).abs() <= 1e-12;
        zero_ok &= lt == lr || rl::kl_k3(lt, lr) > 0.0;
    }
    let at_two = rl::kl_k3(0.0, 2f64.ln());
    let err = (at_two - 0.306853).abs();
    let passed = min_kl >= 0.0 && err < 1e-6 && zero_ok;
    CheckRecord::new(
        "kl-term",
        passed,
        err,
        1e-6,
        format!("{samples} random pairs, min k3 {min_kl:.3e}, k3(ratio 2) = {at_two:.7}, zero only on equal log-probs: {zero_ok}"),
    )
}

/// Group-relative advantages: zero sum, zero gradient on uniform outcomes,
/// and the [1,1,0,0] example.
pub fn grpo_invariants(seed: u64) -> Result<CheckRecord> {
    let mut rng = stream(seed, "check-grpo", &[]);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let g = rng.random_range(2..12);
        let r: Vec<f64> = (0..g).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let a = rl::grpo_advantages(&r, 1e-8)?;
        worst_sum = worst_sum.max(a.iter().sum::<f64>().abs());
    }
    let ex = rl::grpo_advantages(&[1.0, 1.0, 0.0, 0.0], 0.0)?;
    let example_ok = ex == vec![1.0, 1.0, -1.0, -1.0];

    let mut inst = grad_instance(seed)?;
    for r in inst.group.rollouts.iter_mut() {
        r.outcome_reward = 1;
    }
    let cfg = ObjectiveConfig {
        kl_beta: 0.0,
        ..Default::default()
    };
    let out = rl::j_grpo(&inst.group, &inst.theta, &inst.old, &inst.reference, &cfg)?;
    let zero_ok = out.grad.iter().all(|g| *g == 0.0) && out.value == 0.0;
    Ok(CheckRecord::new(
        "grpo-invariants",
        worst_sum < 1e-9 && example_ok && zero_ok,
        worst_sum,
        1e-9,
        format!("[1,1,0,0] -> {ex:?}; uniform-outcome gradient is zero: {zero_ok}"),
    ))
}

/// Sampled Best-of-N against its exact expectation, and exhaustive MCTS
/// against the ground truth, both with step labels as rewards.
pub fn search_vs_oracle(seed: u64, questions: usize, trials_per_question: usize, mcts_questions: usize) -> Result<Vec<CheckRecord>> {
    let spec = EnvSpec::default_arithmetic();
    let qs = generate_question_set(&spec, seed, 0, questions.max(mcts_questions))?;
    let pi = PolicyParams::from_weights(random_weights(4096, 1.0, seed, "check-search-policy"), 0)?;
    let temperature = 0.7;
    let mut records = Vec::new();
    for n in [1usize, 2, 4] {
        let cfg = SearchConfig {
            n_solutions: n,
            temperature,
            ..Default::default()
        };
        let per_q: Vec<(f64, usize)> = qs[..questions]
            .par_iter()
            .map(|q| -> Result<(f64, usize)> {
                let exact = exact_best_of_n_accuracy(&spec, q, &pi, temperature, &OracleScorer, n, Aggregation::PRM_MIN_SUM)?;
                let mut rng = stream(seed, "check-bon", &[n as u64, q.id]);
                let mut hits = 0;
                for _ in 0..trials_per_question {
                    if search::best_of_n(&pi, &OracleScorer, &spec, q, &cfg, &mut rng)?.answer == q.ground_truth {
                        hits += 1;
                    }
                }
                Ok((exact, hits))
            })
            .collect::<Result<_>>()?;
        let total = (questions * trials_per_question) as f64;
        let exact_mean = per_q.iter().map(|p| p.0).sum::<f64>() / questions as f64;
        let var = per_q.iter().map(|p| p.0 * (1.0 - p.0) * trials_per_question as f64).sum::<f64>() / (total * total);
        let se = var.sqrt();
        let empirical = per_q.iter().map(|p| p.1).sum::<usize>() as f64 / total;
        let z = if se > 0.0 { (empirical - exact_mean).abs() / se } else { (empirical - exact_mean).abs() * f64::INFINITY };
        records.push(CheckRecord::new(
            &format!("best-of-n-vs-exact-N{n}"),
            z.is_finite() && z <= 3.0 || empirical == exact_mean,
            z,
            3.0,
            format!("empirical {empirical:.4} exact {exact_mean:.4} se {se:.4} over {total} trials"),
        ));
    }
    let solvable: Vec<&Question> = qs[..mcts_questions].iter().collect();
    let cfg = SearchConfig {
        n_solutions: 10_000,
        width: 10,
        temperature,
        ..Default::default()
    };
    let hits: Vec<bool> = solvable
        .par_iter()
        .map(|q| -> Result<bool> {
            let has_correct = enumerate_all_chains(&spec, q, &pi, temperature)?.chains.iter().any(|c| c.correct);
            let out = search::mcts(&pi, &OracleScorer, &spec, q, &cfg, &mut stream(seed, "check-mcts", &[q.id]))?;
            Ok(!has_correct || out.answer == q.ground_truth)
        })
        .collect::<Result<_>>()?;
    let ok = hits.iter().filter(|h| **h).count();
    records.push(CheckRecord::new(
        "mcts-exhaustive",
        ok == hits.len(),
        ok as f64,
        hits.len() as f64,
        format!("{ok}/{} questions answered correctly with an exhaustive budget", hits.len()),
    ));
    Ok(records)
}

/// UCT arithmetic and selection on a three-node fixture.
pub fn uct_values() -> CheckRecord {
    let v = search::uct_score(0.5, 10, 5, 1.25);
    let err = (v - 1.3483).abs();
    // Root with children A (mu 0.9, 5 visits) and B (mu 0.1, 1 visit).
    let fixture = [(0.9, 5u64), (0.1, 1u64)];
    let greedy = search::select_child(&fixture, 6, 0.0) == 0;
    let explores = search::select_child(&fixture, 6, 1.25) == 1;
    let unvisited = search::select_child(&[(0.9, 5), (0.1, 1), (-5.0, 0)], 6, 1.25) == 2;
    CheckRecord::new(
        "uct-values",
        err < 1e-3 && greedy && explores && unvisited,
        err,
        1e-3,
        format!("uct(0.5,10,5,1.25) = {v:.5}; alpha 0 picks max mu: {greedy}; unvisited first: {unvisited}"),
    )
}

/// The five aggregation methods against direct formula evaluation.
pub fn aggregation_definitions(seed: u64, fixtures: usize) -> Result<CheckRecord> {
    let sol = |a: u32, s: f64| CandidateSolution {
        chain: Vec::new(),
        rewards: vec![s],
        score: s,
        answer: a,
    };
    let fx = [sol(7, 1.0), sol(7, 1.0), sol(3, 5.0)];
    let example_ok = search::answer_aggregate(&fx, AnswerAgg::Sum)? == 3
        && search::answer_aggregate(&fx, AnswerAgg::Max)? == 3
        && search::answer_aggregate(&fx, AnswerAgg::Majority)? == 7;

    let mut rng = stream(seed, "check-agg", &[]);
    let mut failures = 0usize;
    for _ in 0..fixtures {
        let count = rng.random_range(1..10);
        let chains: Vec<(u32, Vec<f64>)> = (0..count)
            .map(|_| {
                let len = rng.random_range(1..5);
                // Coarse rewards make ties common.
                (rng.random_range(0..4), (0..len).map(|_| f64::from(rng.random_range(-2..3i32)) * 0.5).collect())
            })
            .collect();
        for agg in Aggregation::ALL {
            let sols: Vec<CandidateSolution> = chains
                .iter()
                .map(|(a, r)| {
                    let s = match agg.step {
                        StepAgg::Min => r.iter().copied().fold(f64::INFINITY, f64::min),
                        StepAgg::Last => *r.last().expect("non-empty"),
                    };
                    CandidateSolution {
                        chain: Vec::new(),
                        rewards: r.clone(),
                        score: s,
                        answer: *a,
                    }
                })
                .collect();
            let answers: BTreeSet<u32> = chains.iter().map(|c| c.0).collect();
            let value = |a: u32| -> f64 {
                let mine = sols.iter().filter(|s| s.answer == a);
                match agg.answer {
                    AnswerAgg::Sum => mine.map(|s| s.score).sum(),
                    AnswerAgg::Max => mine.map(|s| s.score).fold(f64::NEG_INFINITY, f64::max),
                    AnswerAgg::Majority => mine.count() as f64,
                }
            };
            let best = answers.iter().map(|&a| value(a)).fold(f64::NEG_INFINITY, f64::max);
            let want = *answers.iter().find(|&&a| value(a) == best).expect("non-empty");
            // Step scores recomputed by the library must agree as well.
            let recomputed: Vec<f64> = chains
                .iter()
                .map(|(_, r)| search::step_aggregate(r, agg.step))
                .collect::<Result<_>>()?;
            let scores_ok = recomputed.iter().zip(&sols).all(|(x, s)| *x == s.score);
            if search::answer_aggregate(&sols, agg.answer)? != want || !scores_ok {
                failures += 1;
            }
        }
    }
    Ok(CheckRecord::new(
        "aggregation-definitions",
        example_ok && failures == 0,
        failures as f64,
        0.0,
        format!("fixture [7,7,3]/[1,1,5] ok: {example_ok}; {fixtures} random fixtures x 5 methods"),
    ))
}

/// Enumeration sanity on the default spec.
pub fn enumeration(seed: u64) -> Result<CheckRecord> {
    let spec = EnvSpec::default_arithmetic();
    let q = generate_question_set(&spec, seed, 0, 1)?.remove(0);
    let zero = PolicyParams::zeros(4096)?;
    let e = enumerate_all_chains(&spec, &q, &zero, 1.0)?;
    let err = (e.total_prob() - 1.0).abs();
    let succ = e.success_prob();
    let passed = e.chains.len() == 10_000 && err < 1e-9 && (succ - 0.1).abs() < 1e-9;
    Ok(CheckRecord::new(
        "enumeration",
        passed,
        err,
        1e-9,
        format!("{} chains; uniform success probability {succ:.12}", e.chains.len()),
    ))
}

/// Log-probabilities recorded on sampled chains sum to one over the tree.
pub fn logprob_normalization(seed: u64) -> Result<CheckRecord> {
    let spec = EnvSpec::default_arithmetic();
    let q = generate_question_set(&spec, seed, 0, 1)?.remove(0);
    let pi = PolicyParams::from_weights(random_weights(4096, 1.0, seed, "check-norm"), 0)?;
    let e = enumerate_all_chains(&spec, &q, &pi, 1.0)?;
    let mut total = 0.0;
    for c in &e.chains {
        let sfs: Vec<StepFeatures> = policy::chain_features(&q, &c.steps, pi.d)?;
        total += sfs.iter().map(|s| s.logprob(&pi.weights)).sum::<f64>().exp();
    }
    let err = (total - 1.0).abs();
    Ok(CheckRecord::new(
        "logprob-normalization",
        err < 1e-9,
        err,
        1e-9,
        format!("sum over {} chains of exp(sum of step log-probs)", e.chains.len()),
    ))
}

/// Every check at its full size.
pub fn run_all(seed: u64) -> Result<Vec<CheckRecord>> {
    let mut out = vec![
        reward_identity(seed, 100_000),
        gradient_oracles(seed, 20)?,
        discriminator_convergence(2000)?,
        kl_term(seed, 1_000_000),
        grpo_invariants(seed)?,
    ];
    out.extend(search_vs_oracle(seed, 50, 200, 100)?);
    out.push(uct_values());
    out.push(aggregation_definitions(seed, 1000)?);
    out.push(enumeration(seed)?);
    out.push(logprob_normalization(seed)?);
    Ok(out)
}

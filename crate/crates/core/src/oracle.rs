//! Brute-force ground truth for small specs: exhaustive chain enumeration,
//! exact success probabilities, exact Best-of-N accuracy, the optimal
//! discriminator, and finite-difference gradients.
//!
//! Nothing here draws random numbers or reuses the sampling code paths.

use std::collections::BTreeMap;

use crate::env::{self, EnvSpec};
use crate::error::{Error, Result};
use crate::features::candidate_features;
use crate::policy::{self, PolicyParams};
use crate::search::{answer_aggregate, step_aggregate, Aggregation, CandidateSolution, StepScorer};
use crate::types::{Question, Step};

/// Largest tree the enumerator will walk.
pub const ENUMERATION_LIMIT: f64 = 1e7;
/// Largest number of N-multisets the exact Best-of-N sum will visit.
pub const MULTISET_LIMIT: f64 = 2e7;

#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedChain {
    pub steps: Vec<Step>,
    pub prob: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationResult {
    pub chains: Vec<EnumeratedChain>,
}

impl EnumerationResult {
    pub fn total_prob(&self) -> f64 {
        self.chains.iter().map(|c| c.prob).sum()
    }

    pub fn success_prob(&self) -> f64 {
        self.chains.iter().filter(|c| c.correct).map(|c| c.prob).sum()
    }
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        let mut p = vec![0.0; logits.len()];
        p[best] = 1.0;
        return p;
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| ((z - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Every legal chain of `question` with its exact probability under
/// `policy` at `temperature`. Zero-probability branches are still listed.
pub fn enumerate_all_chains(
    spec: &EnvSpec,
    question: &Question,
    policy: &PolicyParams,
    temperature: f64,
) -> Result<EnumerationResult> {
    let size = (spec.max_branching() as f64).powi(spec.max_steps as i32);
    if size > ENUMERATION_LIMIT {
        return Err(Error::TooLargeToEnumerate(format!(
            "{}^{} chains exceeds {ENUMERATION_LIMIT:e}",
            spec.max_branching(),
            spec.max_steps
        )));
    }
    let mut chains = Vec::new();
    let mut stack: Vec<(Vec<Step>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((prefix, prob)) = stack.pop() {
        if prefix.last().is_some_and(|s| s.is_terminal) {
            let correct = env::check_answer(question, &prefix)? == 1;
            chains.push(EnumeratedChain {
                steps: prefix,
                prob,
                correct,
            });
            continue;
        }
        if prefix.len() >= spec.max_steps {
            let forced = policy::complete_chain(policy, spec, question, prefix, Vec::new(), 0.0, &mut crate::rng::stream(0, "unused", &[]))?;
            stack.push((forced.steps, prob));
            continue;
        }
        let (cands, feats) = candidate_features(question, &prefix, policy.d)?;
        let probs = softmax(&policy.logits(&feats), temperature);
        // Reverse so the depth-first order follows candidate order.
        for (c, p) in cands.into_iter().zip(probs).rev() {
            let mut next = prefix.clone();
            next.push(c.step);
            stack.push((next, prob * p));
        }
    }
    Ok(EnumerationResult { chains })
}

pub fn exact_success_prob(spec: &EnvSpec, question: &Question, policy: &PolicyParams, temperature: f64) -> Result<f64> {
    Ok(enumerate_all_chains(spec, question, policy, temperature)?.success_prob())
}

/// Expected accuracy of Best-of-N under `scorer` and `aggregation`.
///
/// The aggregators only see each chain's (answer, score), so chains are first
/// merged into classes with that key; the sum then runs over N-multisets of
/// classes with multinomial weights.
pub fn exact_best_of_n_accuracy(
    spec: &EnvSpec,
    question: &Question,
    policy: &PolicyParams,
    temperature: f64,
    scorer: &dyn StepScorer,
    n: usize,
    aggregation: Aggregation,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("best-of-n needs n >= 1".into()));
    }
    let all = enumerate_all_chains(spec, question, policy, temperature)?;
    let mut classes: BTreeMap<(u32, u64), f64> = BTreeMap::new();
    for c in all.chains.iter().filter(|c| c.prob > 0.0) {
        let rewards = scorer.chain_rewards(question, &c.steps)?;
        let score = step_aggregate(&rewards, aggregation.step)?;
        let answer = c.steps.last().and_then(|s| s.declared_answer).ok_or(Error::IncompleteChain)?;
        *classes.entry((answer, score.to_bits())).or_insert(0.0) += c.prob;
    }
    let classes: Vec<(u32, f64, f64)> = classes
        .into_iter()
        .map(|((a, bits), p)| (a, f64::from_bits(bits), p))
        .collect();
    let k = classes.len();
    if n > 6 && k > 200 {
        return Err(Error::TooLargeToEnumerate(format!("{k} score classes with N={n}")));
    }
    let multisets = (1..=n).fold(1.0, |acc, i| acc * (k + n - i) as f64 / i as f64);
    if multisets > MULTISET_LIMIT {
        return Err(Error::TooLargeToEnumerate(format!("{multisets:.3e} multisets")));
    }
    let log_fact: Vec<f64> = (0..=n).scan(0.0, |s, i| {
        if i > 0 {
            *s += (i as f64).ln();
        }
        Some(*s)
    })
    .collect();
    let mut counts = vec![0usize; k];
    let mut total = 0.0;
    visit_multisets(&classes, &mut counts, 0, n, &mut |counts| {
        let mut logw = log_fact[n];
        let mut sols = Vec::with_capacity(n);
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let (answer, score, p) = classes[i];
            logw += c as f64 * p.ln() - log_fact[c];
            for _ in 0..c {
                sols.push(CandidateSolution {
                    chain: Vec::new(),
                    rewards: vec![score],
                    score,
                    answer,
                });
            }
        }
        if answer_aggregate(&sols, aggregation.answer)? == question.ground_truth {
            total += logw.exp();
        }
        Ok(())
    })?;
    Ok(total.min(1.0))
}

fn visit_multisets(
    classes: &[(u32, f64, f64)],
    counts: &mut Vec<usize>,
    from: usize,
    left: usize,
    f: &mut dyn FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    if left == 0 {
        return f(counts);
    }
    if from == classes.len() {
        return Ok(());
    }
    for take in (0..=left).rev() {
        counts[from] = take;
        visit_multisets(classes, counts, from + 1, left - take, f)?;
    }
    counts[from] = 0;
    Ok(())
}

/// D*(x) = p_e(x) / (p_e(x) + p_theta(x)); `None` where both vanish.
pub fn optimal_discriminator_table(expert: &[f64], policy: &[f64]) -> Result<Vec<Option<f64>>> {
    if expert.len() != policy.len() {
        return Err(Error::DimensionMismatch(format!(
            "expert support {} vs policy support {}",
            expert.len(),
            policy.len()
        )));
    }
    Ok(expert
        .iter()
        .zip(policy)
        .map(|(&e, &p)| if e + p > 0.0 { Some(e / (e + p)) } else { None })
        .collect())
}

/// Central differences of `objective` at `params`, only along `active`
/// coordinates (all coordinates when `None`); other entries are zero.
pub fn finite_difference_grad(
    mut objective: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    h: f64,
    active: Option<&[usize]>,
) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let all: Vec<usize>;
    let idx = match active {
        Some(a) => a,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut grad = vec![0.0; params.len()];
    let mut w = params.to_vec();
    for &i in idx {
        let orig = w[i];
        w[i] = orig + h;
        let up = objective(&w);
        w[i] = orig - h;
        let down = objective(&w);
        w[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_question_set;
    use crate::rng::stream;
    use crate::search::{best_of_n, OracleScorer, SearchConfig, StepAgg, AnswerAgg};
    use crate::types::Operator;
    use rand::Rng;

    fn random_policy(d: usize, scale: f64, seed: u64) -> PolicyParams {
        let mut rng = stream(seed, "oracle-test", &[]);
        PolicyParams::from_weights((0..d).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect(), 0).unwrap()
    }

    #[test]
    fn default_spec_enumeration() {
        let spec = EnvSpec::default_arithmetic();
        let q = &generate_question_set(&spec, 0, 0, 1).unwrap()[0];
        let zero = PolicyParams::zeros(4096).unwrap();
        let e = enumerate_all_chains(&spec, q, &zero, 1.0).unwrap();
        assert_eq!(e.chains.len(), 10_000);
        assert!((e.total_prob() - 1.0).abs() < 1e-9);
        assert!((e.success_prob() - 0.1).abs() < 1e-12);
        let fully_correct = e
            .chains
            .iter()
            .filter(|c| (0..c.steps.len()).all(|i| env::step_correct(q, &c.steps[..i], &c.steps[i]).unwrap() == 1))
            .count();
        assert_eq!(fully_correct, 1);

        let pi = random_policy(4096, 1.0, 3);
        let e = enumerate_all_chains(&spec, q, &pi, 0.7).unwrap();
        assert!((e.total_prob() - 1.0).abs() < 1e-9);
        let p0 = exact_success_prob(&spec, q, &pi, 0.0).unwrap();
        assert!(p0 == 0.0 || p0 == 1.0);
    }

    #[test]
    fn guard_rejects_large_trees() {
        let spec = EnvSpec::arithmetic(10, 9, vec![Operator::Add]);
        let q = &generate_question_set(&spec, 0, 0, 1).unwrap()[0];
        let err = enumerate_all_chains(&spec, q, &PolicyParams::zeros(64).unwrap(), 1.0).unwrap_err();
        assert!(matches!(err, Error::TooLargeToEnumerate(_)));
    }

    #[test]
    fn optimal_discriminator_examples() {
        assert_eq!(optimal_discriminator_table(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), vec![Some(0.5), Some(0.5)]);
        let t = optimal_discriminator_table(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((t[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(t[1], Some(0.0));
        assert_eq!(optimal_discriminator_table(&[0.0], &[0.0]).unwrap(), vec![None]);
        let (pe, pt) = (0.6, 0.2);
        let d = optimal_discriminator_table(&[pe], &[pt]).unwrap()[0].unwrap();
        assert!(((d / (1.0 - d)).ln() - (pe / pt).ln()).abs() < 1e-12);
    }

    #[test]
    fn finite_differences_of_a_quadratic() {
        let g = finite_difference_grad(|w| w.iter().map(|x| x * x).sum(), &[1.0, 2.0], 1e-5, None);
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        let g = finite_difference_grad(|w| w.iter().map(|x| x * x).sum(), &[1.0, 2.0], 1e-5, Some(&[1]));
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn exact_best_of_n_basics() {
        let spec = EnvSpec::arithmetic(4, 3, vec![Operator::Add, Operator::Mul]);
        let qs = generate_question_set(&spec, 1, 0, 6).unwrap();
        let pi = random_policy(256, 1.5, 7);
        for q in &qs {
            let p = exact_success_prob(&spec, q, &pi, 0.7).unwrap();
            let one = exact_best_of_n_accuracy(&spec, q, &pi, 0.7, &OracleScorer, 1, Aggregation::PRM_MIN_SUM).unwrap();
            assert!((one - p).abs() < 1e-12, "{one} vs {p}");
            // Under min-aggregation a right answer reached through a wrong
            // step scores like a wrong answer, so dominance is checked on the
            // last-step score, which is exactly the outcome.
            let last_max = Aggregation { step: StepAgg::Last, answer: AnswerAgg::Max };
            let two = exact_best_of_n_accuracy(&spec, q, &pi, 0.7, &OracleScorer, 2, last_max).unwrap();
            assert!(two >= p - 1e-12);
        }
    }

    #[test]
    fn exact_best_of_n_matches_brute_force_over_ordered_tuples() {
        // Small enough to enumerate every ordered pair of chains directly.
        let spec = EnvSpec::arithmetic(3, 3, vec![Operator::Add]);
        let qs = generate_question_set(&spec, 2, 0, 4).unwrap();
        let pi = random_policy(128, 1.0, 9);
        let agg = Aggregation { step: StepAgg::Last, answer: AnswerAgg::Max };
        for q in &qs {
            let e = enumerate_all_chains(&spec, q, &pi, 1.0).unwrap();
            let sol = |c: &EnumeratedChain| {
                CandidateSolution::new(c.steps.clone(), OracleScorer.chain_rewards(q, &c.steps).unwrap(), agg.step).unwrap()
            };
            let mut want = 0.0;
            for a in &e.chains {
                for b in &e.chains {
                    if answer_aggregate(&[sol(a), sol(b)], agg.answer).unwrap() == q.ground_truth {
                        want += a.prob * b.prob;
                    }
                }
            }
            let got = exact_best_of_n_accuracy(&spec, q, &pi, 1.0, &OracleScorer, 2, agg).unwrap();
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn sampled_best_of_n_agrees_with_exact() {
        let spec = EnvSpec::arithmetic(4, 3, vec![Operator::Add]);
        let q = &generate_question_set(&spec, 5, 0, 1).unwrap()[0];
        let pi = random_policy(256, 1.0, 13);
        let cfg = SearchConfig { n_solutions: 3, ..Default::default() };
        let exact = exact_best_of_n_accuracy(&spec, q, &pi, 0.7, &OracleScorer, 3, Aggregation::PRM_MIN_SUM).unwrap();
        let trials = 4000;
        let mut rng = stream(17, "trials", &[]);
        let hits = (0..trials)
            .filter(|_| best_of_n(&pi, &OracleScorer, &spec, q, &cfg, &mut rng).unwrap().answer == q.ground_truth)
            .count();
        let p = hits as f64 / trials as f64;
        let se = (exact * (1.0 - exact) / trials as f64).sqrt().max(1e-3);
        assert!((p - exact).abs() < 3.0 * se, "{p} vs {exact}");
    }
}

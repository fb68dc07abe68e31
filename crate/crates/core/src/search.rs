//! Reward-guided test-time search: Best-of-N, beam search, MCTS, and the
//! self-consistency baseline, plus step-wise and answer-level aggregation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvSpec};
use crate::error::{Error, Result};
use crate::policy::{self, argmax_lowest, PolicyParams};
use crate::prm::RewardModel;
use crate::types::{Answer, Question, Step};

/// Per-step reward source used to score candidate chains.
pub trait StepScorer: Sync {
    fn step_reward(&self, question: &Question, prefix: &[Step], step: &Step) -> Result<f64>;

    fn chain_rewards(&self, question: &Question, steps: &[Step]) -> Result<Vec<f64>> {
        (0..steps.len())
            .map(|i| self.step_reward(question, &steps[..i], &steps[i]))
            .collect()
    }
}

impl StepScorer for RewardModel {
    fn step_reward(&self, question: &Question, prefix: &[Step], step: &Step) -> Result<f64> {
        RewardModel::step_reward(self, question, prefix, step)
    }
}

/// Ground-truth step labels as rewards: 1 for a correct step, 0 otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl StepScorer for OracleScorer {
    fn step_reward(&self, question: &Question, prefix: &[Step], step: &Step) -> Result<f64> {
        Ok(f64::from(env::step_correct(question, prefix, step)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepAgg {
    Min,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerAgg {
    Max,
    Sum,
    Majority,
}

/// A named (step, answer) aggregation pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Aggregation {
    pub step: StepAgg,
    pub answer: AnswerAgg,
}

impl Aggregation {
    pub const PRM_MIN_SUM: Aggregation = Aggregation {
        step: StepAgg::Min,
        answer: AnswerAgg::Sum,
    };

    pub const ALL: [Aggregation; 5] = [
        Aggregation { step: StepAgg::Min, answer: AnswerAgg::Max },
        Aggregation { step: StepAgg::Min, answer: AnswerAgg::Sum },
        Aggregation { step: StepAgg::Last, answer: AnswerAgg::Max },
        Aggregation { step: StepAgg::Last, answer: AnswerAgg::Sum },
        Aggregation { step: StepAgg::Min, answer: AnswerAgg::Majority },
    ];

    /// Parses a method name. The second value is true when `name` is one of
    /// the vote aliases that resolve to a sum variant.
    pub fn parse(name: &str) -> Result<(Aggregation, bool)> {
        let (step, answer, alias) = match name {
            "prm-min-max" => (StepAgg::Min, AnswerAgg::Max, false),
            "prm-min-sum" => (StepAgg::Min, AnswerAgg::Sum, false),
            "prm-last-max" => (StepAgg::Last, AnswerAgg::Max, false),
            "prm-last-sum" => (StepAgg::Last, AnswerAgg::Sum, false),
            "prm-min-vote" => (StepAgg::Min, AnswerAgg::Sum, true),
            "prm-last-vote" => (StepAgg::Last, AnswerAgg::Sum, true),
            "majority" | "majority-vote" => (StepAgg::Min, AnswerAgg::Majority, false),
            other => return Err(Error::UnknownMethod(format!("aggregation '{other}'"))),
        };
        Ok((Aggregation { step, answer }, alias))
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let step = match self.step {
            StepAgg::Min => "min",
            StepAgg::Last => "last",
        };
        match self.answer {
            AnswerAgg::Majority => write!(f, "majority"),
            AnswerAgg::Max => write!(f, "prm-{step}-max"),
            AnswerAgg::Sum => write!(f, "prm-{step}-sum"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    BestOfN,
    Beam,
    Mcts,
    SelfConsistency,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::BestOfN => "best-of-n",
            Method::Beam => "beam",
            Method::Mcts => "mcts",
            Method::SelfConsistency => "self-consistency",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best-of-n" | "bon" => Ok(Method::BestOfN),
            "beam" | "beam-search" => Ok(Method::Beam),
            "mcts" => Ok(Method::Mcts),
            "self-consistency" | "sc" => Ok(Method::SelfConsistency),
            other => Err(Error::UnknownMethod(format!("search method '{other}'"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub n_solutions: usize,
    pub width: usize,
    pub temperature: f64,
    pub uct_alpha: f64,
    pub step_agg: StepAgg,
    pub answer_agg: AnswerAgg,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            n_solutions: 16,
            width: 4,
            temperature: 0.7,
            uct_alpha: 1.25,
            step_agg: StepAgg::Min,
            answer_agg: AnswerAgg::Sum,
        }
    }
}

impl SearchConfig {
    pub fn with_aggregation(mut self, agg: Aggregation) -> Self {
        self.step_agg = agg.step;
        self.answer_agg = agg.answer;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_solutions == 0 || self.width == 0 {
            return Err(Error::Config("search needs n_solutions >= 1 and width >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("search temperature must be finite and >= 0".into()));
        }
        if !(self.uct_alpha > 0.0 && self.uct_alpha.is_finite()) {
            return Err(Error::Config("uct_alpha must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSolution {
    pub chain: Vec<Step>,
    pub rewards: Vec<f64>,
    pub score: f64,
    pub answer: Answer,
}

impl CandidateSolution {
    pub fn new(chain: Vec<Step>, rewards: Vec<f64>, step_agg: StepAgg) -> Result<Self> {
        let answer = chain
            .last()
            .and_then(|s| s.declared_answer)
            .ok_or(Error::IncompleteChain)?;
        let score = step_aggregate(&rewards, step_agg)?;
        Ok(CandidateSolution {
            chain,
            rewards,
            score,
            answer,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub solutions: Vec<CandidateSolution>,
    pub answer: Answer,
    /// Complete chains the method produced.
    pub rollout_count: usize,
    /// Policy step draws, including greedy completions.
    pub steps_generated: usize,
}

pub fn step_aggregate(rewards: &[f64], mode: StepAgg) -> Result<f64> {
    let last = *rewards.last().ok_or(Error::EmptyInput("step rewards"))?;
    Ok(match mode {
        StepAgg::Min => rewards.iter().copied().fold(f64::INFINITY, f64::min),
        StepAgg::Last => last,
    })
}

/// Picks an answer from scored solutions; ties go to the smallest answer.
pub fn answer_aggregate(solutions: &[CandidateSolution], mode: AnswerAgg) -> Result<Answer> {
    if solutions.is_empty() {
        return Err(Error::EmptyInput("candidate solutions"));
    }
    let mut table: BTreeMap<Answer, f64> = BTreeMap::new();
    for s in solutions {
        let e = table.entry(s.answer).or_insert(match mode {
            AnswerAgg::Max => f64::NEG_INFINITY,
            _ => 0.0,
        });
        match mode {
            AnswerAgg::Sum => *e += s.score,
            AnswerAgg::Max => *e = e.max(s.score),
            AnswerAgg::Majority => *e += 1.0,
        }
    }
    // BTreeMap iterates answers in increasing order; keep the first maximum.
    let mut best: Option<(Answer, f64)> = None;
    for (&a, &v) in &table {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((a, v));
        }
    }
    Ok(best.expect("non-empty").0)
}

pub fn uct_score(mu: f64, n_parent: u64, n_node: u64, alpha: f64) -> f64 {
    if n_node == 0 {
        return f64::INFINITY;
    }
    mu + alpha * ((n_parent as f64).ln() / n_node as f64).sqrt()
}

/// Index of the child with the highest UCT score given `(mean value, visits)`
/// pairs; ties go to the earliest child.
pub fn select_child(children: &[(f64, u64)], n_parent: u64, alpha: f64) -> usize {
    let scores: Vec<f64> = children.iter().map(|&(mu, n)| uct_score(mu, n_parent, n, alpha)).collect();
    argmax_lowest(&scores)
}

fn sample_chains<R: Rng + ?Sized>(
    policy: &PolicyParams,
    spec: &EnvSpec,
    question: &Question,
    n: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<(Vec<Vec<Step>>, usize)> {
    let mut steps = 0;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r = policy::sample_chain(policy, spec, question, temperature, rng)?;
        steps += r.steps.len();
        out.push(r.steps);
    }
    Ok((out, steps))
}

pub fn best_of_n<R: Rng + ?Sized>(
    policy: &PolicyParams,
    scorer: &dyn StepScorer,
    spec: &EnvSpec,
    question: &Question,
    config: &SearchConfig,
    rng: &mut R,
) -> Result<SearchOutcome> {
    config.validate()?;
    let (chains, steps_generated) = sample_chains(policy, spec, question, config.n_solutions, config.temperature, rng)?;
    let solutions = chains
        .into_iter()
        .map(|c| {
            let rewards = scorer.chain_rewards(question, &c)?;
            CandidateSolution::new(c, rewards, config.step_agg)
        })
        .collect::<Result<Vec<_>>>()?;
    let answer = answer_aggregate(&solutions, config.answer_agg)?;
    Ok(SearchOutcome {
        rollout_count: solutions.len(),
        solutions,
        answer,
        steps_generated,
    })
}

/// Majority vote over `n` independent chains. Draws from `rng` exactly as
/// `best_of_n` does, so both see the same chains on the same stream.
pub fn self_consistency<R: Rng + ?Sized>(
    policy: &PolicyParams,
    spec: &EnvSpec,
    question: &Question,
    n: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<SearchOutcome> {
    if n == 0 {
        return Err(Error::Config("self-consistency needs n >= 1".into()));
    }
    let (chains, steps_generated) = sample_chains(policy, spec, question, n, temperature, rng)?;
    let solutions = chains
        .into_iter()
        .map(|c| {
            let rewards = vec![0.0; c.len()];
            CandidateSolution::new(c, rewards, StepAgg::Last)
        })
        .collect::<Result<Vec<_>>>()?;
    let answer = answer_aggregate(&solutions, AnswerAgg::Majority)?;
    Ok(SearchOutcome {
        rollout_count: solutions.len(),
        solutions,
        answer,
        steps_generated,
    })
}

#[derive(Debug, Clone)]
struct Partial {
    steps: Vec<Step>,
    rewards: Vec<f64>,
}

impl Partial {
    fn latest(&self) -> f64 {
        *self.rewards.last().expect("partials hold at least one step")
    }

    fn is_terminal(&self) -> bool {
        self.steps.last().is_some_and(|s| s.is_terminal)
    }
}

fn extend<R: Rng + ?Sized>(
    policy: &PolicyParams,
    scorer: &dyn StepScorer,
    spec: &EnvSpec,
    question: &Question,
    base: &Partial,
    temperature: f64,
    rng: &mut R,
) -> Result<Partial> {
    let step = if base.steps.len() >= spec.max_steps {
        let r = policy::complete_chain(policy, spec, question, base.steps.clone(), vec![0.0; base.steps.len()], 0.0, rng)?;
        r.steps.last().expect("completed").clone()
    } else {
        policy::sample_step(policy, question, &base.steps, temperature, rng)?.0
    };
    let reward = scorer.step_reward(question, &base.steps, &step)?;
    let mut next = base.clone();
    next.steps.push(step);
    next.rewards.push(reward);
    Ok(next)
}

/// Orders partials by latest reward, best first; ties keep generation order.
fn rank(partials: &mut [Partial]) {
    partials.sort_by(|a, b| b.latest().total_cmp(&a.latest()));
}

pub fn beam_search<R: Rng + ?Sized>(
    policy: &PolicyParams,
    scorer: &dyn StepScorer,
    spec: &EnvSpec,
    question: &Question,
    config: &SearchConfig,
    rng: &mut R,
) -> Result<SearchOutcome> {
    config.validate()?;
    let (n, m) = (config.n_solutions, config.width);
    if n % m != 0 {
        return Err(Error::BeamShape { n, width: m });
    }
    let keep = n / m;
    let root = Partial {
        steps: Vec::new(),
        rewards: Vec::new(),
    };
    let mut steps_generated = 0;
    let mut proposals = Vec::with_capacity(n);
    for _ in 0..n {
        proposals.push(extend(policy, scorer, spec, question, &root, config.temperature, rng)?);
        steps_generated += 1;
    }
    let mut finished: Vec<Partial> = Vec::new();
    let mut discarded: Vec<Partial> = Vec::new();
    loop {
        rank(&mut proposals);
        let (done, open): (Vec<Partial>, Vec<Partial>) = proposals.into_iter().partition(Partial::is_terminal);
        finished.extend(done);
        if finished.len() >= n || open.is_empty() {
            discarded.extend(open);
            break;
        }
        let mut open = open;
        discarded.extend(open.split_off(keep.min(open.len())));
        proposals = Vec::with_capacity(open.len() * m);
        for survivor in &open {
            for _ in 0..m {
                proposals.push(extend(policy, scorer, spec, question, survivor, config.temperature, rng)?);
                steps_generated += 1;
            }
        }
    }
    finished.truncate(n);
    if finished.len() < n {
        rank(&mut discarded);
        for p in discarded.into_iter().take(n - finished.len()) {
            let r = policy::complete_chain(policy, spec, question, p.steps.clone(), vec![0.0; p.steps.len()], 0.0, rng)?;
            steps_generated += r.steps.len() - p.steps.len();
            let mut rewards = p.rewards;
            for i in p.steps.len()..r.steps.len() {
                rewards.push(scorer.step_reward(question, &r.steps[..i], &r.steps[i])?);
            }
            finished.push(Partial { steps: r.steps, rewards });
        }
    }
    let solutions = finished
        .into_iter()
        .map(|p| CandidateSolution::new(p.steps, p.rewards, config.step_agg))
        .collect::<Result<Vec<_>>>()?;
    let answer = answer_aggregate(&solutions, config.answer_agg)?;
    Ok(SearchOutcome {
        rollout_count: solutions.len(),
        solutions,
        answer,
        steps_generated,
    })
}

/// One node of the MCTS tree; the root holds no step.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub prefix: Vec<Step>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub visits: u64,
    pub value_sum: f64,
    /// Simulations started at this node.
    pub simulations: u64,
    /// Reward of the node's own step (0 at the root).
    pub reward: f64,
    pub expanded: bool,
    pub exhausted: bool,
}

impl TreeNode {
    pub fn mean_value(&self) -> f64 {
        self.value_sum / self.visits.max(1) as f64
    }

    pub fn is_terminal(&self) -> bool {
        self.prefix.last().is_some_and(|s| s.is_terminal)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MctsTree {
    pub nodes: Vec<TreeNode>,
}

impl MctsTree {
    fn new() -> Self {
        MctsTree {
            nodes: vec![TreeNode {
                prefix: Vec::new(),
                parent: None,
                children: Vec::new(),
                visits: 0,
                value_sum: 0.0,
                simulations: 0,
                reward: 0.0,
                expanded: false,
                exhausted: false,
            }],
        }
    }

    pub fn parent_visits(&self, node: usize) -> u64 {
        self.nodes[node].parent.map_or(self.nodes[node].visits, |p| self.nodes[p].visits)
    }

    /// Every node's visit count equals its own simulations plus its
    /// children's visits.
    pub fn visits_consistent(&self) -> bool {
        self.nodes.iter().all(|n| {
            n.visits == n.simulations + n.children.iter().map(|&c| self.nodes[c].visits).sum::<u64>()
        })
    }

    fn path_to(&self, mut node: usize) -> Vec<usize> {
        let mut path = vec![node];
        while let Some(p) = self.nodes[node].parent {
            path.push(p);
            node = p;
        }
        path.reverse();
        path
    }

    fn select(&self, alpha: f64) -> usize {
        let mut node = 0;
        while self.nodes[node].expanded {
            let parent_visits = self.nodes[node].visits.max(1);
            let open: Vec<usize> = self.nodes[node]
                .children
                .iter()
                .copied()
                .filter(|&c| !self.nodes[c].exhausted)
                .collect();
            let stats: Vec<(f64, u64)> = open.iter().map(|&c| (self.nodes[c].mean_value(), self.nodes[c].visits)).collect();
            node = open[select_child(&stats, parent_visits, alpha)];
        }
        node
    }

    fn refresh_exhausted(&mut self, from: usize) {
        let mut cur = Some(from);
        while let Some(i) = cur {
            let n = &self.nodes[i];
            let done = n.is_terminal() || (n.expanded && n.children.iter().all(|&c| self.nodes[c].exhausted));
            if !done {
                break;
            }
            self.nodes[i].exhausted = true;
            cur = self.nodes[i].parent;
        }
    }
}

/// Up to `m` distinct legal steps drawn without replacement.
fn distinct_children<R: Rng + ?Sized>(
    policy: &PolicyParams,
    question: &Question,
    prefix: &[Step],
    m: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<Step>> {
    let (cands, feats) = crate::features::candidate_features(question, prefix, policy.d)?;
    let logits = policy.logits(&feats);
    let mut remaining: Vec<usize> = (0..cands.len()).collect();
    let mut out = Vec::with_capacity(m.min(cands.len()));
    while out.len() < m && !remaining.is_empty() {
        let sub: Vec<f64> = remaining.iter().map(|&i| logits[i]).collect();
        let probs = policy::distribution_from_logits(&sub, temperature);
        let pick = if temperature <= 0.0 {
            argmax_lowest(&probs)
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            probs
                .iter()
                .position(|p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or_else(|| probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1))
        };
        out.push(cands[remaining.remove(pick)].step.clone());
    }
    Ok(out)
}

pub fn mcts<R: Rng + ?Sized>(
    policy: &PolicyParams,
    scorer: &dyn StepScorer,
    spec: &EnvSpec,
    question: &Question,
    config: &SearchConfig,
    rng: &mut R,
) -> Result<SearchOutcome> {
    mcts_with_tree(policy, scorer, spec, question, config, rng, |_| {}).map(|(o, _)| o)
}

/// MCTS that also returns the final tree. `observe` runs after every
/// backpropagation.
pub fn mcts_with_tree<R: Rng + ?Sized>(
    policy: &PolicyParams,
    scorer: &dyn StepScorer,
    spec: &EnvSpec,
    question: &Question,
    config: &SearchConfig,
    rng: &mut R,
    mut observe: impl FnMut(&MctsTree),
) -> Result<(SearchOutcome, MctsTree)> {
    config.validate()?;
    let mut tree = MctsTree::new();
    let mut seen: HashSet<Vec<Step>> = HashSet::new();
    let mut solutions: Vec<CandidateSolution> = Vec::new();
    let mut steps_generated = 0;
    while solutions.len() < config.n_solutions && !tree.nodes[0].exhausted {
        let leaf = tree.select(config.uct_alpha);
        let prefix = tree.nodes[leaf].prefix.clone();
        let children = if prefix.len() >= spec.max_steps {
            let r = policy::complete_chain(policy, spec, question, prefix.clone(), vec![0.0; prefix.len()], 0.0, rng)?;
            vec![r.steps.last().expect("completed").clone()]
        } else {
            distinct_children(policy, question, &prefix, config.width, config.temperature, rng)?
        };
        steps_generated += children.len();
        tree.nodes[leaf].expanded = true;
        let path = tree.path_to(leaf);
        for step in children {
            let reward = scorer.step_reward(question, &prefix, &step)?;
            let mut child_prefix = prefix.clone();
            child_prefix.push(step);
            let id = tree.nodes.len();
            tree.nodes.push(TreeNode {
                prefix: child_prefix.clone(),
                parent: Some(leaf),
                children: Vec::new(),
                visits: 0,
                value_sum: 0.0,
                simulations: 0,
                reward,
                expanded: false,
                exhausted: false,
            });
            tree.nodes[leaf].children.push(id);

            let full = if tree.nodes[id].is_terminal() {
                child_prefix
            } else {
                let n = child_prefix.len();
                let r = policy::complete_chain(policy, spec, question, child_prefix, vec![0.0; n], 0.0, rng)?;
                steps_generated += r.steps.len() - n;
                r.steps
            };
            let mut rewards: Vec<f64> = path[1..].iter().map(|&i| tree.nodes[i].reward).collect();
            rewards.push(reward);
            for i in rewards.len()..full.len() {
                rewards.push(scorer.step_reward(question, &full[..i], &full[i])?);
            }
            // suffix[j]: rewards from step j onward; node at depth j owns step j-1.
            let mut suffix = vec![0.0; rewards.len() + 1];
            for j in (0..rewards.len()).rev() {
                suffix[j] = suffix[j + 1] + rewards[j];
            }
            tree.nodes[id].simulations += 1;
            for &node in path.iter().chain(std::iter::once(&id)) {
                let depth = tree.nodes[node].prefix.len();
                let n = &mut tree.nodes[node];
                n.visits += 1;
                n.value_sum += suffix[depth.saturating_sub(1)];
            }
            observe(&tree);
            tree.refresh_exhausted(id);
            if seen.insert(full.clone()) {
                solutions.push(CandidateSolution::new(full, rewards, config.step_agg)?);
                if solutions.len() == config.n_solutions {
                    break;
                }
            }
        }
        tree.refresh_exhausted(leaf);
    }
    let answer = answer_aggregate(&solutions, config.answer_agg)?;
    Ok((
        SearchOutcome {
            rollout_count: solutions.len(),
            solutions,
            answer,
            steps_generated,
        },
        tree,
    ))
}

pub fn run_method<R: Rng + ?Sized>(
    method: Method,
    policy: &PolicyParams,
    scorer: &dyn StepScorer,
    spec: &EnvSpec,
    question: &Question,
    config: &SearchConfig,
    rng: &mut R,
) -> Result<SearchOutcome> {
    match method {
        Method::BestOfN => best_of_n(policy, scorer, spec, question, config, rng),
        Method::Beam => beam_search(policy, scorer, spec, question, config, rng),
        Method::Mcts => mcts(policy, scorer, spec, question, config, rng),
        Method::SelfConsistency => self_consistency(policy, spec, question, config.n_solutions, config.temperature, rng),
    }
}

/// One line of search output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub question_id: u64,
    pub method: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub chosen_answer: Answer,
    pub correct: bool,
    #[serde(with = "crate::numfmt::vec")]
    pub scores: Vec<f64>,
    pub rollout_count: usize,
}

impl SearchRecord {
    pub fn new(method: Method, config: &SearchConfig, question: &Question, outcome: &SearchOutcome) -> Self {
        let label = match method {
            Method::SelfConsistency => method.name().to_string(),
            _ => format!("{}/{}", method.name(), Aggregation { step: config.step_agg, answer: config.answer_agg }),
        };
        SearchRecord {
            question_id: question.id,
            method: label,
            n: config.n_solutions,
            m: config.width,
            chosen_answer: outcome.answer,
            correct: outcome.answer == question.ground_truth,
            scores: outcome.solutions.iter().map(|s| s.score).collect(),
            rollout_count: outcome.rollout_count,
        }
    }
}

/// Runs `method` on every question in parallel. Question `q` draws from
/// the stream `(seed, "search", q.id)` whatever the method, so best-of-n
/// and self-consistency see the same chains.
pub fn search_questions(
    method: Method,
    policy: &PolicyParams,
    scorer: &dyn StepScorer,
    spec: &EnvSpec,
    questions: &[Question],
    config: &SearchConfig,
    seed: u64,
) -> Result<Vec<SearchRecord>> {
    use rayon::prelude::*;
    if questions.is_empty() {
        return Err(Error::EmptyInput("question set"));
    }
    questions
        .par_iter()
        .map(|q| {
            let mut rng = crate::rng::stream(seed, "search", &[q.id]);
            let out = run_method(method, policy, scorer, spec, q, config, &mut rng)?;
            Ok(SearchRecord::new(method, config, q, &out))
        })
        .collect()
}

pub fn accuracy(records: &[SearchRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_question_set;
    use crate::rng::stream;
    use crate::types::Operator;
    use proptest::prelude::*;

    fn sol(answer: Answer, score: f64) -> CandidateSolution {
        CandidateSolution {
            chain: vec![Step::terminal(answer, answer)],
            rewards: vec![score],
            score,
            answer,
        }
    }

    #[test]
    fn step_aggregation_examples() {
        let r = [0.2, -1.0, 0.5];
        assert_eq!(step_aggregate(&r, StepAgg::Min).unwrap(), -1.0);
        assert_eq!(step_aggregate(&r, StepAgg::Last).unwrap(), 0.5);
        for mode in [StepAgg::Min, StepAgg::Last] {
            assert_eq!(step_aggregate(&[3.5], mode).unwrap(), 3.5);
        }
        assert!(matches!(step_aggregate(&[], StepAgg::Min), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn answer_aggregation_examples() {
        let s = vec![sol(7, 1.0), sol(7, 1.0), sol(3, 5.0)];
        assert_eq!(answer_aggregate(&s, AnswerAgg::Sum).unwrap(), 3);
        assert_eq!(answer_aggregate(&s, AnswerAgg::Max).unwrap(), 3);
        assert_eq!(answer_aggregate(&s, AnswerAgg::Majority).unwrap(), 7);
        assert!(answer_aggregate(&[], AnswerAgg::Sum).is_err());
        // Ties go to the smaller answer.
        let t = vec![sol(9, 1.0), sol(2, 1.0)];
        for mode in [AnswerAgg::Sum, AnswerAgg::Max, AnswerAgg::Majority] {
            assert_eq!(answer_aggregate(&t, mode).unwrap(), 2);
        }
    }

    #[test]
    fn uct_examples() {
        assert_eq!(uct_score(0.3, 4, 0, 1.25), f64::INFINITY);
        let v = uct_score(0.5, 10, 5, 1.25);
        assert!((v - 1.3483).abs() < 1e-3, "{v}");
        assert_eq!(uct_score(0.5, 10, 5, 0.0), 0.5);
    }

    #[test]
    fn aggregation_names_round_trip() {
        for agg in Aggregation::ALL {
            assert_eq!(Aggregation::parse(&agg.to_string()).unwrap(), (agg, false));
        }
        assert_eq!(Aggregation::parse("prm-min-vote").unwrap(), (Aggregation::PRM_MIN_SUM, true));
        assert!(Aggregation::parse("prm-mean-sum").is_err());
        assert!("beam".parse::<Method>().is_ok());
        assert!(matches!("dfs".parse::<Method>(), Err(Error::UnknownMethod(_))));
    }

    proptest! {
        #[test]
        fn aggregation_matches_definitions(entries in prop::collection::vec((0u32..5, prop::collection::vec(-3.0f64..3.0, 1..5)), 1..12)) {
            let mut by_step = Vec::new();
            for mode in [StepAgg::Min, StepAgg::Last] {
                let sols: Vec<CandidateSolution> = entries
                    .iter()
                    .map(|(a, r)| CandidateSolution::new(vec![Step::terminal(*a, *a)], r.clone(), mode).unwrap())
                    .collect();
                for (s, (_, r)) in sols.iter().zip(&entries) {
                    let want = match mode {
                        StepAgg::Min => r.iter().cloned().fold(f64::INFINITY, f64::min),
                        StepAgg::Last => *r.last().unwrap(),
                    };
                    prop_assert_eq!(s.score, want);
                }
                by_step.push(sols);
            }
            for sols in &by_step {
                let answers: Vec<u32> = (0..5).collect();
                let sum = |a: u32| sols.iter().filter(|s| s.answer == a).map(|s| s.score).sum::<f64>();
                let cnt = |a: u32| sols.iter().filter(|s| s.answer == a).count();
                let present: Vec<u32> = answers.iter().copied().filter(|&a| cnt(a) > 0).collect();

                let got = answer_aggregate(sols, AnswerAgg::Sum).unwrap();
                prop_assert!(present.iter().all(|&a| sum(a) <= sum(got)));
                prop_assert!(present.iter().all(|&a| a >= got || sum(a) < sum(got)));

                let got = answer_aggregate(sols, AnswerAgg::Majority).unwrap();
                prop_assert!(present.iter().all(|&a| cnt(a) < cnt(got) || (cnt(a) == cnt(got) && a >= got)));

                let got = answer_aggregate(sols, AnswerAgg::Max).unwrap();
                let top = sols.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
                let smallest_top = sols.iter().filter(|s| s.score == top).map(|s| s.answer).min().unwrap();
                prop_assert_eq!(got, smallest_top);
            }
        }
    }

    fn setup() -> (EnvSpec, Vec<Question>, PolicyParams) {
        let spec = EnvSpec::default_arithmetic();
        let qs = generate_question_set(&spec, 11, 0, 6).unwrap();
        (spec, qs, PolicyParams::zeros(4096).unwrap())
    }

    #[test]
    fn best_of_one_returns_the_sampled_answer() {
        let (spec, qs, pi) = setup();
        let cfg = SearchConfig { n_solutions: 1, ..Default::default() };
        for q in &qs {
            let out = best_of_n(&pi, &OracleScorer, &spec, q, &cfg, &mut stream(1, "t", &[q.id])).unwrap();
            let r = policy::sample_chain(&pi, &spec, q, 0.7, &mut stream(1, "t", &[q.id])).unwrap();
            assert_eq!(out.answer, r.answer().unwrap());
            assert_eq!(out.rollout_count, 1);
        }
    }

    #[test]
    fn self_consistency_equals_majority_best_of_n() {
        let (spec, qs, pi) = setup();
        let cfg = SearchConfig {
            n_solutions: 9,
            ..Default::default()
        }
        .with_aggregation(Aggregation::parse("majority").unwrap().0);
        for q in &qs {
            let a = best_of_n(&pi, &OracleScorer, &spec, q, &cfg, &mut stream(5, "s", &[q.id])).unwrap();
            let b = self_consistency(&pi, &spec, q, 9, 0.7, &mut stream(5, "s", &[q.id])).unwrap();
            assert_eq!(a.answer, b.answer);
            assert_eq!(
                a.solutions.iter().map(|s| &s.chain).collect::<Vec<_>>(),
                b.solutions.iter().map(|s| &s.chain).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn rollout_budgets_are_exact() {
        let (spec, qs, pi) = setup();
        let cfg = SearchConfig { n_solutions: 8, width: 4, ..Default::default() };
        for q in &qs {
            for method in [Method::BestOfN, Method::Beam, Method::Mcts, Method::SelfConsistency] {
                let out = run_method(method, &pi, &OracleScorer, &spec, q, &cfg, &mut stream(2, "b", &[q.id])).unwrap();
                assert_eq!(out.rollout_count, 8, "{method}");
                assert_eq!(out.solutions.len(), 8, "{method}");
                assert!(out.solutions.iter().all(|s| s.chain.last().unwrap().is_terminal));
            }
        }
    }

    #[test]
    fn beam_requires_width_to_divide_n() {
        let (spec, qs, pi) = setup();
        let cfg = SearchConfig { n_solutions: 6, width: 4, ..Default::default() };
        let err = beam_search(&pi, &OracleScorer, &spec, &qs[0], &cfg, &mut stream(0, "x", &[])).unwrap_err();
        assert!(matches!(err, Error::BeamShape { n: 6, width: 4 }));
    }

    #[test]
    fn greedy_beam_and_zero_temperature_collapse() {
        let (spec, qs, pi) = setup();
        let cfg = SearchConfig { n_solutions: 4, width: 4, temperature: 0.0, ..Default::default() };
        for q in &qs {
            let out = beam_search(&pi, &OracleScorer, &spec, q, &cfg, &mut stream(0, "x", &[])).unwrap();
            let greedy = policy::greedy_chain(&pi, &spec, q).unwrap();
            assert_eq!(out.answer, greedy.answer().unwrap());
        }
    }

    #[test]
    fn mcts_keeps_visit_counts_consistent() {
        let (spec, qs, pi) = setup();
        let cfg = SearchConfig { n_solutions: 40, width: 3, ..Default::default() };
        for q in &qs {
            let mut checks = 0;
            let (out, tree) = mcts_with_tree(&pi, &OracleScorer, &spec, q, &cfg, &mut stream(3, "m", &[q.id]), |t| {
                assert!(t.visits_consistent());
                checks += 1;
            })
            .unwrap();
            assert!(checks >= 40);
            assert_eq!(out.solutions.len(), 40);
            let distinct: HashSet<_> = out.solutions.iter().map(|s| s.chain.clone()).collect();
            assert_eq!(distinct.len(), 40);
            for (i, n) in tree.nodes.iter().enumerate() {
                assert!(tree.parent_visits(i) >= n.children.iter().map(|&c| tree.nodes[c].visits).sum::<u64>());
            }
        }
    }

    #[test]
    fn mcts_single_chain_environment() {
        let spec = EnvSpec::arithmetic(2, 2, vec![Operator::Add]);
        let qs = generate_question_set(&spec, 0, 0, 4).unwrap();
        let pi = PolicyParams::zeros(64).unwrap();
        let cfg = SearchConfig { n_solutions: 1, width: 1, temperature: 0.0, ..Default::default() };
        for q in &qs {
            let out = mcts(&pi, &OracleScorer, &spec, q, &cfg, &mut stream(0, "m", &[])).unwrap();
            assert_eq!(out.rollout_count, 1);
            assert_eq!(out.answer, policy::greedy_chain(&pi, &spec, q).unwrap().answer().unwrap());
        }
    }

    #[test]
    fn mcts_exhausts_small_trees() {
        let spec = EnvSpec::arithmetic(3, 3, vec![Operator::Add]);
        let qs = generate_question_set(&spec, 4, 0, 5).unwrap();
        let pi = PolicyParams::zeros(256).unwrap();
        let cfg = SearchConfig { n_solutions: 100, width: 3, ..Default::default() };
        for q in &qs {
            let out = mcts(&pi, &OracleScorer, &spec, q, &cfg, &mut stream(0, "m", &[q.id])).unwrap();
            assert_eq!(out.solutions.len(), 9);
            assert_eq!(out.answer, q.ground_truth);
        }
    }

    #[test]
    fn searches_are_reproducible() {
        let (spec, qs, pi) = setup();
        let cfg = SearchConfig { n_solutions: 8, width: 2, ..Default::default() };
        for method in [Method::BestOfN, Method::Beam, Method::Mcts] {
            let a = search_questions(method, &pi, &OracleScorer, &spec, &qs, &cfg, 9).unwrap();
            let b = search_questions(method, &pi, &OracleScorer, &spec, &qs, &cfg, 9).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn record_uses_documented_field_names() {
        let (spec, qs, pi) = setup();
        let cfg = SearchConfig { n_solutions: 2, width: 2, ..Default::default() };
        let recs = search_questions(Method::BestOfN, &pi, &OracleScorer, &spec, &qs[..1], &cfg, 0).unwrap();
        let v: serde_json::Value = serde_json::to_value(&recs[0]).unwrap();
        for key in ["question_id", "method", "N", "M", "chosen_answer", "correct", "scores", "rollout_count"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: SearchRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, recs[0]);
    }
}

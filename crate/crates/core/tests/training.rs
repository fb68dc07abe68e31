//! Training loop and trained-model search behaviour on the default task.

use airls::config::RunConfig;
use airls::policy::PolicyParams;
use airls::search::{accuracy, search_questions, Method, SearchConfig};
use airls::trainer::{evaluate, init_run, run, MetricRecord, RunOutputs};

fn config(extra: &str) -> RunConfig {
    RunConfig::parse_str(extra).unwrap()
}

#[test]
fn buffer_coverage_is_reproducible() {
    let cfg = config("seed = 3\ntrain_questions = 300");
    let qs = cfg.train_set().unwrap();
    let a = init_run(cfg.trainer.clone(), &qs).unwrap();
    let b = init_run(cfg.trainer.clone(), &qs).unwrap();
    assert_eq!(a.coverage().to_bits(), b.coverage().to_bits());
    assert_eq!(a.buffer.entries(), b.buffer.entries());
    // 1 - 0.9^64 of questions expected covered at the uniform policy
    assert!(a.coverage() > 0.99);
}

#[test]
fn metrics_log_is_complete_and_starts_at_baseline() {
    let cfg = config("seed = 4\niterations = 5\ntrain_questions = 100\nvalidation_questions = 200\nbatch_questions = 16\neval_every = 2");
    let validation = cfg.validation_set().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let out = RunOutputs { dir: tmp.path().to_path_buf() };
    let mut state = init_run(cfg.trainer.clone(), &cfg.train_set().unwrap()).unwrap();
    let log = run(&mut state, 5, &validation, 2, Some(&out)).unwrap();

    let (base, _) = evaluate(&PolicyParams::zeros(cfg.trainer.dim).unwrap(), &cfg.env, &validation).unwrap();
    assert_eq!(log.evals[0].accuracy, base);
    assert_eq!(log.evals.iter().map(|e| e.iteration).collect::<Vec<_>>(), vec![0, 2, 4, 5]);

    let text = std::fs::read_to_string(out.metrics_path()).unwrap();
    let records: Vec<MetricRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let train: Vec<usize> = records
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Train(m) => Some(m.iteration),
            MetricRecord::Eval(_) => None,
        })
        .collect();
    assert_eq!(train, vec![1, 2, 3, 4, 5]);
    assert_eq!(PolicyParams::load(&out.policy_checkpoint("final")).unwrap(), state.theta);
}

#[test]
fn best_of_n_accuracy_does_not_drop_with_budget() {
    let cfg = config("seed = 0\niterations = 100\nvalidation_questions = 500");
    let validation = cfg.validation_set().unwrap();
    let mut state = init_run(cfg.trainer.clone(), &cfg.train_set().unwrap()).unwrap();
    run(&mut state, 100, &[], 0, None).unwrap();
    let prm = state.reward_model();
    let accs: Vec<f64> = [1, 4, 16, 64]
        .iter()
        .map(|&n| {
            let sc = SearchConfig { n_solutions: n, ..cfg.search };
            accuracy(&search_questions(Method::BestOfN, &state.theta, &prm, &cfg.env, &validation, &sc, 0).unwrap())
        })
        .collect();
    for w in accs.windows(2) {
        let p = w[0].max(w[1]);
        let band = 2.0 * (2.0 * p * (1.0 - p) / validation.len() as f64).sqrt();
        assert!(w[1] >= w[0] - band, "{accs:?}");
    }
}

//! Held-out accuracy before and after training, for chains of 2 to 5 operands.
//!
//! Usage: cargo run --release --example operand_sweep [iterations] [seed]

use airls::config::RunConfig;
use airls::trainer::{init_run, run};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let iterations: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let seed: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(0);
    println!("operands,lambda,before,after");
    for operands in 2..=5 {
        for lambda in [0.5, 0.0] {
            let cfg = RunConfig::parse_str(&format!(
                "seed = {seed}\noperands = {operands}\nlambda = {lambda}\niterations = {iterations}"
            ))?;
            let mut state = init_run(cfg.trainer.clone(), &cfg.train_set()?)?;
            let log = run(&mut state, iterations, &cfg.validation_set()?, iterations, None)?;
            let (first, last) = (&log.evals[0], log.evals.last().unwrap());
            println!("{operands},{lambda},{:.3},{:.3}", first.accuracy, last.accuracy);
        }
    }
    Ok(())
}

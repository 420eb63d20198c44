//! Runs a frozen MNIST configuration in memory with one seed.
//!
//! `cargo run --release --example mnist_benchmark -- configs/permuted.toml`

use std::path::PathBuf;

use bayes_cl::harness::{self, ExperimentConfig};

fn main() -> bayes_cl::Result<()> {
    let path = std::env::args().nth(1).map_or_else(|| PathBuf::from("configs/split_single.toml"), PathBuf::from);
    let mut cfg = ExperimentConfig::read(&path)?;
    cfg.seeds.truncate(1);
    cfg.mi = false;
    cfg.validate()?;
    let result = harness::run_in_memory(&cfg)?;
    for &m in &cfg.methods {
        let curve: Vec<String> = (1..=cfg.num_tasks)
            .map(|t| format!("{:.3}", result.mean_average_accuracy(m, t).unwrap()))
            .collect();
        println!("{m:14} {}", curve.join(" "));
    }
    Ok(())
}

//! Replay with stored real data against joint training on all tasks.

use std::path::Path;

use bayes_cl::harness::{self, ExperimentConfig};
use bayes_cl::objectives::Method;

fn main() -> bayes_cl::Result<()> {
    let mut cfg = ExperimentConfig::read(Path::new("configs/exact_replay.toml"))?;
    cfg.seeds.truncate(2);
    cfg.validate()?;
    for &seed in &cfg.seeds {
        let seq = harness::build_sequence(&cfg, None, seed, 0)?;
        let init = harness::initial_posterior(&cfg, &seq, seed)?;
        let joint = harness::run_joint(&cfg, &seq, &init, seed)?;
        let run = harness::run_single(&cfg, &seq, &init, Method::Vgr, seed)?;
        let replayed: Vec<f64> = run
            .records
            .iter()
            .filter(|r| r.task_trained == cfg.num_tasks)
            .map(|r| r.accuracy)
            .collect();
        println!("seed {seed}: joint {joint:.3?}  exact replay {replayed:.3?}");
    }
    Ok(())
}

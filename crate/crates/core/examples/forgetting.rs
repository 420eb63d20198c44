//! Plain training against VCL and generative replay on synthetic split tasks.

use bayes_cl::harness::{self, ActivationKind, BatchKind, ExperimentConfig};
use bayes_cl::objectives::Method;
use bayes_cl::replay::GeneratorKind;
use bayes_cl::tasks::Benchmark;

fn main() -> bayes_cl::Result<()> {
    let cfg = ExperimentConfig {
        schema_version: Some(harness::SCHEMA_VERSION),
        benchmark: Benchmark::Synth,
        methods: vec![Method::Plain, Method::Vcl, Method::Vgr],
        seeds: vec![0, 1],
        hidden: vec![32],
        activation: ActivationKind::Tanh,
        init_sigma: (-3.0f64).exp(),
        blob_separation: 8.0,
        epochs: 60,
        batch_policy: BatchKind::Fixed,
        batch_size: 32,
        learning_rate: 0.01,
        replay_batch_size: 32,
        replay_per_class: 100,
        generator_kind: GeneratorKind::ClassGaussian,
        mle_epochs: 40,
        mle_batch_size: 32,
        eval_samples: 30,
        ..ExperimentConfig::default()
    };
    let result = harness::run_in_memory(&cfg)?;
    let records = result.records();
    for &m in &cfg.methods {
        let first: Vec<f64> = records
            .iter()
            .filter(|r| r.method == m && r.task_evaluated == 1)
            .map(|r| r.accuracy)
            .collect();
        let curve: Vec<String> = (1..=cfg.num_tasks)
            .map(|t| format!("{:.3}", result.mean_average_accuracy(m, t).unwrap()))
            .collect();
        println!("{m:8} average accuracy {}", curve.join(" "));
        println!("{:8} task-1 accuracy per seed and task {first:.2?}", "");
    }
    Ok(())
}

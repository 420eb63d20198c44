//! Mutual-information matrices for VCL and replay on synthetic tasks.

use bayes_cl::harness::{self, ActivationKind, BatchKind, ExperimentConfig};
use bayes_cl::objectives::Method;
use bayes_cl::replay::GeneratorKind;
use bayes_cl::tasks::Benchmark;

fn main() -> bayes_cl::Result<()> {
    let cfg = ExperimentConfig {
        schema_version: Some(harness::SCHEMA_VERSION),
        benchmark: Benchmark::Synth,
        methods: vec![Method::Vcl, Method::Vgr],
        num_tasks: 4,
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
        mi: true,
        mi_samples: 50,
        ..ExperimentConfig::default()
    };
    let result = harness::run_in_memory(&cfg)?;
    for run in &result.runs {
        let mi = run.mi.as_ref().expect("mi enabled");
        println!("{} (rows: posterior after task, columns: test task)", run.method);
        for (t, row) in mi.scaled.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:5.2}")).collect();
            println!("  {}: {}  separates: {:?}", t + 1, cells.join(" "), mi.separation[t]);
        }
    }
    Ok(())
}

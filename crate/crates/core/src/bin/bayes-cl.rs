use std::path::PathBuf;
use std::process::ExitCode;

use bayes_cl::harness::{self, ExperimentConfig};
use bayes_cl::objectives::Method;
use bayes_cl::tasks::Benchmark;
use bayes_cl::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bayes-cl", version, about = "Bayesian continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured (method, seed) run and write metrics.
    Run(Overrides),
    /// Recompute mutual-information matrices from stored snapshots.
    Mi(Overrides),
    /// Fold a finished run directory into per-figure CSV tables.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated method names.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    benchmark: Option<String>,
    /// Run only this seed index.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::read(&self.config)?;
        if let Some(m) = &self.method {
            cfg.methods = m
                .split(',')
                .map(|name| {
                    Method::parse(name.trim()).ok_or_else(|| {
                        Error::Config(format!("unknown method {name:?}; valid methods: {}", Method::valid_names()))
                    })
                })
                .collect::<Result<_>>()?;
        }
        if let Some(b) = &self.benchmark {
            cfg.benchmark = Benchmark::parse(b).ok_or_else(|| {
                Error::Config(format!("unknown benchmark {b:?}; valid: permuted, split-single, split-multi, synth"))
            })?;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(o) => {
            let cfg = o.resolve()?;
            let result = harness::run_experiment(&cfg)?;
            for (method, acc) in harness::final_summary(&result, cfg.num_tasks)? {
                println!("{method}: average accuracy after task {} = {acc:.4}", cfg.num_tasks);
            }
            println!("wrote {}", cfg.out_dir.join("metrics.csv").display());
        }
        Command::Mi(o) => {
            let cfg = o.resolve()?;
            for (method, seed, m) in harness::compute_mi(&cfg)? {
                println!(
                    "{method} seed {seed}: {}/{} rows separate seen from unseen",
                    m.separated_rows(),
                    m.size().saturating_sub(1)
                );
            }
        }
        Command::Report { config, out } => {
            let dir = match (out, config) {
                (Some(o), _) => o,
                (None, Some(c)) => ExperimentConfig::load(&c)?.out_dir,
                (None, None) => return Err(Error::Config("report needs --out or --config".into())),
            };
            for p in harness::report(&dir)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}

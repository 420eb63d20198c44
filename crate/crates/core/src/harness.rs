//! Experiment runner: configuration, per-run task loops, metrics, MI
//! matrices and the CSV artifacts they produce.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::bnn::{self, Activation, Architecture, HeadMode, InitMode, MeanFieldPosterior, PosteriorSnapshot};
use crate::coreset::{self, Coreset, Selector};
use crate::error::{Error, Result};
use crate::objectives::{
    self, AdamParams, Auxiliary, BatchPolicy, KlScalePolicy, LikelihoodSource, LossSpec, Method, TaskContext,
    TrainSet, TrainingConfig,
};
use crate::replay::{self, ClassGenerator, GeneratorConfig, GeneratorKind};
use crate::rng;
use crate::snapshot;
use crate::tasks::{self, Benchmark, BlobSpec, TaskSequence};
use crate::uncertainty::{self, MiMatrix};

pub const SCHEMA_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "method,seed,task_trained,task_evaluated,accuracy";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// Means from a maximum-likelihood fit on the first task.
    Mle,
    /// Means and variances equal to the unit prior.
    Prior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchKind {
    Fixed,
    FullDataset,
    PerSeenTask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    Relu,
    Tanh,
}

/// Flat experiment configuration. Every key is optional except
/// `schema_version`; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: Option<u32>,
    pub benchmark: Benchmark,
    pub methods: Vec<Method>,
    pub num_tasks: usize,
    /// Seed indices; each run's streams derive from `(master_seed, method, seed)`.
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub downscale: usize,
    /// Keep at most this many training images per class (MNIST benchmarks).
    pub train_per_class: Option<usize>,

    pub hidden: Vec<usize>,
    pub activation: ActivationKind,
    pub init: InitKind,
    pub init_sigma: f64,
    pub mle_epochs: usize,
    pub mle_batch_size: usize,

    pub epochs: usize,
    pub batch_policy: BatchKind,
    pub batch_size: usize,
    pub batch_cap: Option<usize>,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub mc_train_samples: usize,
    /// `None` divides the KL by the number of minibatches per epoch.
    pub kl_scale: Option<f64>,

    pub coreset_size: usize,
    pub coreset_selector: Selector,
    pub finetune_epochs: usize,
    pub finetune_batch_policy: BatchKind,
    pub finetune_batch_size: usize,

    pub replay_epochs: Option<usize>,
    pub replay_batch_policy: BatchKind,
    pub replay_batch_size: usize,
    pub replay_batch_cap: Option<usize>,
    pub replay_per_class: usize,
    pub generator_kind: GeneratorKind,
    pub generator_latent_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub generator_leaky_alpha: f64,
    pub generator_lr: f64,
    pub generator_beta1: f64,
    pub generator_epochs: usize,
    pub generator_batch_size: usize,
    pub generator_sigma_floor: f64,

    pub eval_samples: usize,
    pub mi: bool,
    pub mi_samples: usize,
    pub save_snapshots: bool,

    pub blob_dim: usize,
    pub blob_separation: f64,
    pub blob_sigma: f64,
    pub blob_train_per_class: usize,
    pub blob_test_per_class: usize,
    pub blob_multi_head: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let gen = GeneratorConfig::default();
        let blobs = BlobSpec::default();
        Self {
            schema_version: None,
            benchmark: Benchmark::SplitSingle,
            methods: vec![Method::Vcl],
            num_tasks: 5,
            seeds: vec![0],
            master_seed: 0,
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
            downscale: 1,
            train_per_class: None,
            hidden: vec![100, 100],
            activation: ActivationKind::Relu,
            init: InitKind::Mle,
            init_sigma: 1e-6,
            mle_epochs: 100,
            mle_batch_size: 256,
            epochs: 120,
            batch_policy: BatchKind::Fixed,
            batch_size: 256,
            batch_cap: None,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            mc_train_samples: 3,
            kl_scale: None,
            coreset_size: 200,
            coreset_selector: Selector::KCenter,
            finetune_epochs: 100,
            finetune_batch_policy: BatchKind::FullDataset,
            finetune_batch_size: 256,
            replay_epochs: None,
            replay_batch_policy: BatchKind::PerSeenTask,
            replay_batch_size: 256,
            replay_batch_cap: None,
            replay_per_class: 6000,
            generator_kind: gen.kind,
            generator_latent_dim: gen.latent_dim,
            generator_hidden: gen.hidden,
            generator_leaky_alpha: gen.leaky_alpha,
            generator_lr: gen.lr,
            generator_beta1: gen.beta1,
            generator_epochs: gen.epochs,
            generator_batch_size: gen.batch_size,
            generator_sigma_floor: gen.sigma_floor,
            eval_samples: 100,
            mi: false,
            mi_samples: 100,
            save_snapshots: true,
            blob_dim: blobs.dim,
            blob_separation: blobs.separation,
            blob_sigma: blobs.sigma,
            blob_train_per_class: blobs.train_per_class,
            blob_test_per_class: blobs.test_per_class,
            blob_multi_head: false,
        }
    }
}

fn batch_policy(kind: BatchKind, size: usize, cap: Option<usize>) -> BatchPolicy {
    match kind {
        BatchKind::Fixed => BatchPolicy::Fixed(size),
        BatchKind::FullDataset => BatchPolicy::FullDataset,
        BatchKind::PerSeenTask => BatchPolicy::PerSeenTask { base: size, cap },
    }
}

impl ExperimentConfig {
    /// Parses without validating, so command-line overrides can still apply.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!("config not found: {}", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        match self.schema_version {
            None => return Err(Error::Config("missing schema_version".into())),
            Some(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "unsupported schema_version {v} (expected {SCHEMA_VERSION})"
                )))
            }
        }
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.num_tasks == 0 {
            return bad("num_tasks must be at least 1");
        }
        if matches!(self.benchmark, Benchmark::SplitSingle | Benchmark::SplitMulti) && self.num_tasks > 5 {
            return bad("split benchmarks have at most 5 tasks");
        }
        if self.benchmark != Benchmark::Synth && self.data_dir.is_none() {
            return bad("data_dir is required for MNIST benchmarks");
        }
        if self.downscale == 0 {
            return bad("downscale must be at least 1");
        }
        if !(self.init_sigma > 0.0) {
            return bad("init_sigma must be positive");
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be at least 1");
        }
        if self.mi && self.mi_samples < 2 {
            return bad("mi_samples must be at least 2");
        }
        if self.uses_coresets() && self.coreset_size == 0 {
            return bad("coreset methods need coreset_size > 0");
        }
        if [self.batch_size, self.mle_batch_size, self.finetune_batch_size, self.replay_batch_size].contains(&0) {
            return bad("batch sizes must be positive");
        }
        if self.kl_scale.is_some_and(|k| !(k >= 0.0)) {
            return bad("kl_scale must be non-negative");
        }
        self.training_config(false).validate()?;
        self.training_config(true).validate()?;
        self.generator_config().validate()?;
        self.architecture(2, 2)?;
        Ok(())
    }

    pub fn uses_coresets(&self) -> bool {
        self.methods
            .iter()
            .any(|&m| LossSpec::for_method(m).likelihood == LikelihoodSource::CurrentAndCoresets)
    }

    /// Training settings for the main loop; `replay` selects the replay
    /// methods' batch policy and epoch count.
    pub fn training_config(&self, replay: bool) -> TrainingConfig {
        let (epochs, batch) = if replay {
            (
                self.replay_epochs.unwrap_or(self.epochs),
                batch_policy(self.replay_batch_policy, self.replay_batch_size, self.replay_batch_cap),
            )
        } else {
            (self.epochs, batch_policy(self.batch_policy, self.batch_size, self.batch_cap))
        };
        TrainingConfig {
            epochs,
            batch,
            adam: AdamParams {
                lr: self.learning_rate,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            mc_samples: self.mc_train_samples,
            kl_scale: self.kl_scale.map_or(KlScalePolicy::FullElbo, KlScalePolicy::Constant),
            finetune_epochs: self.finetune_epochs,
            finetune_batch: batch_policy(self.finetune_batch_policy, self.finetune_batch_size, None),
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            kind: self.generator_kind,
            latent_dim: self.generator_latent_dim,
            hidden: self.generator_hidden.clone(),
            leaky_alpha: self.generator_leaky_alpha,
            lr: self.generator_lr,
            beta1: self.generator_beta1,
            epochs: self.generator_epochs,
            batch_size: self.generator_batch_size,
            sigma_floor: self.generator_sigma_floor,
        }
    }

    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            dim: self.blob_dim,
            separation: self.blob_separation,
            sigma: self.blob_sigma,
            train_per_class: self.blob_train_per_class,
            test_per_class: self.blob_test_per_class,
            head_mode: if self.blob_multi_head {
                HeadMode::Multi { heads: self.num_tasks }
            } else {
                HeadMode::Single
            },
        }
    }

    pub fn architecture(&self, input_dim: usize, output_dim: usize) -> Result<Architecture> {
        let mut arch = Architecture::new(input_dim, self.hidden.clone(), output_dim).with_activation(match self.activation {
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::Tanh => Activation::Tanh,
        });
        let multi = match self.benchmark {
            Benchmark::SplitMulti => true,
            Benchmark::Synth => self.blob_multi_head,
            _ => false,
        };
        if multi {
            arch = arch.with_heads(self.num_tasks);
        }
        if !multi || output_dim % self.num_tasks == 0 {
            arch.validate()?;
        }
        Ok(arch)
    }

    /// False when any method replays stored real data.
    pub fn is_continual(&self) -> bool {
        let replays = self
            .methods
            .iter()
            .any(|&m| LossSpec::for_method(m).likelihood == LikelihoodSource::CurrentAndReplay);
        !replays || self.generator_kind.is_continual()
    }
}

/// Loads the MNIST-style data a benchmark needs, downscaled and capped.
pub fn load_mnist(cfg: &ExperimentConfig) -> Result<(tasks::Dataset, tasks::Dataset)> {
    let dir = cfg
        .data_dir
        .as_deref()
        .ok_or_else(|| Error::Config("data_dir is required for MNIST benchmarks".into()))?;
    let (mut train, mut test) = tasks::load_mnist_dir(dir)?;
    if cfg.downscale > 1 {
        train = tasks::downscale(&train, cfg.downscale)?;
        test = tasks::downscale(&test, cfg.downscale)?;
    }
    if let Some(cap) = cfg.train_per_class {
        let keep: Vec<usize> = train
            .indices_by_class()
            .into_iter()
            .flat_map(|(_, idx)| idx.into_iter().take(cap))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        train = train
            .subset(&keep)
            .ok_or_else(|| Error::Data("train_per_class removed every example".into()))?;
    }
    Ok((train, test))
}

/// Builds seed `seed`'s task sequence; coresets are withheld when `coreset_k > 0`.
pub fn build_sequence(
    cfg: &ExperimentConfig,
    mnist: Option<&(tasks::Dataset, tasks::Dataset)>,
    seed: u64,
    coreset_k: usize,
) -> Result<TaskSequence> {
    let s = rng::derive_seed(cfg.master_seed, "sequence", seed);
    let need = || mnist.ok_or_else(|| Error::Data("benchmark needs MNIST data".into()));
    let t = cfg.num_tasks;
    let mut seq = match cfg.benchmark {
        Benchmark::Permuted => {
            let (train, test) = need()?;
            tasks::make_permuted_sequence(train, test, t, s)?
        }
        Benchmark::SplitSingle => {
            let (train, test) = need()?;
            tasks::make_split_sequence(train, test, &tasks::DEFAULT_SPLIT_PAIRS[..t], HeadMode::Single)?
        }
        Benchmark::SplitMulti => {
            let (train, test) = need()?;
            tasks::make_split_sequence(train, test, &tasks::DEFAULT_SPLIT_PAIRS[..t], HeadMode::Multi { heads: t })?
        }
        Benchmark::Synth => tasks::synth_tasks(&cfg.blob_spec(), t, s)?,
    };
    if coreset_k > 0 {
        coreset::withhold(&mut seq, coreset_k, cfg.coreset_selector, s)?;
    }
    Ok(seq)
}

/// Replay methods use one softmax over all outputs in training and only
/// select a head at prediction time.
fn replay_targets(seq: &TaskSequence, t: usize) -> TrainSet {
    let set = seq.train_set(t);
    match set.heads {
        None => set,
        Some(_) => TrainSet {
            targets: set.targets.iter().map(|&l| seq.output_column(t, l)).collect(),
            inputs: set.inputs,
            heads: None,
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub method: Method,
    pub seed: u64,
    /// 1-based.
    pub task_trained: usize,
    /// 1-based, at most `task_trained`.
    pub task_evaluated: usize,
    pub accuracy: f64,
}

/// Mean accuracy over tasks `1..=t` for one run.
pub fn average_accuracy(records: &[MetricsRecord], method: Method, seed: u64, t: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::InvalidArgument("task ids are 1-based".into()));
    }
    let mut cells = vec![None; t];
    for r in records {
        if r.method == method && r.seed == seed && r.task_trained == t && (1..=t).contains(&r.task_evaluated) {
            cells[r.task_evaluated - 1] = Some(r.accuracy);
        }
    }
    let mut sum = 0.0;
    for (i, c) in cells.iter().enumerate() {
        sum += c.ok_or_else(|| {
            Error::Data(format!("no accuracy for {method} seed {seed} trained {t} evaluated {}", i + 1))
        })?;
    }
    Ok(sum / t as f64)
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        writeln!(out, "{},{},{},{},{}", r.method, r.seed, r.task_trained, r.task_evaluated, r.accuracy).unwrap();
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("metrics csv header must be {METRICS_HEADER:?}")));
    }
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let bad = || Error::Format(format!("bad metrics row {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(MetricsRecord {
            method: Method::parse(f[0]).ok_or_else(bad)?,
            seed: f[1].parse().map_err(|_| bad())?,
            task_trained: f[2].parse().map_err(|_| bad())?,
            task_evaluated: f[3].parse().map_err(|_| bad())?,
            accuracy: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Everything one (method, seed) run produced.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub snapshots: Vec<PosteriorSnapshot>,
    /// Generators trained after each task (replay methods only).
    pub generators: Vec<Vec<ClassGenerator>>,
    pub mi: Option<MiMatrix>,
}

/// Where a run's artifacts live under the output directory.
pub fn run_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join("runs").join(method.name()).join(format!("seed{seed}"))
}

pub fn snapshot_path(out: &Path, method: Method, seed: u64, task: usize) -> PathBuf {
    run_dir(out, method, seed).join(format!("posterior_task{task}.bcls"))
}

pub fn generators_path(out: &Path, method: Method, seed: u64, task: usize) -> PathBuf {
    run_dir(out, method, seed).join(format!("generators_task{task}.bcls"))
}

/// Initial posterior shared by every method of seed `seed`.
pub fn initial_posterior(cfg: &ExperimentConfig, seq: &TaskSequence, seed: u64) -> Result<MeanFieldPosterior> {
    let arch = cfg.architecture(seq.input_dim(), seq.output_dim)?;
    match cfg.init {
        InitKind::Prior => MeanFieldPosterior::unit_prior(&arch),
        InitKind::Mle => {
            let mut r = rng::stream(cfg.master_seed, "mle", seed);
            let tc = cfg.training_config(false);
            let w = objectives::fit_mle(&arch, &seq.train_set(0), cfg.mle_epochs, cfg.mle_batch_size, &tc, &mut r)?;
            bnn::init_posterior(&arch, InitMode::FromMle(&w), cfg.init_sigma)
        }
    }
}

/// Non-continual reference: one ELBO fit on the union of every task,
/// batched like the replay methods at the last task. Returns per-task test
/// accuracy.
pub fn run_joint(cfg: &ExperimentConfig, seq: &TaskSequence, init: &MeanFieldPosterior, seed: u64) -> Result<Vec<f64>> {
    let tc = cfg.training_config(true);
    let p0 = MeanFieldPosterior::unit_prior(init.arch())?;
    let parts: Vec<TrainSet> = (0..seq.len()).map(|t| seq.train_set(t)).collect();
    let joint = TrainSet::concat(&parts.iter().collect::<Vec<_>>())?;
    let mut q = init.clone();
    let mut r = rng::stream(cfg.master_seed, "joint", seed);
    let batch = tc.batch.resolve(joint.len(), seq.len());
    objectives::fit(&mut q, Some(&p0), &joint, tc.epochs, batch, &tc, &mut r)?;
    let mut eval_rng = rng::stream(cfg.master_seed, "joint-eval", seed);
    (0..seq.len())
        .map(|u| uncertainty::accuracy(&q, &seq.test_set(u), cfg.eval_samples, &mut eval_rng))
        .collect()
}

/// Trains `method` through every task of `seq` and evaluates as it goes.
pub fn run_single(cfg: &ExperimentConfig, seq: &TaskSequence, init: &MeanFieldPosterior, method: Method, seed: u64) -> Result<RunResult> {
    let spec = LossSpec::for_method(method);
    let replay = spec.likelihood == LikelihoodSource::CurrentAndReplay;
    let tc = cfg.training_config(replay);
    let gcfg = cfg.generator_config();
    let p0 = MeanFieldPosterior::unit_prior(init.arch())?;
    let mut train_rng = rng::stream(cfg.master_seed, method.name(), seed);
    let mut eval_rng = rng::stream(cfg.master_seed, &format!("{method}-eval"), seed);
    let mut gen_rng = rng::stream(cfg.master_seed, &format!("{method}-generators"), seed);

    let mut previous = p0.clone();
    let mut start = init.clone();
    let mut coresets: Vec<Coreset> = Vec::new();
    let mut generators: Vec<ClassGenerator> = Vec::new();
    let mut per_task_generators = Vec::new();
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    for t in 0..seq.len() {
        let current = if replay { replay_targets(seq, t) } else { seq.train_set(t) };
        let augmented;
        let aux = match spec.likelihood {
            LikelihoodSource::CurrentTask => Auxiliary::None,
            LikelihoodSource::CurrentAndCoresets => {
                let c = seq.tasks[t]
                    .coreset
                    .clone()
                    .ok_or_else(|| Error::InputMismatch(format!("{method} needs coresets withheld")))?;
                coresets.push(c);
                Auxiliary::Coresets(&coresets)
            }
            LikelihoodSource::CurrentAndReplay => {
                let samples = replay::sample_replay(&generators, cfg.replay_per_class, &mut gen_rng)?;
                augmented = replay::build_augmented_dataset(&current, &samples)?;
                Auxiliary::Replay(&augmented)
            }
        };
        if t > 0 && matches!(init.arch().head_mode, HeadMode::Multi { .. }) {
            start = start.with_head_from(init, t)?;
            previous = previous.with_head_from(&p0, t)?;
        }
        let ctx = TaskContext {
            task: t,
            seen_tasks: t + 1,
            start: &start,
            previous: &previous,
            original_prior: &p0,
        };
        let outcome = objectives::train_task(&spec, &tc, &ctx, &current, aux, &mut train_rng).map_err(|e| {
            if e.is_numerical() {
                Error::Numerical(format!("{method} seed {seed} task {}: {e}", t + 1))
            } else {
                e
            }
        })?;
        if replay {
            let g = replay::train_generators(&current, t, &gcfg, &mut gen_rng)?;
            generators.extend(g.iter().cloned());
            per_task_generators.push(g);
        }
        for u in 0..=t {
            let acc = uncertainty::accuracy(&outcome.predictive, &seq.test_set(u), cfg.eval_samples, &mut eval_rng)?;
            records.push(MetricsRecord {
                method,
                seed,
                task_trained: t + 1,
                task_evaluated: u + 1,
                accuracy: acc,
            });
        }
        snapshots.push(outcome.snapshot);
        start = outcome.propagated.clone();
        previous = outcome.propagated;
    }
    let mi = if cfg.mi {
        let tests: Vec<TrainSet> = (0..seq.len()).map(|u| seq.test_set(u)).collect();
        Some(uncertainty::mi_matrix(
            &snapshots,
            &tests,
            cfg.mi_samples,
            rng::derive_seed(cfg.master_seed, &format!("{method}-mi"), seed),
        )?)
    } else {
        None
    };
    Ok(RunResult {
        method,
        seed,
        records,
        snapshots,
        generators: per_task_generators,
        mi,
    })
}

/// Runs `jobs` on up to `available_parallelism` threads; results keep job order.
fn parallel_map<T: Sync, R: Send>(jobs: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("job ran")).collect()
}

/// All runs of an experiment, in (seed, method) order of the config.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
}

impl ExperimentResult {
    pub fn records(&self) -> Vec<MetricsRecord> {
        let mut all: Vec<MetricsRecord> = self.runs.iter().flat_map(|r| r.records.iter().cloned()).collect();
        all.sort_by(|a, b| {
            (a.method, a.seed, a.task_trained, a.task_evaluated).cmp(&(b.method, b.seed, b.task_trained, b.task_evaluated))
        });
        all
    }

    pub fn run(&self, method: Method, seed: u64) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.method == method && r.seed == seed)
    }

    /// Mean over seeds of the average accuracy after task `t` (1-based).
    pub fn mean_average_accuracy(&self, method: Method, t: usize) -> Result<f64> {
        let records = self.records();
        let runs: Vec<&RunResult> = self.runs.iter().filter(|r| r.method == method).collect();
        if runs.is_empty() {
            return Err(Error::InvalidArgument(format!("no runs for {method}")));
        }
        let mut sum = 0.0;
        for r in &runs {
            sum += average_accuracy(&records, method, r.seed, t)?;
        }
        Ok(sum / runs.len() as f64)
    }
}

/// Trains every (method, seed) pair without touching the filesystem.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mnist = match cfg.benchmark {
        Benchmark::Synth => None,
        _ => Some(load_mnist(cfg)?),
    };
    let k = if cfg.uses_coresets() { cfg.coreset_size } else { 0 };
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        for &method in &cfg.methods {
            jobs.push((seed, method));
        }
    }
    // sequences and initial posteriors are shared by all methods of a seed
    let per_seed: Vec<(TaskSequence, TaskSequence, MeanFieldPosterior)> = parallel_map(&cfg.seeds, |&seed| {
        let plain = build_sequence(cfg, mnist.as_ref(), seed, 0)?;
        let with_coresets = if k > 0 {
            build_sequence(cfg, mnist.as_ref(), seed, k)?
        } else {
            plain.clone()
        };
        let init_seq = if k > 0 { &with_coresets } else { &plain };
        let init = initial_posterior(cfg, init_seq, seed)?;
        Ok((plain, with_coresets, init))
    })?;
    let runs = parallel_map(&jobs, |&(seed, method)| {
        let i = cfg.seeds.iter().position(|&s| s == seed).unwrap();
        let (plain, with_coresets, init) = &per_seed[i];
        let seq = if LossSpec::for_method(method).likelihood == LikelihoodSource::CurrentAndCoresets {
            with_coresets
        } else {
            plain
        };
        run_single(cfg, seq, init, method, seed)
    })?;
    Ok(ExperimentResult { runs })
}

/// Metadata written next to the metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema_version: u32,
    pub crate_version: String,
    pub benchmark: Benchmark,
    pub num_tasks: usize,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    /// False when replay used stored real data instead of generators.
    pub continual: bool,
}

/// Runs the experiment and writes metrics, snapshots, MI matrices and
/// metadata under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let result = run_in_memory(cfg)?;
    write_artifacts(cfg, &result)?;
    Ok(result)
}

pub fn write_artifacts(cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<()> {
    let out = &cfg.out_dir;
    snapshot::write_atomic(&out.join("metrics.csv"), metrics_csv(&result.records()).as_bytes())?;
    let meta = RunMetadata {
        schema_version: SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        benchmark: cfg.benchmark,
        num_tasks: cfg.num_tasks,
        methods: cfg.methods.clone(),
        seeds: cfg.seeds.clone(),
        master_seed: cfg.master_seed,
        continual: cfg.is_continual(),
    };
    let meta_text = toml::to_string(&meta).expect("metadata serialises");
    snapshot::write_atomic(&out.join("run.toml"), meta_text.as_bytes())?;
    snapshot::write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    for run in &result.runs {
        if cfg.save_snapshots {
            for (t, snap) in run.snapshots.iter().enumerate() {
                snap.save(&snapshot_path(out, run.method, run.seed, t + 1))?;
            }
            for (t, g) in run.generators.iter().enumerate() {
                replay::save_generators(&generators_path(out, run.method, run.seed, t + 1), g)?;
            }
        }
        if let Some(mi) = &run.mi {
            uncertainty::write_mi_csvs(&run_dir(out, run.method, run.seed), mi)?;
        }
    }
    Ok(())
}

/// Recomputes MI matrices from stored snapshots.
pub fn compute_mi(cfg: &ExperimentConfig) -> Result<Vec<(Method, u64, MiMatrix)>> {
    cfg.validate()?;
    let mnist = match cfg.benchmark {
        Benchmark::Synth => None,
        _ => Some(load_mnist(cfg)?),
    };
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let seq = build_sequence(cfg, mnist.as_ref(), seed, 0)?;
        let tests: Vec<TrainSet> = (0..seq.len()).map(|u| seq.test_set(u)).collect();
        for &method in &cfg.methods {
            let mut snaps = Vec::with_capacity(seq.len());
            for t in 1..=seq.len() {
                let path = snapshot_path(&cfg.out_dir, method, seed, t);
                if !path.exists() {
                    return Err(Error::Data(format!("missing snapshot {}", path.display())));
                }
                snaps.push(PosteriorSnapshot::load(&path)?);
            }
            let m = uncertainty::mi_matrix(
                &snaps,
                &tests,
                cfg.mi_samples.max(2),
                rng::derive_seed(cfg.master_seed, &format!("{method}-mi"), seed),
            )?;
            uncertainty::write_mi_csvs(&run_dir(&cfg.out_dir, method, seed), &m)?;
            out.push((method, seed, m));
        }
    }
    Ok(out)
}

fn figure_number(b: Benchmark) -> &'static str {
    match b {
        Benchmark::Permuted => "fig1",
        Benchmark::SplitMulti => "fig2",
        Benchmark::SplitSingle => "fig3",
        Benchmark::Synth => "synth",
    }
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Folds a finished run directory into per-figure tables. Returns the paths written.
pub fn report(out: &Path) -> Result<Vec<PathBuf>> {
    let meta_path = out.join("run.toml");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: RunMetadata = toml::from_str(&meta_text).map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    let metrics_path = out.join("metrics.csv");
    let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let records = parse_metrics_csv(&text)?;
    let mut written = Vec::new();

    let mut table = String::from("method,task,mean_accuracy,stderr,seeds\n");
    for &method in &meta.methods {
        let seeds: Vec<u64> = meta
            .seeds
            .iter()
            .copied()
            .filter(|&s| records.iter().any(|r| r.method == method && r.seed == s))
            .collect();
        if seeds.is_empty() {
            continue;
        }
        for t in 1..=meta.num_tasks {
            let v = seeds
                .iter()
                .map(|&s| average_accuracy(&records, method, s, t))
                .collect::<Result<Vec<_>>>()?;
            let (m, se) = mean_stderr(&v);
            writeln!(table, "{method},{t},{m},{se},{}", v.len()).unwrap();
        }
    }
    let path = out.join(format!("{}_average_accuracy.csv", figure_number(meta.benchmark)));
    snapshot::write_atomic(&path, table.as_bytes())?;
    written.push(path);

    for (fig, method) in [("fig4", Method::Vcl), ("fig5", Method::Vgr)] {
        let mut scaled = Vec::new();
        let mut summary = String::from("method,seed,separated_rows,rows,separates,max_raw\n");
        for &seed in &meta.seeds {
            let p = run_dir(out, method, seed).join("mi_raw.csv");
            if !p.exists() {
                continue;
            }
            let raw = uncertainty::parse_matrix_csv(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
            let m = MiMatrix::from_raw(raw, 0.0);
            let max_raw = m.raw.iter().flatten().copied().fold(0.0, f64::max);
            writeln!(
                summary,
                "{method},{seed},{},{},{},{max_raw}",
                m.separated_rows(),
                m.size().saturating_sub(1),
                m.separates()
            )
            .unwrap();
            scaled.push(m.scaled);
        }
        if scaled.is_empty() {
            continue;
        }
        let n = scaled[0].len();
        let mean: Vec<Vec<f64>> = (0..n)
            .map(|t| {
                (0..n)
                    .map(|u| scaled.iter().map(|s| s[t][u]).sum::<f64>() / scaled.len() as f64)
                    .collect()
            })
            .collect();
        let path = out.join(format!("{fig}_mi_scaled.csv"));
        snapshot::write_atomic(&path, uncertainty::matrix_csv(&mean).as_bytes())?;
        written.push(path);
        let path = out.join(format!("{fig}_mi_separation.csv"));
        snapshot::write_atomic(&path, summary.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

/// Exit status for an error: 1 validation, 2 data, 3 numerical.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        return 3;
    }
    match e {
        Error::Data(_) | Error::Io { .. } | Error::Idx(_) | Error::Format(_) => 2,
        _ => 1,
    }
}

/// Per-method mean of the final average accuracy, for quick summaries.
pub fn final_summary(result: &ExperimentResult, num_tasks: usize) -> Result<BTreeMap<Method, f64>> {
    let mut out = BTreeMap::new();
    for r in &result.runs {
        if !out.contains_key(&r.method) {
            out.insert(r.method, result.mean_average_accuracy(r.method, num_tasks)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: Method, t: usize, u: usize, acc: f64) -> MetricsRecord {
        MetricsRecord {
            method,
            seed: 0,
            task_trained: t,
            task_evaluated: u,
            accuracy: acc,
        }
    }

    #[test]
    fn average_accuracy_arithmetic() {
        let mut r = vec![rec(Method::Vcl, 1, 1, 0.9), rec(Method::Vcl, 2, 1, 1.0), rec(Method::Vcl, 2, 2, 0.5)];
        assert_eq!(average_accuracy(&r, Method::Vcl, 0, 1).unwrap(), 0.9);
        assert_eq!(average_accuracy(&r, Method::Vcl, 0, 2).unwrap(), 0.75);
        r.reverse();
        assert_eq!(average_accuracy(&r, Method::Vcl, 0, 2).unwrap(), 0.75);
        r.pop();
        assert!(average_accuracy(&r, Method::Vcl, 0, 1).is_err());
        assert!(average_accuracy(&r, Method::Vgr, 0, 2).is_err());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let r = vec![rec(Method::VclCoreset, 1, 1, 0.875), rec(Method::CoresetOnly, 2, 1, 1.0)];
        let text = metrics_csv(&r);
        assert!(text.starts_with("method,seed,task_trained,task_evaluated,accuracy\nvcl-coreset,0,1,1,0.875\n"));
        assert_eq!(parse_metrics_csv(&text).unwrap(), r);
        assert!(parse_metrics_csv("a,b\n").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(matches!(ExperimentConfig::from_toml("benchmark = \"synth\""), Err(Error::Config(m)) if m.contains("schema_version")));
        let ok = ExperimentConfig::from_toml("schema_version = 1\nbenchmark = \"synth\"\nmethods = [\"vgr\", \"plain\"]").unwrap();
        assert_eq!(ok.methods, vec![Method::Vgr, Method::Plain]);
        let err = ExperimentConfig::from_toml("schema_version = 1\nbenchmark = \"synth\"\nepohcs = 3").unwrap_err();
        assert!(err.to_string().contains("epohcs"), "{err}");
        let err = ExperimentConfig::from_toml("schema_version = 1\nbenchmark = \"synth\"\nmethods = [\"ewc\"]").unwrap_err();
        assert!(err.to_string().contains("ewc"), "{err}");
        assert!(ExperimentConfig::from_toml("schema_version = 2\nbenchmark = \"synth\"").is_err());
        assert!(ExperimentConfig::from_toml("schema_version = 1\nbenchmark = \"permuted\"").is_err());
        assert!(ExperimentConfig::from_toml("schema_version = 1\nbenchmark = \"synth\"\nepochs = 0").is_err());
        let round = ExperimentConfig::from_toml(&ok.to_toml()).unwrap();
        assert_eq!(round, ok);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Data("x".into())), 2);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 3);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_stderr(&[0.5, 0.5, 0.5]), (0.5, 0.0));
        let (m, se) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-12);
    }
}

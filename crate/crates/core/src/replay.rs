//! Class-conditional generators of past tasks and the augmented dataset
//! they feed.
//!
//! One generator is trained per class at the end of each task. Later tasks
//! draw a fixed number of samples per (task, class) generator and train on
//! the union of those samples and the current real data.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bnn::{self, decode_arch, encode_arch, Activation, Architecture, DenseLayer, WeightSet};
use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::objectives::{adam_step, AdamParams, AdamState, TrainSet};
use crate::rng::Rng;
use crate::snapshot::{self, Decoder, Encoder, Kind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    GanFc,
    ClassGaussian,
    /// Stores the real class data and replays it in order. Not continual;
    /// only meaningful as an oracle.
    ExactReplay,
}

impl GeneratorKind {
    pub fn is_continual(self) -> bool {
        self != GeneratorKind::ExactReplay
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub latent_dim: usize,
    /// Generator hidden widths; the output width is the data dimension and
    /// the discriminator uses the same widths in reverse.
    pub hidden: Vec<usize>,
    pub leaky_alpha: f64,
    pub lr: f64,
    pub beta1: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Lower bound on per-dimension standard deviation for `class-gaussian`.
    pub sigma_floor: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::GanFc,
            latent_dim: 100,
            hidden: vec![256, 512, 1024],
            leaky_alpha: 0.2,
            lr: 2e-4,
            beta1: 0.5,
            epochs: 200,
            batch_size: 64,
            sigma_floor: 1e-3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == GeneratorKind::GanFc {
            if self.latent_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
                return Err(Error::Config("generator widths must be positive".into()));
            }
            if !(self.lr > 0.0) || self.batch_size == 0 {
                return Err(Error::Config("generator lr and batch size must be positive".into()));
            }
        }
        if !(self.sigma_floor >= 0.0) {
            return Err(Error::Config("sigma floor must be non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn generator_arch(&self, dim: usize) -> Architecture {
        Architecture::new(self.latent_dim, self.hidden.clone(), dim).with_activation(Activation::LeakyRelu(self.leaky_alpha))
    }

    fn discriminator_arch(&self, dim: usize) -> Architecture {
        let rev: Vec<usize> = self.hidden.iter().rev().copied().collect();
        Architecture::new(dim, rev, 1).with_activation(Activation::LeakyRelu(self.leaky_alpha))
    }
}

/// A trained fully-connected GAN.
#[derive(Clone, Debug, PartialEq)]
pub struct Gan {
    pub generator_arch: Architecture,
    pub generator: WeightSet,
    pub discriminator_arch: Architecture,
    pub discriminator: WeightSet,
}

impl Gan {
    /// Generator output in `[0, 1]` for latent rows `z`.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let raw = bnn::forward_values(&self.generator_arch, &self.generator, z)?;
        Ok(raw.map(|v| (0.5 * (v.tanh() + 1.0)).clamp(0.0, 1.0)))
    }

    /// Discriminator probability that each row is real.
    pub fn discriminate(&self, x: &Tensor) -> Result<Vec<f64>> {
        let logits = bnn::forward_values(&self.discriminator_arch, &self.discriminator, x)?;
        Ok(logits.data().iter().map(|&l| crate::diffcore::kernels::sigmoid(l)).collect())
    }

    pub fn latent_dim(&self) -> usize {
        self.generator_arch.input_dim
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Tensor> {
        let z: Vec<f64> = (0..n * self.latent_dim()).map(|_| StandardNormal.sample(rng)).collect();
        self.generate(&Tensor::from_parts(vec![n, self.latent_dim()], z))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GeneratorModel {
    Gan(Gan),
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    Exact { data: Tensor },
}

/// Generative model of one class of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassGenerator {
    /// Task-relative label, as used in training targets.
    pub label: usize,
    pub task: usize,
    pub dim: usize,
    pub model: GeneratorModel,
}

impl ClassGenerator {
    /// `n` samples with values in `[0, 1]`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Tensor> {
        match &self.model {
            GeneratorModel::Gan(g) => g.sample(n, rng),
            GeneratorModel::Gaussian { mean, std } => {
                let mut out = Vec::with_capacity(n * self.dim);
                for _ in 0..n {
                    for (m, s) in mean.iter().zip(std) {
                        let e: f64 = StandardNormal.sample(rng);
                        out.push((m + s * e).clamp(0.0, 1.0));
                    }
                }
                Ok(Tensor::from_parts(vec![n, self.dim], out))
            }
            GeneratorModel::Exact { data } => {
                let m = data.rows();
                let idx: Vec<usize> = (0..n).map(|i| i % m).collect();
                Ok(data.select_rows(&idx))
            }
        }
    }
}

fn bind_weights(tape: &mut Tape, w: &WeightSet) -> Vec<(NodeId, NodeId)> {
    w.layers
        .iter()
        .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
        .collect()
}

fn flat_params(w: &WeightSet) -> Vec<&Tensor> {
    w.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
}

fn flat_params_mut(w: &mut WeightSet) -> Vec<&mut Tensor> {
    w.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
}

fn take_grads(grads: &mut crate::diffcore::Gradients, nodes: &[(NodeId, NodeId)]) -> Vec<Tensor> {
    nodes.iter().flat_map(|&(w, b)| [grads.take(w), grads.take(b)]).collect()
}

/// Mean of `softplus(sign * logits)`.
fn softplus_mean(tape: &mut Tape, logits: NodeId, sign: f64) -> Result<NodeId> {
    let s = tape.scale(logits, sign)?;
    let sp = tape.softplus(s)?;
    Ok(tape.mean(sp)?)
}

fn latent(n: usize, d: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_parts(vec![n, d], (0..n * d).map(|_| StandardNormal.sample(rng)).collect())
}

/// Non-saturating GAN training with alternating Adam steps.
pub fn train_gan(data: &Tensor, cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Gan> {
    let dim = data.cols();
    let garch = cfg.generator_arch(dim);
    let darch = cfg.discriminator_arch(dim);
    garch.validate()?;
    darch.validate()?;
    let mut gen = WeightSet::glorot(&garch, rng);
    let mut disc = WeightSet::glorot(&darch, rng);
    let mut gadam = AdamState::new(&flat_params(&gen));
    let mut dadam = AdamState::new(&flat_params(&disc));
    let hp = cfg.adam();
    let n = data.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let bs = cfg.batch_size.min(n);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(bs) {
            let m = chunk.len();
            let current = Gan {
                generator_arch: garch.clone(),
                generator: gen.clone(),
                discriminator_arch: darch.clone(),
                discriminator: disc.clone(),
            };
            let fake = current.generate(&latent(m, cfg.latent_dim, rng))?;

            let mut tape = Tape::new();
            let dn = bind_weights(&mut tape, &disc);
            let xr = tape.leaf(data.select_rows(chunk));
            let xf = tape.leaf(fake);
            let lr_ = bnn::forward_nodes(&mut tape, &darch, &dn, xr)?;
            let lf = bnn::forward_nodes(&mut tape, &darch, &dn, xf)?;
            let a = softplus_mean(&mut tape, lr_, -1.0)?;
            let b = softplus_mean(&mut tape, lf, 1.0)?;
            let loss = tape.add(a, b)?;
            let mut grads = tape.backward(loss)?;
            let g = take_grads(&mut grads, &dn);
            adam_step(&mut dadam, &mut flat_params_mut(&mut disc), &g, &hp)?;

            let mut tape = Tape::new();
            let gn = bind_weights(&mut tape, &gen);
            let dn = bind_weights(&mut tape, &disc);
            let z = tape.leaf(latent(m, cfg.latent_dim, rng));
            let raw = bnn::forward_nodes(&mut tape, &garch, &gn, z)?;
            let t = tape.tanh(raw)?;
            let t = tape.scale(t, 0.5)?;
            let half = tape.leaf(Tensor::filled(&[m, dim], 0.5));
            let x = tape.add(t, half)?;
            let logits = bnn::forward_nodes(&mut tape, &darch, &dn, x)?;
            let loss = softplus_mean(&mut tape, logits, -1.0)?;
            let mut grads = tape.backward(loss)?;
            let g = take_grads(&mut grads, &gn);
            adam_step(&mut gadam, &mut flat_params_mut(&mut gen), &g, &hp)?;
        }
    }
    Ok(Gan {
        generator_arch: garch,
        generator: gen,
        discriminator_arch: darch,
        discriminator: disc,
    })
}

/// Per-dimension mean and standard deviation, floored at `floor`.
pub fn fit_class_gaussian(data: &Tensor, floor: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (data.rows(), data.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(data.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n as f64).sqrt().max(floor)).collect();
    (mean, std)
}

/// One generator per class present in `data`, ordered by label.
pub fn train_generators(data: &TrainSet, task: usize, cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Vec<ClassGenerator>> {
    cfg.validate()?;
    let mut labels = data.targets.clone();
    labels.sort_unstable();
    labels.dedup();
    let dim = data.inputs.cols();
    let mut out = Vec::with_capacity(labels.len());
    for label in labels {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.targets[i] == label).collect();
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "class {label} of task {task} has {} sample(s); generators need at least 2",
                idx.len()
            )));
        }
        let x = data.inputs.select_rows(&idx);
        let model = match cfg.kind {
            GeneratorKind::GanFc => GeneratorModel::Gan(train_gan(&x, cfg, rng)?),
            GeneratorKind::ClassGaussian => {
                let (mean, std) = fit_class_gaussian(&x, cfg.sigma_floor);
                GeneratorModel::Gaussian { mean, std }
            }
            GeneratorKind::ExactReplay => GeneratorModel::Exact { data: x },
        };
        out.push(ClassGenerator { label, task, dim, model });
    }
    Ok(out)
}

/// Generated examples with their labels and source tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplaySet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub source_tasks: Vec<usize>,
}

impl ReplaySet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Exactly `n_per_class` samples from every generator, in generator order.
pub fn sample_replay(generators: &[ClassGenerator], n_per_class: usize, rng: &mut Rng) -> Result<ReplaySet> {
    let dim = generators.first().map_or(0, |g| g.dim);
    if generators.iter().any(|g| g.dim != dim) {
        return Err(Error::InputMismatch("generators disagree on input dimension".into()));
    }
    let mut parts = Vec::with_capacity(generators.len());
    let mut labels = Vec::with_capacity(generators.len() * n_per_class);
    let mut source_tasks = Vec::with_capacity(labels.capacity());
    for g in generators {
        parts.push(g.sample(n_per_class, rng)?);
        labels.extend(std::iter::repeat(g.label).take(n_per_class));
        source_tasks.extend(std::iter::repeat(g.task).take(n_per_class));
    }
    let inputs = if parts.is_empty() {
        Tensor::zeros(&[0, 0])
    } else {
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?
    };
    Ok(ReplaySet {
        inputs,
        labels,
        source_tasks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Real,
    Generated { task: usize },
}

/// Real task data followed by generated replay.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDataset {
    pub set: TrainSet,
    pub origin: Vec<Origin>,
}

impl AugmentedDataset {
    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn real_count(&self) -> usize {
        self.origin.iter().filter(|o| **o == Origin::Real).count()
    }

    pub fn generated_count(&self) -> usize {
        self.len() - self.real_count()
    }
}

/// Union of `current` and `replay`. In multi-head mode replayed rows are
/// routed to their source task's head.
pub fn build_augmented_dataset(current: &TrainSet, replay: &ReplaySet) -> Result<AugmentedDataset> {
    let mut origin = vec![Origin::Real; current.len()];
    if replay.is_empty() {
        return Ok(AugmentedDataset {
            set: current.clone(),
            origin,
        });
    }
    if replay.inputs.cols() != current.inputs.cols() {
        return Err(Error::InputMismatch(format!(
            "replay has {} features, task data has {}",
            replay.inputs.cols(),
            current.inputs.cols()
        )));
    }
    let generated = TrainSet {
        inputs: replay.inputs.clone(),
        targets: replay.labels.clone(),
        heads: current.heads.as_ref().map(|_| replay.source_tasks.clone()),
    };
    origin.extend(replay.source_tasks.iter().map(|&task| Origin::Generated { task }));
    Ok(AugmentedDataset {
        set: TrainSet::concat(&[current, &generated])?,
        origin,
    })
}

fn encode_weights(enc: &mut Encoder, arch: &Architecture, w: &WeightSet) {
    encode_arch(enc, arch);
    for l in &w.layers {
        enc.tensor(&l.w);
        enc.tensor(&l.b);
    }
}

fn decode_weights(dec: &mut Decoder<'_>) -> Result<(Architecture, WeightSet)> {
    let arch = decode_arch(dec)?;
    arch.validate()?;
    let mut layers = Vec::new();
    for _ in 0..arch.layer_dims().len() {
        let w = dec.tensor()?;
        let b = dec.tensor()?;
        layers.push(DenseLayer { w, b });
    }
    let ws = WeightSet { layers };
    ws.check(&arch)?;
    Ok((arch, ws))
}

pub fn generators_to_bytes(generators: &[ClassGenerator]) -> Vec<u8> {
    let mut enc = Encoder::new(Kind::Generators);
    enc.usize(generators.len());
    for g in generators {
        enc.usize(g.task);
        enc.usize(g.label);
        enc.usize(g.dim);
        match &g.model {
            GeneratorModel::Gan(gan) => {
                enc.u8(0);
                encode_weights(&mut enc, &gan.generator_arch, &gan.generator);
                encode_weights(&mut enc, &gan.discriminator_arch, &gan.discriminator);
            }
            GeneratorModel::Gaussian { mean, std } => {
                enc.u8(1);
                enc.tensor(&Tensor::vector(mean.clone()));
                enc.tensor(&Tensor::vector(std.clone()));
            }
            GeneratorModel::Exact { data } => {
                enc.u8(2);
                enc.tensor(data);
            }
        }
    }
    enc.finish()
}

pub fn generators_from_bytes(bytes: &[u8]) -> Result<Vec<ClassGenerator>> {
    let mut dec = Decoder::new(bytes, Kind::Generators)?;
    let n = dec.usize()?;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let task = dec.usize()?;
        let label = dec.usize()?;
        let dim = dec.usize()?;
        let model = match dec.u8()? {
            0 => {
                let (generator_arch, generator) = decode_weights(&mut dec)?;
                let (discriminator_arch, discriminator) = decode_weights(&mut dec)?;
                GeneratorModel::Gan(Gan {
                    generator_arch,
                    generator,
                    discriminator_arch,
                    discriminator,
                })
            }
            1 => GeneratorModel::Gaussian {
                mean: dec.tensor()?.into_data(),
                std: dec.tensor()?.into_data(),
            },
            2 => GeneratorModel::Exact { data: dec.tensor()? },
            t => return Err(Error::Format(format!("unknown generator tag {t}"))),
        };
        out.push(ClassGenerator { label, task, dim, model });
    }
    dec.finish()?;
    Ok(out)
}

pub fn save_generators(path: &Path, generators: &[ClassGenerator]) -> Result<()> {
    snapshot::write_atomic(path, &generators_to_bytes(generators))
}

pub fn load_generators(path: &Path) -> Result<Vec<ClassGenerator>> {
    generators_from_bytes(&snapshot::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn gaussian_cfg() -> GeneratorConfig {
        GeneratorConfig {
            kind: GeneratorKind::ClassGaussian,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn constant_class_samples_near_constant() {
        let x = Tensor::matrix(3, 2, vec![0.3, 0.7, 0.3, 0.7, 0.3, 0.7]).unwrap();
        let data = TrainSet::new(x, vec![4, 4, 4], None).unwrap();
        let gens = train_generators(&data, 0, &gaussian_cfg(), &mut seeded(1)).unwrap();
        assert_eq!(gens.len(), 1);
        let s = gens[0].sample(100, &mut seeded(2)).unwrap();
        for i in 0..100 {
            assert!((s.row(i)[0] - 0.3).abs() < 0.01);
            assert!((s.row(i)[1] - 0.7).abs() < 0.01);
        }
    }

    #[test]
    fn too_few_samples_names_the_class() {
        let x = Tensor::matrix(3, 1, vec![0.1, 0.2, 0.3]).unwrap();
        let data = TrainSet::new(x, vec![0, 0, 7], None).unwrap();
        let err = train_generators(&data, 1, &gaussian_cfg(), &mut seeded(1)).unwrap_err();
        assert!(err.to_string().contains("class 7"), "{err}");
    }

    #[test]
    fn gaussian_moments_match_fit() {
        let mut rng = seeded(5);
        let n = 400;
        let x: Vec<f64> = (0..n * 2)
            .map(|i| {
                let e: f64 = StandardNormal.sample(&mut rng);
                let base = if i % 2 == 0 { 0.4 } else { 0.6 };
                base + 0.05 * e
            })
            .collect();
        let data = TrainSet::new(Tensor::matrix(n, 2, x).unwrap(), vec![0; n], None).unwrap();
        let g = &train_generators(&data, 0, &gaussian_cfg(), &mut rng).unwrap()[0];
        let GeneratorModel::Gaussian { mean, std } = &g.model else { unreachable!() };
        let m = 100_000;
        let s = g.sample(m, &mut rng).unwrap();
        for d in 0..2 {
            let col: Vec<f64> = (0..m).map(|i| s.row(i)[d]).collect();
            let mu = col.iter().sum::<f64>() / m as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (m - 1) as f64;
            let se_mean = std[d] / (m as f64).sqrt();
            let se_var = std[d] * std[d] * (2.0 / (m - 1) as f64).sqrt();
            assert!((mu - mean[d]).abs() < 5.0 * se_mean, "dim {d} mean");
            assert!((var - std[d] * std[d]).abs() < 5.0 * se_var, "dim {d} var");
        }
    }

    fn two_task_generators() -> Vec<ClassGenerator> {
        let mut gens = Vec::new();
        for task in 0..2 {
            let x = Tensor::matrix(4, 3, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
            let data = TrainSet::new(x, vec![0, 1, 0, 1], None).unwrap();
            gens.extend(train_generators(&data, task, &gaussian_cfg(), &mut seeded(task as u64)).unwrap());
        }
        gens
    }

    #[test]
    fn replay_counts_are_exact() {
        let gens = two_task_generators();
        assert!(sample_replay(&gens, 0, &mut seeded(1)).unwrap().is_empty());
        let r = sample_replay(&gens, 5, &mut seeded(1)).unwrap();
        assert_eq!(r.len(), 20);
        for task in 0..2 {
            for label in 0..2 {
                let c = (0..20).filter(|&i| r.source_tasks[i] == task && r.labels[i] == label).count();
                assert_eq!(c, 5);
            }
        }
        assert!(r.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(r, sample_replay(&gens, 5, &mut seeded(1)).unwrap());
    }

    #[test]
    fn augmented_dataset_bookkeeping() {
        let current = TrainSet::new(Tensor::zeros(&[100, 3]), vec![0; 100], None).unwrap();
        let empty = sample_replay(&[], 10, &mut seeded(0)).unwrap();
        assert_eq!(build_augmented_dataset(&current, &empty).unwrap().set, current);
        let gens = two_task_generators();
        let r = sample_replay(&gens, 12, &mut seeded(3)).unwrap();
        assert_eq!(r.len(), 48);
        let r = ReplaySet {
            inputs: r.inputs.select_rows(&(0..50).map(|i| i % 48).collect::<Vec<_>>()),
            labels: (0..50).map(|i| r.labels[i % 48]).collect(),
            source_tasks: (0..50).map(|i| r.source_tasks[i % 48]).collect(),
        };
        let aug = build_augmented_dataset(&current, &r).unwrap();
        assert_eq!((aug.len(), aug.real_count(), aug.generated_count()), (150, 100, 50));
        assert!(aug.origin[100..]
            .iter()
            .all(|o| matches!(o, Origin::Generated { task } if *task < 2)));
        let bad = TrainSet::new(Tensor::zeros(&[2, 4]), vec![0, 0], None).unwrap();
        assert!(build_augmented_dataset(&bad, &r).is_err());
    }

    #[test]
    fn multi_head_replay_routes_to_source_head() {
        let gens = two_task_generators();
        let r = sample_replay(&gens, 2, &mut seeded(3)).unwrap();
        let current = TrainSet::on_head(Tensor::zeros(&[3, 3]), vec![0, 1, 0], Some(2)).unwrap();
        let aug = build_augmented_dataset(&current, &r).unwrap();
        let heads = aug.set.heads.unwrap();
        assert_eq!(&heads[..3], &[2, 2, 2]);
        assert_eq!(&heads[3..], &r.source_tasks[..]);
    }

    #[test]
    fn exact_replay_cycles_stored_rows() {
        let x = Tensor::matrix(3, 1, vec![0.1, 0.2, 0.3]).unwrap();
        let data = TrainSet::new(x, vec![0, 0, 0], None).unwrap();
        let cfg = GeneratorConfig {
            kind: GeneratorKind::ExactReplay,
            ..GeneratorConfig::default()
        };
        let g = &train_generators(&data, 0, &cfg, &mut seeded(0)).unwrap()[0];
        assert_eq!(g.sample(4, &mut seeded(0)).unwrap().data(), &[0.1, 0.2, 0.3, 0.1]);
        assert!(!cfg.kind.is_continual());
    }

    fn gan_cfg(epochs: usize) -> GeneratorConfig {
        GeneratorConfig {
            kind: GeneratorKind::GanFc,
            latent_dim: 8,
            hidden: vec![32, 64],
            epochs,
            batch_size: 32,
            ..GeneratorConfig::default()
        }
    }

    fn cross_pixel(r: usize, c: usize) -> f64 {
        if r == 3 || r == 4 || c == 3 || c == 4 {
            0.8
        } else {
            0.2
        }
    }

    /// 8x8 cross glyph with uniform pixel noise.
    fn toy_images(n: usize, rng: &mut Rng) -> Tensor {
        let mut out = Vec::with_capacity(n * 64);
        for _ in 0..n {
            for r in 0..8 {
                for c in 0..8 {
                    out.push(cross_pixel(r, c) + rng.gen_range(-0.15..0.15));
                }
            }
        }
        Tensor::matrix(n, 64, out).unwrap()
    }

    #[test]
    fn gan_discriminator_probe_is_near_chance() {
        let mut rng = seeded(21);
        let train = toy_images(256, &mut rng);
        let held_out = toy_images(200, &mut rng);
        let data = TrainSet::new(train, vec![0; 256], None).unwrap();
        let gens = train_generators(&data, 0, &gan_cfg(200), &mut rng).unwrap();
        let GeneratorModel::Gan(gan) = &gens[0].model else { unreachable!() };
        let fake = gan.sample(200, &mut rng).unwrap();
        assert!(fake.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let real_ok = gan.discriminate(&held_out).unwrap().iter().filter(|&&p| p > 0.5).count();
        let fake_ok = gan.discriminate(&fake).unwrap().iter().filter(|&&p| p <= 0.5).count();
        let acc = (real_ok + fake_ok) as f64 / 400.0;
        assert!(acc > 0.3 && acc < 0.7, "discriminator accuracy {acc}");
        let mut err = 0.0;
        for p in 0..64 {
            let m = (0..200).map(|i| fake.row(i)[p]).sum::<f64>() / 200.0;
            err += (m - cross_pixel(p / 8, p % 8)).abs() / 64.0;
        }
        assert!(err < 0.1, "generated mean is off the glyph by {err}");
    }

    #[test]
    fn generator_snapshot_round_trip() {
        let mut rng = seeded(2);
        let x = toy_images(8, &mut rng);
        let data = TrainSet::new(x, vec![0, 1, 0, 1, 0, 1, 0, 1], None).unwrap();
        let mut gens = train_generators(&data, 3, &gan_cfg(1), &mut rng).unwrap();
        gens.extend(train_generators(&data, 4, &gaussian_cfg(), &mut rng).unwrap());
        let bytes = generators_to_bytes(&gens);
        assert_eq!(generators_from_bytes(&bytes).unwrap(), gens);
        assert!(crate::bnn::MeanFieldPosterior::from_bytes(&bytes).is_err());
        assert!(generators_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

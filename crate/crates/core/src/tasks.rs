//! Datasets and continual-learning task sequences.
//!
//! Supports IDX ingestion (the MNIST file format), permuted and split
//! benchmarks, mean-pool downscaling and synthetic Gaussian-blob tasks for
//! fast runs.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnn::HeadMode;
use crate::coreset::Coreset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::objectives::TrainSet;
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Failure while parsing an IDX file.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdxError {
    #[error("{file}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { file: String, expected: u32, found: u32 },
    #[error("{file}: truncated (need {needed} bytes, have {have})")]
    Truncated { file: String, needed: usize, have: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{file}: empty dataset")]
    Empty { file: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labelled examples with inputs in `[0, 1]`, one row per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// `(rows, cols)` when the inputs are flattened images.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Data(format!(
                "inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} >= {num_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            split,
            image_shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Sorted set of labels that occur.
    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Rows `indices` in order. Returns `None` if `indices` is empty.
    pub fn subset(&self, indices: &[usize]) -> Option<Self> {
        if indices.is_empty() {
            return None;
        }
        Some(Self {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            image_shape: self.image_shape,
        })
    }

    /// Row indices of each class, ascending.
    pub fn indices_by_class(&self) -> Vec<(usize, Vec<usize>)> {
        self.classes()
            .into_iter()
            .map(|c| (c, (0..self.len()).filter(|&i| self.labels[i] == c).collect()))
            .collect()
    }
}

fn be_u32(bytes: &[u8], at: usize, file: &str) -> std::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| IdxError::Truncated {
            file: file.to_string(),
            needed: at + 4,
            have: bytes.len(),
        })
}

/// Parses IDX image bytes into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], file: &str) -> std::result::Result<(usize, usize, usize, Vec<u8>), IdxError> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::BadMagic {
            file: file.into(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let needed = 16 + n * rows * cols;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            file: file.into(),
            needed,
            have: bytes.len(),
        });
    }
    if n == 0 || rows * cols == 0 {
        return Err(IdxError::Empty { file: file.into() });
    }
    Ok((n, rows, cols, bytes[16..needed].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], file: &str) -> std::result::Result<Vec<u8>, IdxError> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            file: file.into(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            file: file.into(),
            needed,
            have: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Loads an IDX image/label pair, scaling pixels by `1/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&lbl_bytes, &labels_path.display().to_string())?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    let inputs = Tensor::matrix(n, rows * cols, pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    let mut ds = Dataset::new(inputs, labels, num_classes, split)?;
    ds.image_shape = Some((rows, cols));
    Ok(ds)
}

/// Standard MNIST file names inside `dir`: `(train, test)`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        Split::Test,
    )?;
    Ok((train, test))
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Mean-pools `factor x factor` blocks of each image.
pub fn downscale(ds: &Dataset, factor: usize) -> Result<Dataset> {
    let (rows, cols) = ds
        .image_shape
        .ok_or_else(|| Error::Data("downscale needs image-shaped inputs".into()))?;
    if factor == 0 || rows % factor != 0 || cols % factor != 0 {
        return Err(Error::Data(format!("factor {factor} does not divide {rows}x{cols}")));
    }
    if factor == 1 {
        return Ok(ds.clone());
    }
    let (r2, c2) = (rows / factor, cols / factor);
    let norm = (factor * factor) as f64;
    let mut data = Vec::with_capacity(ds.len() * r2 * c2);
    for i in 0..ds.len() {
        let img = ds.inputs.row(i);
        for br in 0..r2 {
            for bc in 0..c2 {
                let mut s = 0.0;
                for dr in 0..factor {
                    let base = (br * factor + dr) * cols + bc * factor;
                    s += img[base..base + factor].iter().sum::<f64>();
                }
                data.push(s / norm);
            }
        }
    }
    Ok(Dataset {
        inputs: Tensor::matrix(ds.len(), r2 * c2, data)?,
        labels: ds.labels.clone(),
        num_classes: ds.num_classes,
        split: ds.split,
        image_shape: Some((r2, c2)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Benchmark {
    Permuted,
    SplitSingle,
    SplitMulti,
    Synth,
}

impl Benchmark {
    pub const ALL: [Benchmark; 4] = [
        Benchmark::Permuted,
        Benchmark::SplitSingle,
        Benchmark::SplitMulti,
        Benchmark::Synth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Permuted => "permuted",
            Benchmark::SplitSingle => "split-single",
            Benchmark::SplitMulti => "split-multi",
            Benchmark::Synth => "synth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One task of a sequence. Labels are head-relative in multi-head mode.
#[derive(Clone, Debug)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    /// Original class ids covered by this task.
    pub classes: Vec<usize>,
    /// Pixel permutation applied to this task's inputs.
    pub permutation: Option<Vec<usize>>,
    /// Training examples held back from the main loop.
    pub coreset: Option<Coreset>,
}

#[derive(Clone, Debug)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    pub head_mode: HeadMode,
    pub benchmark: Benchmark,
    /// Width of the network output layer.
    pub output_dim: usize,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].train.dim()
    }

    fn head(&self, task: usize) -> Option<usize> {
        match self.head_mode {
            HeadMode::Single => None,
            HeadMode::Multi { .. } => Some(task),
        }
    }

    /// Training data of task `task` as network targets.
    pub fn train_set(&self, task: usize) -> TrainSet {
        let d = &self.tasks[task].train;
        TrainSet {
            inputs: d.inputs.clone(),
            targets: d.labels.clone(),
            heads: self.head(task).map(|h| vec![h; d.len()]),
        }
    }

    pub fn test_set(&self, task: usize) -> TrainSet {
        let d = &self.tasks[task].test;
        TrainSet {
            inputs: d.inputs.clone(),
            targets: d.labels.clone(),
            heads: self.head(task).map(|h| vec![h; d.len()]),
        }
    }

    /// Output column for a task-relative label.
    pub fn output_column(&self, task: usize, label: usize) -> usize {
        match self.head_mode {
            HeadMode::Single => label,
            HeadMode::Multi { heads } => task * (self.output_dim / heads) + label,
        }
    }
}

fn permute_rows(ds: &Dataset, perm: &[usize]) -> Dataset {
    let d = ds.dim();
    let mut data = Vec::with_capacity(ds.inputs.len());
    for i in 0..ds.len() {
        let row = ds.inputs.row(i);
        data.extend(perm.iter().map(|&j| row[j]));
    }
    Dataset {
        inputs: Tensor::from_parts(vec![ds.len(), d], data),
        image_shape: ds.image_shape,
        ..ds.clone()
    }
}

/// Applies `perm` to a single input vector: `out[j] = x[perm[j]]`.
pub fn apply_permutation(x: &[f64], perm: &[usize]) -> Vec<f64> {
    perm.iter().map(|&j| x[j]).collect()
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Task 1 is the identity; later tasks use independent uniform permutations.
pub fn make_permuted_sequence(train: &Dataset, test: &Dataset, num_tasks: usize, master_seed: u64) -> Result<TaskSequence> {
    if num_tasks == 0 {
        return Err(Error::InvalidArgument("need at least one task".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::Data("train and test input dimensions differ".into()));
    }
    let d = train.dim();
    let classes = train.classes();
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let mut perm: Vec<usize> = (0..d).collect();
        if t > 0 {
            perm.shuffle(&mut rng::stream(master_seed, "permutation", t as u64));
        }
        tasks.push(Task {
            train: permute_rows(train, &perm),
            test: permute_rows(test, &perm),
            classes: classes.clone(),
            permutation: Some(perm),
            coreset: None,
        });
    }
    Ok(TaskSequence {
        tasks,
        head_mode: HeadMode::Single,
        benchmark: Benchmark::Permuted,
        output_dim: train.num_classes,
    })
}

pub const DEFAULT_SPLIT_PAIRS: [(usize, usize); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];

fn split_filter(ds: &Dataset, pair: (usize, usize), relabel: bool) -> Result<Dataset> {
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.labels[i] == pair.0 || ds.labels[i] == pair.1)
        .collect();
    let mut sub = ds
        .subset(&idx)
        .ok_or_else(|| Error::Data(format!("no examples of classes {pair:?}")))?;
    if relabel {
        for l in sub.labels.iter_mut() {
            *l = usize::from(*l == pair.1);
        }
        sub.num_classes = 2;
    }
    Ok(sub)
}

/// One task per class pair. Multi-head relabels each pair to `{0, 1}`.
pub fn make_split_sequence(
    train: &Dataset,
    test: &Dataset,
    pairs: &[(usize, usize)],
    head_mode: HeadMode,
) -> Result<TaskSequence> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("need at least one class pair".into()));
    }
    let mut seen = BTreeSet::new();
    for &(a, b) in pairs {
        if a == b || !seen.insert(a) || !seen.insert(b) {
            return Err(Error::InvalidArgument(format!("class pairs overlap: {pairs:?}")));
        }
    }
    let relabel = match head_mode {
        HeadMode::Single => false,
        HeadMode::Multi { heads } => {
            if heads != pairs.len() {
                return Err(Error::InvalidArgument(format!(
                    "{heads} heads for {} tasks",
                    pairs.len()
                )));
            }
            true
        }
    };
    let mut tasks = Vec::with_capacity(pairs.len());
    for &pair in pairs {
        tasks.push(Task {
            train: split_filter(train, pair, relabel)?,
            test: split_filter(test, pair, relabel)?,
            classes: vec![pair.0, pair.1],
            permutation: None,
            coreset: None,
        });
    }
    let output_dim = match head_mode {
        HeadMode::Single => train.num_classes,
        HeadMode::Multi { heads } => 2 * heads,
    };
    Ok(TaskSequence {
        tasks,
        head_mode,
        benchmark: match head_mode {
            HeadMode::Single => Benchmark::SplitSingle,
            HeadMode::Multi { .. } => Benchmark::SplitMulti,
        },
        output_dim,
    })
}

/// Gaussian-blob split tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub dim: usize,
    /// Minimum distance between class centres, in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub head_mode: HeadMode,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            dim: 8,
            separation: 6.0,
            sigma: 0.05,
            train_per_class: 100,
            test_per_class: 100,
            head_mode: HeadMode::Single,
        }
    }
}

/// Class centres of a blob spec, indexed by class.
///
/// Centres sit at `0.5 +- s * e_i` on the coordinate axes, shuffled per
/// seed, so any two are at least `separation * sigma` apart.
pub fn blob_centres(spec: &BlobSpec, num_classes: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(2..=16).contains(&spec.dim) {
        return Err(Error::InvalidArgument(format!("blob dim {} outside 2..=16", spec.dim)));
    }
    if num_classes > 2 * spec.dim {
        return Err(Error::InvalidArgument(format!(
            "{num_classes} classes need dim >= {}",
            num_classes.div_ceil(2)
        )));
    }
    if !(spec.sigma > 0.0) || !(spec.separation > 0.0) {
        return Err(Error::InvalidArgument("blob sigma and separation must be positive".into()));
    }
    let s = spec.separation * spec.sigma / std::f64::consts::SQRT_2;
    let mut slots: Vec<(usize, f64)> = (0..spec.dim).flat_map(|i| [(i, s), (i, -s)]).collect();
    slots.shuffle(&mut rng::stream(seed, "blob-centres", 0));
    Ok(slots[..num_classes]
        .iter()
        .map(|&(axis, offset)| {
            let mut c = vec![0.5; spec.dim];
            c[axis] += offset;
            c
        })
        .collect())
}

fn blob_dataset(
    spec: &BlobSpec,
    centres: &[Vec<f64>],
    classes: (usize, usize),
    per_class: usize,
    split: Split,
    relabel: bool,
    rng: &mut rng::Rng,
) -> Result<Dataset> {
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * per_class * spec.dim);
    let mut labels = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let (class, local) = if i % 2 == 0 { (classes.0, 0) } else { (classes.1, 1) };
        data.extend(centres[class].iter().map(|&c| (c + noise.sample(rng)).clamp(0.0, 1.0)));
        labels.push(if relabel { local } else { class });
    }
    let num_classes = if relabel { 2 } else { centres.len() };
    Dataset::new(Tensor::matrix(labels.len(), spec.dim, data)?, labels, num_classes, split)
}

/// `num_tasks` blob tasks with class pairs `(2t, 2t + 1)`.
pub fn synth_tasks(spec: &BlobSpec, num_tasks: usize, seed: u64) -> Result<TaskSequence> {
    if num_tasks == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::InvalidArgument("blob tasks need tasks and examples".into()));
    }
    let num_classes = 2 * num_tasks;
    let centres = blob_centres(spec, num_classes, seed)?;
    let relabel = match spec.head_mode {
        HeadMode::Single => false,
        HeadMode::Multi { heads } => {
            if heads != num_tasks {
                return Err(Error::InvalidArgument(format!("{heads} heads for {num_tasks} tasks")));
            }
            true
        }
    };
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let pair = (2 * t, 2 * t + 1);
        let mut r = rng::stream(seed, "blob-samples", t as u64);
        tasks.push(Task {
            train: blob_dataset(spec, &centres, pair, spec.train_per_class, Split::Train, relabel, &mut r)?,
            test: blob_dataset(spec, &centres, pair, spec.test_per_class, Split::Test, relabel, &mut r)?,
            classes: vec![pair.0, pair.1],
            permutation: None,
            coreset: None,
        });
    }
    Ok(TaskSequence {
        tasks,
        head_mode: spec.head_mode,
        benchmark: Benchmark::Synth,
        output_dim: num_classes,
    })
}

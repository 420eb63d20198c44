//! Mean-field Gaussian Bayesian neural network.
//!
//! Every weight and bias has an independent Gaussian `N(mu, sigma^2)` with
//! `sigma = softplus(rho)`. Weights are sampled with the reparameterisation
//! `w = mu + sigma * eps`, recorded on a [`Tape`] so gradients reach both
//! `mu` and `rho`.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::kernels::{self, gemm, softplus, softplus_inv};
use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::snapshot::{self, Decoder, Encoder, Kind};

/// Monte Carlo samples used by [`predict`] unless configured otherwise.
pub const DEFAULT_PREDICT_SAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    LeakyRelu(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Single,
    Multi { heads: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub head_mode: HeadMode,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            activation: Activation::Relu,
            head_mode: HeadMode::Single,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.head_mode = HeadMode::Multi { heads };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Architecture(format!("all widths must be positive: {self:?}")));
        }
        if let HeadMode::Multi { heads } = self.head_mode {
            if heads == 0 || self.output_dim % heads != 0 {
                return Err(Error::Architecture(format!(
                    "output dim {} is not divisible by {heads} heads",
                    self.output_dim
                )));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &w in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, w));
            prev = w;
        }
        dims
    }

    pub fn num_weights(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Output columns `(start, len)` owned by head `task`.
    pub fn head_columns(&self, task: usize) -> Result<(usize, usize)> {
        match self.head_mode {
            HeadMode::Single => Err(Error::InvalidArgument(
                "head selection requires a multi-head architecture".into(),
            )),
            HeadMode::Multi { heads } => {
                if task >= heads {
                    return Err(Error::InvalidArgument(format!(
                        "head {task} out of range for {heads} heads"
                    )));
                }
                let width = self.output_dim / heads;
                Ok((task * width, width))
            }
        }
    }
}

/// Concrete weights of one dense layer: `w` is `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
}

/// One concrete draw of all network weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    pub layers: Vec<DenseLayer>,
}

impl WeightSet {
    /// Glorot-uniform weights and zero biases.
    pub fn glorot(arch: &Architecture, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(i, o)| {
                let limit = (6.0 / (i + o) as f64).sqrt();
                let w = (0..i * o).map(|_| rng.gen_range(-limit..limit)).collect();
                DenseLayer {
                    w: Tensor::from_parts(vec![i, o], w),
                    b: Tensor::zeros(&[o]),
                }
            })
            .collect();
        Self { layers }
    }

    pub(crate) fn check(&self, arch: &Architecture) -> Result<()> {
        let dims = arch.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::Architecture(format!(
                "expected {} layers, weights have {}",
                dims.len(),
                self.layers.len()
            )));
        }
        for (l, ((i, o), layer)) in dims.iter().zip(&self.layers).enumerate() {
            if layer.w.shape() != [*i, *o] || layer.b.shape() != [*o] {
                return Err(Error::Architecture(format!(
                    "layer {l}: expected weights {i}x{o} and bias {o}, got {:?} and {:?}",
                    layer.w.shape(),
                    layer.b.shape()
                )));
            }
        }
        Ok(())
    }
}

fn activate(act: Activation, v: f64) -> f64 {
    match act {
        Activation::Relu => v.max(0.0),
        Activation::Tanh => v.tanh(),
        Activation::LeakyRelu(a) => {
            if v > 0.0 {
                v
            } else {
                a * v
            }
        }
    }
}

/// Logits for a batch `x` (rows are examples) without recording a tape.
pub fn forward_values(arch: &Architecture, weights: &WeightSet, x: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    if x.cols() != arch.input_dim {
        return Err(Error::Architecture(format!(
            "input has {} features, network expects {}",
            x.cols(),
            arch.input_dim
        )));
    }
    let mut h = x.data().to_vec();
    let last = weights.layers.len() - 1;
    for (l, layer) in weights.layers.iter().enumerate() {
        let (fan_in, fan_out) = (layer.w.shape()[0], layer.w.shape()[1]);
        let mut out = vec![0.0; n * fan_out];
        for row in out.chunks_exact_mut(fan_out) {
            row.copy_from_slice(layer.b.data());
        }
        gemm(n, fan_in, fan_out, &h, false, layer.w.data(), false, &mut out, true);
        if l != last {
            for v in out.iter_mut() {
                *v = activate(arch.activation, *v);
            }
        }
        h = out;
    }
    let out = Tensor::from_parts(vec![n, arch.output_dim], h);
    if !out.is_finite() {
        return Err(Error::Numerical("network produced non-finite logits".into()));
    }
    Ok(out)
}

/// Records the network on `tape`. `weights` holds `(w, b)` node pairs.
pub fn forward_nodes(
    tape: &mut Tape,
    arch: &Architecture,
    weights: &[(NodeId, NodeId)],
    x: NodeId,
) -> Result<NodeId> {
    let mut h = x;
    let last = weights.len() - 1;
    for (l, &(w, b)) in weights.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        h = tape.add_row(z, b)?;
        if l != last {
            h = match arch.activation {
                Activation::Relu => tape.relu(h)?,
                Activation::Tanh => tape.tanh(h)?,
                Activation::LeakyRelu(a) => tape.leaky_relu(h, a)?,
            };
        }
    }
    Ok(h)
}

/// Independent Gaussian over a tensor of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParam {
    pub mu: Tensor,
    pub rho: Tensor,
}

impl GaussianParam {
    fn new(mu: Tensor, sigma: f64) -> Self {
        let rho = Tensor::filled(mu.shape(), softplus_inv(sigma));
        Self { mu, rho }
    }

    pub fn sigma(&self) -> Tensor {
        self.rho.map(softplus)
    }

    fn sample(&self, rng: &mut Rng) -> Tensor {
        let data = self
            .mu
            .data()
            .iter()
            .zip(self.rho.data())
            .map(|(&m, &r)| {
                let eps: f64 = StandardNormal.sample(rng);
                m + softplus(r) * eps
            })
            .collect();
        Tensor::from_parts(self.mu.shape().to_vec(), data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLayer {
    pub weight: GaussianParam,
    pub bias: GaussianParam,
}

/// How a fresh posterior is initialised.
#[derive(Clone, Copy, Debug)]
pub enum InitMode<'a> {
    /// `mu = 0`, `sigma = 1`; also the standard prior `p(w)`.
    UnitPrior,
    /// Means copied from point-estimate weights, every `sigma = init_sigma`.
    FromMle(&'a WeightSet),
}

/// Fully factorised Gaussian over all network weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldPosterior {
    arch: Architecture,
    layers: Vec<GaussianLayer>,
}

pub fn init_posterior(arch: &Architecture, mode: InitMode<'_>, init_sigma: f64) -> Result<MeanFieldPosterior> {
    arch.validate()?;
    if !(init_sigma > 0.0) || !init_sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("init sigma must be positive, got {init_sigma}")));
    }
    let layers = match mode {
        InitMode::UnitPrior => arch
            .layer_dims()
            .into_iter()
            .map(|(i, o)| GaussianLayer {
                weight: GaussianParam::new(Tensor::zeros(&[i, o]), 1.0),
                bias: GaussianParam::new(Tensor::zeros(&[o]), 1.0),
            })
            .collect(),
        InitMode::FromMle(weights) => {
            weights.check(arch)?;
            weights
                .layers
                .iter()
                .map(|l| GaussianLayer {
                    weight: GaussianParam::new(l.w.clone(), init_sigma),
                    bias: GaussianParam::new(l.b.clone(), init_sigma),
                })
                .collect()
        }
    };
    Ok(MeanFieldPosterior {
        arch: arch.clone(),
        layers,
    })
}

impl MeanFieldPosterior {
    /// The standard normal prior over `arch`'s weights.
    pub fn unit_prior(arch: &Architecture) -> Result<Self> {
        init_posterior(arch, InitMode::UnitPrior, 1.0)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[GaussianLayer] {
        &self.layers
    }

    /// Parameters in a fixed order: per layer `w.mu, w.rho, b.mu, b.rho`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight.mu, &l.weight.rho, &l.bias.mu, &l.bias.rho])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let GaussianLayer { weight, bias } = l;
                [&mut weight.mu, &mut weight.rho, &mut bias.mu, &mut bias.rho]
            })
            .collect()
    }

    /// The network with every weight at its posterior mean.
    pub fn mean_weights(&self) -> WeightSet {
        WeightSet {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    w: l.weight.mu.clone(),
                    b: l.bias.mu.clone(),
                })
                .collect(),
        }
    }

    /// Draws one concrete weight set (no tape).
    pub fn sample_weight_set(&self, rng: &mut Rng) -> WeightSet {
        WeightSet {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    w: l.weight.sample(rng),
                    b: l.bias.sample(rng),
                })
                .collect(),
        }
    }

    /// Copy of `self` whose head `task` output weights and biases come from `other`.
    pub fn with_head_from(&self, other: &Self, task: usize) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::InvalidArgument("posteriors differ in shape".into()));
        }
        let (start, width) = self.arch.head_columns(task)?;
        let mut out = self.clone();
        let last = out.layers.last_mut().expect("at least one layer");
        let src = other.layers.last().expect("at least one layer");
        let cols = last.weight.mu.cols();
        for (dst, from) in [(&mut last.weight.mu, &src.weight.mu), (&mut last.weight.rho, &src.weight.rho)] {
            let from = from.data();
            for (r, row) in dst.data_mut().chunks_mut(cols).enumerate() {
                row[start..start + width].copy_from_slice(&from[r * cols + start..r * cols + start + width]);
            }
        }
        for (dst, from) in [(&mut last.bias.mu, &src.bias.mu), (&mut last.bias.rho, &src.bias.rho)] {
            dst.data_mut()[start..start + width].copy_from_slice(&from.data()[start..start + width]);
        }
        Ok(out)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.mu.shape() == b.weight.mu.shape() && a.bias.mu.shape() == b.bias.mu.shape()
            })
    }

    /// Puts `mu` and `rho` on `tape` as leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundPosterior> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(BoundLayer {
                weight: BoundParam::bind(tape, &l.weight)?,
                bias: BoundParam::bind(tape, &l.bias)?,
            });
        }
        Ok(BoundPosterior {
            arch: self.arch.clone(),
            layers,
        })
    }

    pub fn to_bytes(&self, task: usize) -> Vec<u8> {
        let mut enc = Encoder::new(Kind::Posterior);
        enc.usize(task);
        encode_arch(&mut enc, &self.arch);
        enc.usize(self.layers.len());
        for l in &self.layers {
            enc.tensor(&l.weight.mu);
            enc.tensor(&l.weight.rho);
            enc.tensor(&l.bias.mu);
            enc.tensor(&l.bias.rho);
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(usize, Self)> {
        let mut dec = Decoder::new(bytes, Kind::Posterior)?;
        let task = dec.usize()?;
        let arch = decode_arch(&mut dec)?;
        arch.validate()?;
        let n = dec.usize()?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let w_mu = dec.tensor()?;
            let w_rho = dec.tensor()?;
            let b_mu = dec.tensor()?;
            let b_rho = dec.tensor()?;
            layers.push(GaussianLayer {
                weight: GaussianParam { mu: w_mu, rho: w_rho },
                bias: GaussianParam { mu: b_mu, rho: b_rho },
            });
        }
        dec.finish()?;
        let post = Self { arch, layers };
        post.mean_weights().check(&post.arch)?;
        for l in &post.layers {
            if l.weight.rho.shape() != l.weight.mu.shape() || l.bias.rho.shape() != l.bias.mu.shape() {
                return Err(Error::Format("rho/mu shape mismatch in snapshot".into()));
            }
        }
        Ok((task, post))
    }
}

pub(crate) fn encode_arch(enc: &mut Encoder, arch: &Architecture) {
    enc.usize(arch.input_dim);
    enc.usize(arch.hidden.len());
    for &h in &arch.hidden {
        enc.usize(h);
    }
    enc.usize(arch.output_dim);
    match arch.activation {
        Activation::Relu => {
            enc.u8(0);
            enc.f64(0.0);
        }
        Activation::Tanh => {
            enc.u8(1);
            enc.f64(0.0);
        }
        Activation::LeakyRelu(a) => {
            enc.u8(2);
            enc.f64(a);
        }
    }
    match arch.head_mode {
        HeadMode::Single => {
            enc.u8(0);
            enc.usize(1);
        }
        HeadMode::Multi { heads } => {
            enc.u8(1);
            enc.usize(heads);
        }
    }
}

pub(crate) fn decode_arch(dec: &mut Decoder<'_>) -> Result<Architecture> {
    let input_dim = dec.usize()?;
    let n_hidden = dec.usize()?;
    let mut hidden = Vec::with_capacity(n_hidden.min(64));
    for _ in 0..n_hidden {
        hidden.push(dec.usize()?);
    }
    let output_dim = dec.usize()?;
    let act_tag = dec.u8()?;
    let alpha = dec.f64()?;
    let activation = match act_tag {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        2 => Activation::LeakyRelu(alpha),
        t => return Err(Error::Format(format!("unknown activation tag {t}"))),
    };
    let head_tag = dec.u8()?;
    let heads = dec.usize()?;
    let head_mode = match head_tag {
        0 => HeadMode::Single,
        1 => HeadMode::Multi { heads },
        t => return Err(Error::Format(format!("unknown head tag {t}"))),
    };
    Ok(Architecture {
        input_dim,
        hidden,
        output_dim,
        activation,
        head_mode,
    })
}

/// A parameter tensor's `mu`, `rho` leaves and the derived `sigma` node.
#[derive(Clone, Copy, Debug)]
pub struct BoundParam {
    pub mu: NodeId,
    pub rho: NodeId,
    pub sigma: NodeId,
}

impl BoundParam {
    fn bind(tape: &mut Tape, p: &GaussianParam) -> Result<Self> {
        let mu = tape.leaf(p.mu.clone());
        let rho = tape.leaf(p.rho.clone());
        let sigma = tape.softplus(rho)?;
        Ok(Self { mu, rho, sigma })
    }

    fn sample(&self, tape: &mut Tape, rng: &mut Rng) -> Result<NodeId> {
        let shape = tape.value(self.mu).shape().to_vec();
        let n = shape.iter().product();
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let eps = tape.leaf(Tensor::from_parts(shape, eps));
        let noise = tape.mul(self.sigma, eps)?;
        Ok(tape.add(self.mu, noise)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub weight: BoundParam,
    pub bias: BoundParam,
}

/// A posterior whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundPosterior {
    pub arch: Architecture,
    pub layers: Vec<BoundLayer>,
}

impl BoundPosterior {
    /// Leaves in the same order as [`MeanFieldPosterior::params`].
    pub fn param_nodes(&self) -> Vec<NodeId> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.mu, l.weight.rho, l.bias.mu, l.bias.rho])
            .collect()
    }

    pub fn mean_nodes(&self) -> Vec<(NodeId, NodeId)> {
        self.layers.iter().map(|l| (l.weight.mu, l.bias.mu)).collect()
    }

    /// Reparameterised draw `w = mu + softplus(rho) * eps` of every weight.
    pub fn sample_weights(&self, tape: &mut Tape, rng: &mut Rng) -> Result<Vec<(NodeId, NodeId)>> {
        self.layers
            .iter()
            .map(|l| Ok((l.weight.sample(tape, rng)?, l.bias.sample(tape, rng)?)))
            .collect()
    }
}

fn check_kl_shapes(q: &MeanFieldPosterior, p: &MeanFieldPosterior) -> Result<()> {
    if !q.same_shape(p) || q.arch.layer_dims() != p.arch.layer_dims() {
        return Err(Error::Architecture(format!(
            "KL between mismatched posteriors: {:?} vs {:?}",
            q.arch.layer_dims(),
            p.arch.layer_dims()
        )));
    }
    Ok(())
}

/// Closed-form `KL(q || p)` recorded on `tape`, differentiable in `q`.
///
/// Per weight: `ln(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2`, summed.
pub fn kl_divergence(tape: &mut Tape, q: &BoundPosterior, p: &MeanFieldPosterior) -> Result<NodeId> {
    if q.arch.layer_dims() != p.arch.layer_dims() {
        return Err(Error::Architecture(format!(
            "KL between mismatched posteriors: {:?} vs {:?}",
            q.arch.layer_dims(),
            p.arch.layer_dims()
        )));
    }
    let mut total: Option<NodeId> = None;
    let pairs = q.layers.iter().zip(&p.layers).flat_map(|(ql, pl)| {
        [(ql.weight, &pl.weight), (ql.bias, &pl.bias)]
    });
    for (qp, pp) in pairs {
        let sigma_p = pp.sigma();
        let inv_two_var = tape.leaf(sigma_p.map(|s| 0.5 / (s * s)));
        let constant: f64 = sigma_p.data().iter().map(|s| s.ln() - 0.5).sum();
        let mu_p = tape.leaf(pp.mu.clone());

        let log_sq = tape.log(qp.sigma)?;
        let var_q = tape.square(qp.sigma)?;
        let diff = tape.sub(qp.mu, mu_p)?;
        let diff2 = tape.square(diff)?;
        let num = tape.add(var_q, diff2)?;
        let quad = tape.mul(num, inv_two_var)?;
        let per_weight = tape.sub(quad, log_sq)?;
        let summed = tape.sum(per_weight)?;
        let c = tape.leaf(Tensor::scalar(constant));
        let term = tape.add(summed, c)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Architecture("posterior without layers".into()))
}

/// `KL(q || p)` evaluated directly.
pub fn kl_value(q: &MeanFieldPosterior, p: &MeanFieldPosterior) -> Result<f64> {
    check_kl_shapes(q, p)?;
    let mut total = 0.0;
    for (ql, pl) in q.layers.iter().zip(&p.layers) {
        for (qp, pp) in [(&ql.weight, &pl.weight), (&ql.bias, &pl.bias)] {
            for i in 0..qp.mu.len() {
                total += gaussian_kl(
                    qp.mu.data()[i],
                    softplus(qp.rho.data()[i]),
                    pp.mu.data()[i],
                    softplus(pp.rho.data()[i]),
                );
            }
        }
    }
    Ok(total)
}

/// `KL(N(mq, sq^2) || N(mp, sp^2))` for scalars.
pub fn gaussian_kl(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5
}

/// Softmax probabilities for one weight draw, optionally restricted to a head.
pub fn probabilities(arch: &Architecture, weights: &WeightSet, x: &Tensor, head: Option<usize>) -> Result<Tensor> {
    let logits = forward_values(arch, weights, x)?;
    let c = arch.output_dim;
    let mut probs = vec![0.0; logits.len()];
    match head {
        None => kernels::softmax_rows(logits.data(), c, &mut probs),
        Some(t) => {
            let (start, len) = arch.head_columns(t)?;
            let mut buf = vec![0.0; len];
            for (src, dst) in logits.data().chunks_exact(c).zip(probs.chunks_exact_mut(c)) {
                kernels::softmax_rows(&src[start..start + len], len, &mut buf);
                dst[start..start + len].copy_from_slice(&buf);
            }
        }
    }
    Ok(Tensor::from_parts(vec![x.rows(), c], probs))
}

/// Average of softmax outputs over pre-drawn weight sets.
pub fn predict_with_weights(
    post: &MeanFieldPosterior,
    samples: &[WeightSet],
    x: &Tensor,
    head: Option<usize>,
) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("prediction needs at least one sample".into()));
    }
    let mut acc = Tensor::zeros(&[x.rows(), post.arch.output_dim]);
    for w in samples {
        let p = probabilities(&post.arch, w, x, head)?;
        for (a, v) in acc.data_mut().iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    Ok(acc.map(|v| v / n))
}

/// Monte Carlo predictive distribution, `batch x output_dim`.
///
/// With `head = Some(t)` (multi-head only) the probability mass is
/// renormalised onto head `t`'s columns and is zero elsewhere.
pub fn predict(
    post: &MeanFieldPosterior,
    x: &Tensor,
    n_samples: usize,
    head: Option<usize>,
    rng: &mut Rng,
) -> Result<Tensor> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if head.is_some() && post.arch.head_mode == HeadMode::Single {
        return Err(Error::InvalidArgument("head mask given for a single-head network".into()));
    }
    let mut acc = Tensor::zeros(&[x.rows(), post.arch.output_dim]);
    for _ in 0..n_samples {
        let w = post.sample_weight_set(rng);
        let p = probabilities(&post.arch, &w, x, head)?;
        for (a, v) in acc.data_mut().iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    let n = n_samples as f64;
    Ok(acc.map(|v| v / n))
}

/// A posterior frozen after training task `task` (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSnapshot {
    task: usize,
    posterior: MeanFieldPosterior,
}

impl PosteriorSnapshot {
    pub fn new(task: usize, posterior: MeanFieldPosterior) -> Self {
        Self { task, posterior }
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn posterior(&self) -> &MeanFieldPosterior {
        &self.posterior
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        snapshot::write_atomic(path, &self.posterior.to_bytes(self.task))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = snapshot::read_file(path)?;
        let (task, posterior) = MeanFieldPosterior::from_bytes(&bytes)?;
        Ok(Self { task, posterior })
    }
}

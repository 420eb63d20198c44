//! Continual-learning objectives and the per-task training loop.
//!
//! All objectives are negated ELBOs of the form
//! `-(N / |B|) * sum_batch E_q[log p(y | w, x)] + kl_scale * KL(q || prior)`;
//! they differ only in which data feeds the likelihood and which
//! distribution anchors the KL term.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bnn::{self, BoundPosterior, MeanFieldPosterior, PosteriorSnapshot, WeightSet};
use crate::coreset::{self, Coreset};
use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::replay::AugmentedDataset;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Maximum-likelihood training with no KL term; forgets freely.
    Plain,
    Vcl,
    VclCoreset,
    CoresetOnly,
    Vgr,
    /// Replay likelihood with the previous posterior as prior.
    Hybrid,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Plain,
        Method::Vcl,
        Method::VclCoreset,
        Method::CoresetOnly,
        Method::Vgr,
        Method::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Plain => "plain",
            Method::Vcl => "vcl",
            Method::VclCoreset => "vcl-coreset",
            Method::CoresetOnly => "coreset-only",
            Method::Vgr => "vgr",
            Method::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Method::name).join(", ")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorSource {
    OriginalPrior,
    PreviousPosterior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LikelihoodSource {
    CurrentTask,
    CurrentAndCoresets,
    CurrentAndReplay,
}

/// What a method optimises: the KL anchor and the data behind the likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossSpec {
    pub method: Method,
    /// `None` means no KL term at all.
    pub prior: Option<PriorSource>,
    pub likelihood: LikelihoodSource,
}

impl LossSpec {
    pub fn for_method(method: Method) -> Self {
        use LikelihoodSource::*;
        use PriorSource::*;
        let (prior, likelihood) = match method {
            Method::Plain => (None, CurrentTask),
            Method::Vcl => (Some(PreviousPosterior), CurrentTask),
            Method::VclCoreset => (Some(PreviousPosterior), CurrentAndCoresets),
            Method::CoresetOnly => (Some(OriginalPrior), CurrentAndCoresets),
            Method::Vgr => (Some(OriginalPrior), CurrentAndReplay),
            Method::Hybrid => (Some(PreviousPosterior), CurrentAndReplay),
        };
        Self {
            method,
            prior,
            likelihood,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum BatchPolicy {
    Fixed(usize),
    FullDataset,
    /// `base * seen_tasks`, optionally capped.
    PerSeenTask { base: usize, cap: Option<usize> },
}

impl BatchPolicy {
    pub fn resolve(self, dataset_size: usize, seen_tasks: usize) -> usize {
        let size = match self {
            BatchPolicy::Fixed(n) => n,
            BatchPolicy::FullDataset => dataset_size,
            BatchPolicy::PerSeenTask { base, cap } => {
                let b = base * seen_tasks.max(1);
                cap.map_or(b, |c| b.min(c))
            }
        };
        size.clamp(1, dataset_size.max(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlScalePolicy {
    /// Full KL on every step. With the likelihood rescaled to the dataset,
    /// each step is an unbiased estimate of the negated ELBO.
    FullElbo,
    Constant(f64),
}

impl KlScalePolicy {
    pub fn resolve(self) -> f64 {
        match self {
            KlScalePolicy::FullElbo => 1.0,
            KlScalePolicy::Constant(c) => c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch: BatchPolicy,
    pub adam: AdamParams,
    pub mc_samples: usize,
    pub kl_scale: KlScalePolicy,
    pub finetune_epochs: usize,
    pub finetune_batch: BatchPolicy,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            batch: BatchPolicy::Fixed(256),
            adam: AdamParams::new(1e-3),
            mc_samples: 3,
            kl_scale: KlScalePolicy::FullElbo,
            finetune_epochs: 100,
            finetune_batch: BatchPolicy::FullDataset,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Tensor], grads: &[Tensor], hp: &AdamParams) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::InvalidArgument(format!(
                "adam: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            let mi = &mut m.data_mut()[i];
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
            let vi = &mut v.data_mut()[i];
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
            let m_hat = m.data()[i] / c1;
            let v_hat = v.data()[i] / c2;
            pd[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Training examples with their target labels.
///
/// In multi-head mode `heads[i]` names the output head of row `i`, the
/// target is relative to that head's column window and the softmax is taken
/// over the window only.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet {
    pub inputs: Tensor,
    pub targets: Vec<usize>,
    pub heads: Option<Vec<usize>>,
}

impl TrainSet {
    pub fn new(inputs: Tensor, targets: Vec<usize>, heads: Option<Vec<usize>>) -> Result<Self> {
        if inputs.rows() != targets.len() || heads.as_ref().is_some_and(|h| h.len() != targets.len()) {
            return Err(Error::Data(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets, heads })
    }

    /// All rows on one head (or on the single shared head if `None`).
    pub fn on_head(inputs: Tensor, targets: Vec<usize>, head: Option<usize>) -> Result<Self> {
        let heads = head.map(|h| vec![h; targets.len()]);
        Self::new(inputs, targets, heads)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> TrainSet {
        TrainSet {
            inputs: self.inputs.select_rows(indices),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            heads: self.heads.as_ref().map(|h| indices.iter().map(|&i| h[i]).collect()),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        self.subset(indices)
    }

    pub fn as_batch(&self) -> Batch {
        self.clone()
    }

    /// Row-wise union; both sides must agree on head mode and input width.
    pub fn concat(parts: &[&TrainSet]) -> Result<TrainSet> {
        let multi = parts.first().is_some_and(|p| p.heads.is_some());
        if parts.iter().any(|p| p.heads.is_some() != multi) {
            return Err(Error::InputMismatch("cannot mix single- and multi-head data".into()));
        }
        let inputs: Vec<&Tensor> = parts.iter().map(|p| &p.inputs).collect();
        Ok(TrainSet {
            inputs: Tensor::concat_rows(&inputs)?,
            targets: parts.iter().flat_map(|p| p.targets.iter().copied()).collect(),
            heads: multi.then(|| parts.iter().flat_map(|p| p.heads.as_ref().unwrap().iter().copied()).collect()),
        })
    }
}

/// A minibatch has the same layout as a training set.
pub type Batch = TrainSet;

/// Scalars shared by every objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossScale {
    /// Size of the dataset the batch was drawn from.
    pub dataset_size: usize,
    pub mc_samples: usize,
    pub kl_scale: f64,
}

/// Sum over the batch of `log p(y | w, x)` for the given logits.
fn log_likelihood_sum(tape: &mut Tape, q: &BoundPosterior, logits: NodeId, batch: &Batch) -> Result<NodeId> {
    let Some(heads) = &batch.heads else {
        let lp = tape.log_softmax(logits)?;
        let picked = tape.pick(lp, batch.targets.clone())?;
        return Ok(tape.sum(picked)?);
    };
    let mut total: Option<NodeId> = None;
    let mut present: Vec<usize> = heads.clone();
    present.sort_unstable();
    present.dedup();
    for h in present {
        let rows: Vec<usize> = (0..heads.len()).filter(|&i| heads[i] == h).collect();
        let targets = rows.iter().map(|&i| batch.targets[i]).collect();
        let (start, len) = q.arch.head_columns(h)?;
        let part = if rows.len() == heads.len() {
            logits
        } else {
            tape.gather_rows(logits, rows)?
        };
        let part = tape.slice_cols(part, start, len)?;
        let lp = tape.log_softmax(part)?;
        let picked = tape.pick(lp, targets)?;
        let s = tape.sum(picked)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("non-empty batch"))
}

/// `-(N / |B|) * sum_b mean_s log p(y_b | w_s, x_b)` with `w_s ~ q`.
///
/// With `sample = false` the network runs at the posterior means.
pub fn expected_nll(
    tape: &mut Tape,
    q: &BoundPosterior,
    batch: &Batch,
    scale: &LossScale,
    sample: bool,
    rng: &mut Rng,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let x = tape.leaf(batch.inputs.clone());
    let draws = if sample { scale.mc_samples.max(1) } else { 1 };
    let mut total: Option<NodeId> = None;
    for _ in 0..draws {
        let weights = if sample {
            q.sample_weights(tape, rng)?
        } else {
            q.mean_nodes()
        };
        let logits = bnn::forward_nodes(tape, &q.arch, &weights, x)?;
        let s = log_likelihood_sum(tape, q, logits, batch)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let factor = -(scale.dataset_size as f64) / (batch.len() as f64 * draws as f64);
    Ok(tape.scale(total.expect("at least one draw"), factor)?)
}

fn elbo_loss(
    tape: &mut Tape,
    q: &BoundPosterior,
    prior: &MeanFieldPosterior,
    batch: &Batch,
    scale: &LossScale,
    rng: &mut Rng,
) -> Result<NodeId> {
    let nll = expected_nll(tape, q, batch, scale, true, rng)?;
    let kl = bnn::kl_divergence(tape, q, prior)?;
    let kl = tape.scale(kl, scale.kl_scale)?;
    Ok(tape.add(nll, kl)?)
}

/// Prior-focused loss: current-task likelihood, KL to the previous posterior.
pub fn vcl_loss(
    tape: &mut Tape,
    q: &BoundPosterior,
    q_prev: &MeanFieldPosterior,
    batch: &Batch,
    scale: &LossScale,
    rng: &mut Rng,
) -> Result<NodeId> {
    elbo_loss(tape, q, q_prev, batch, scale, rng)
}

/// Likelihood-focused loss: a standard ELBO over real plus generated data,
/// always anchored to the original prior.
pub fn replay_elbo_loss(
    tape: &mut Tape,
    q: &BoundPosterior,
    original_prior: &MeanFieldPosterior,
    augmented_batch: &Batch,
    scale: &LossScale,
    rng: &mut Rng,
) -> Result<NodeId> {
    elbo_loss(tape, q, original_prior, augmented_batch, scale, rng)
}

/// Replay likelihood with the previous posterior as the KL anchor.
pub fn hybrid_loss(
    tape: &mut Tape,
    q: &BoundPosterior,
    q_prev: &MeanFieldPosterior,
    augmented_batch: &Batch,
    scale: &LossScale,
    rng: &mut Rng,
) -> Result<NodeId> {
    elbo_loss(tape, q, q_prev, augmented_batch, scale, rng)
}

/// Negative log-likelihood at the posterior means, no KL.
pub fn plain_loss(tape: &mut Tape, q: &BoundPosterior, batch: &Batch, scale: &LossScale, rng: &mut Rng) -> Result<NodeId> {
    expected_nll(tape, q, batch, scale, false, rng)
}

/// The loss `spec.method` minimises on `batch`, with priors taken from `ctx`.
pub fn method_loss(
    spec: &LossSpec,
    tape: &mut Tape,
    q: &BoundPosterior,
    ctx: &TaskContext<'_>,
    batch: &Batch,
    scale: &LossScale,
    rng: &mut Rng,
) -> Result<NodeId> {
    match spec.method {
        Method::Plain => plain_loss(tape, q, batch, scale, rng),
        Method::Vcl | Method::VclCoreset => vcl_loss(tape, q, ctx.previous, batch, scale, rng),
        Method::CoresetOnly => vcl_loss(tape, q, ctx.original_prior, batch, scale, rng),
        Method::Vgr => replay_elbo_loss(tape, q, ctx.original_prior, batch, scale, rng),
        Method::Hybrid => hybrid_loss(tape, q, ctx.previous, batch, scale, rng),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitReport {
    pub steps: u64,
    pub last_loss: f64,
}

/// Minibatch Adam on `q`.
///
/// `prior = None` trains the posterior means by maximum likelihood; otherwise
/// the negated ELBO against `prior` is minimised.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    q: &mut MeanFieldPosterior,
    prior: Option<&MeanFieldPosterior>,
    data: &TrainSet,
    epochs: usize,
    batch_size: usize,
    cfg: &TrainingConfig,
    rng: &mut Rng,
) -> Result<FitReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot fit on an empty dataset".into()));
    }
    let n = data.len();
    let batch_size = batch_size.clamp(1, n);
    let scale = LossScale {
        dataset_size: n,
        mc_samples: cfg.mc_samples,
        kl_scale: cfg.kl_scale.resolve(),
    };
    let mut adam = AdamState::new(&q.params());
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_loss = f64::NAN;
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let batch = data.batch(chunk);
            let mut tape = Tape::new();
            let bound = q.bind(&mut tape)?;
            let loss = match prior {
                Some(p) => elbo_loss(&mut tape, &bound, p, &batch, &scale, rng),
                None => plain_loss(&mut tape, &bound, &batch, &scale, rng),
            }
            .map_err(numerical_context)?;
            last_loss = tape.value(loss).item();
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = bound.param_nodes().into_iter().map(|id| grads.take(id)).collect();
            adam_step(&mut adam, &mut q.params_mut(), &grads, &cfg.adam)?;
            if q.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Numerical("parameters became non-finite".into()));
            }
        }
    }
    Ok(FitReport {
        steps: adam.step(),
        last_loss,
    })
}

fn numerical_context(e: Error) -> Error {
    if e.is_numerical() {
        Error::Numerical(format!("loss evaluation failed: {e}"))
    } else {
        e
    }
}

/// Point-estimate network trained by maximum likelihood from Glorot init.
pub fn fit_mle(
    arch: &bnn::Architecture,
    data: &TrainSet,
    epochs: usize,
    batch_size: usize,
    cfg: &TrainingConfig,
    rng: &mut Rng,
) -> Result<WeightSet> {
    let init = WeightSet::glorot(arch, rng);
    let mut q = bnn::init_posterior(arch, bnn::InitMode::FromMle(&init), 1e-6)?;
    fit(&mut q, None, data, epochs, batch_size, cfg, rng)?;
    Ok(q.mean_weights())
}

/// Extra data a method needs beyond the current task.
#[derive(Clone, Copy, Debug)]
pub enum Auxiliary<'a> {
    None,
    /// Every coreset stored so far, including the current task's.
    Coresets(&'a [Coreset]),
    /// Current real data merged with replay from earlier tasks.
    Replay(&'a AugmentedDataset),
}

/// Posteriors a task starts from and may be anchored to.
#[derive(Clone, Copy, Debug)]
pub struct TaskContext<'a> {
    /// 0-based index of the task being learned.
    pub task: usize,
    /// Tasks seen including this one.
    pub seen_tasks: usize,
    /// Warm start for the variational parameters.
    pub start: &'a MeanFieldPosterior,
    /// Posterior propagated from the previous task (`p(w)` at task 0).
    pub previous: &'a MeanFieldPosterior,
    pub original_prior: &'a MeanFieldPosterior,
}

#[derive(Clone, Debug)]
pub struct TaskOutcome {
    /// Carried forward as the next task's warm start and prior.
    pub propagated: MeanFieldPosterior,
    /// Used for evaluation; differs from `propagated` after coreset fine-tuning.
    pub predictive: MeanFieldPosterior,
    pub snapshot: PosteriorSnapshot,
}

/// Trains one task according to `spec`.
///
/// `current` is the current task's training data with any coreset already
/// withheld. Replay methods train on the augmented set instead, which must
/// contain `current` as its real part.
pub fn train_task(
    spec: &LossSpec,
    cfg: &TrainingConfig,
    ctx: &TaskContext<'_>,
    current: &TrainSet,
    aux: Auxiliary<'_>,
    rng: &mut Rng,
) -> Result<TaskOutcome> {
    cfg.validate()?;
    if current.is_empty() {
        return Err(Error::InvalidArgument("task data is empty".into()));
    }
    let (data, coresets) = match (spec.likelihood, aux) {
        (LikelihoodSource::CurrentTask, Auxiliary::None) => (current, None),
        (LikelihoodSource::CurrentAndCoresets, Auxiliary::Coresets(c)) if !c.is_empty() => (current, Some(c)),
        (LikelihoodSource::CurrentAndReplay, Auxiliary::Replay(aug)) => (&aug.set, None),
        (needed, got) => {
            return Err(Error::InputMismatch(format!(
                "{} needs {needed:?} but got {}",
                spec.method,
                match got {
                    Auxiliary::None => "no auxiliary data",
                    Auxiliary::Coresets(_) => "coresets",
                    Auxiliary::Replay(_) => "replay data",
                }
            )))
        }
    };
    let prior = spec.prior.map(|p| match p {
        PriorSource::OriginalPrior => ctx.original_prior,
        PriorSource::PreviousPosterior => ctx.previous,
    });
    let mut q = ctx.start.clone();
    let batch = cfg.batch.resolve(data.len(), ctx.seen_tasks);
    fit(&mut q, prior, data, cfg.epochs, batch, cfg, rng)?;

    let predictive = match coresets {
        Some(c) => coreset::finetune(&q, c, cfg, rng)?,
        None => q.clone(),
    };
    Ok(TaskOutcome {
        snapshot: PosteriorSnapshot::new(ctx.task, predictive.clone()),
        propagated: q,
        predictive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::{init_posterior, Architecture, InitMode};
    use crate::diffcore::grad_check;
    use crate::rng::seeded;

    fn toy_set() -> TrainSet {
        let x = Tensor::matrix(4, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        TrainSet::new(x, vec![0, 1, 1, 0], None).unwrap()
    }

    #[test]
    fn method_table() {
        let s = LossSpec::for_method(Method::Vgr);
        assert_eq!(s.prior, Some(PriorSource::OriginalPrior));
        assert_eq!(s.likelihood, LikelihoodSource::CurrentAndReplay);
        let s = LossSpec::for_method(Method::CoresetOnly);
        assert_eq!(s.prior, Some(PriorSource::OriginalPrior));
        assert_eq!(s.likelihood, LikelihoodSource::CurrentAndCoresets);
        let s = LossSpec::for_method(Method::VclCoreset);
        assert_eq!(s.prior, Some(PriorSource::PreviousPosterior));
        assert_eq!(LossSpec::for_method(Method::Plain).prior, None);
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        assert_eq!(Method::parse("ewc"), None);
    }

    #[test]
    fn batch_policies() {
        assert_eq!(BatchPolicy::Fixed(256).resolve(1000, 3), 256);
        assert_eq!(BatchPolicy::Fixed(256).resolve(100, 3), 100);
        assert_eq!(BatchPolicy::FullDataset.resolve(1234, 1), 1234);
        let p = BatchPolicy::PerSeenTask { base: 256, cap: Some(30_000) };
        assert_eq!(p.resolve(1_000_000, 3), 768);
        assert_eq!(p.resolve(1_000_000, 200), 30_000);
        assert_eq!(KlScalePolicy::FullElbo.resolve(), 1.0);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut st, &mut [&mut p], &[Tensor::zeros(&[2])], &AdamParams::new(0.1)).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn adam_first_step() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[&p]);
        let hp = AdamParams {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adam_step(&mut st, &mut [&mut p], &[Tensor::scalar(1.0)], &hp).unwrap();
        // m_hat = v_hat = 1, so the step is -lr / (1 + eps)
        assert!((p.item() + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let target = [3.0, -1.5, 0.25];
        let mut p = Tensor::vector(vec![0.0; 3]);
        let mut st = AdamState::new(&[&p]);
        let hp = AdamParams::new(0.01);
        for _ in 0..10_000 {
            let g = Tensor::vector(p.data().iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect());
            adam_step(&mut st, &mut [&mut p], &[g], &hp).unwrap();
        }
        for (x, t) in p.data().iter().zip(&target) {
            assert!((x - t).abs() < 1e-3, "{x} vs {t}");
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut st = AdamState::new(&[&p]);
        assert!(adam_step(&mut st, &mut [&mut p], &[Tensor::zeros(&[3])], &AdamParams::new(0.1)).is_err());
    }

    fn posterior(seed: u64, sigma: f64) -> MeanFieldPosterior {
        let arch = Architecture::new(2, vec![3], 2).with_activation(crate::bnn::Activation::Tanh);
        let w = WeightSet::glorot(&arch, &mut seeded(seed));
        init_posterior(&arch, InitMode::FromMle(&w), sigma).unwrap()
    }

    const SCALE: LossScale = LossScale {
        dataset_size: 4,
        mc_samples: 2,
        kl_scale: 0.5,
    };

    #[test]
    fn kl_vanishes_when_prior_equals_posterior() {
        let q = posterior(1, 0.3);
        let batch = toy_set().as_batch();
        let mut tape = Tape::new();
        let b = q.bind(&mut tape).unwrap();
        let loss = vcl_loss(&mut tape, &b, &q, &batch, &SCALE, &mut seeded(2)).unwrap();
        let mut tape2 = Tape::new();
        let b2 = q.bind(&mut tape2).unwrap();
        let nll = expected_nll(&mut tape2, &b2, &batch, &SCALE, true, &mut seeded(2)).unwrap();
        assert!((tape.value(loss).item() - tape2.value(nll).item()).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let q = posterior(1, 0.3);
        let batch = Batch {
            inputs: Tensor::zeros(&[0, 2]),
            targets: vec![],
            heads: None,
        };
        let mut tape = Tape::new();
        let b = q.bind(&mut tape).unwrap();
        assert!(vcl_loss(&mut tape, &b, &q, &batch, &SCALE, &mut seeded(1)).is_err());
    }

    #[test]
    fn perfect_fit_leaves_only_kl() {
        // Single linear layer with huge correct-class margin.
        let arch = Architecture::new(1, vec![], 2);
        let w = WeightSet {
            layers: vec![bnn::DenseLayer {
                w: Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
                b: Tensor::vector(vec![60.0, -60.0]),
            }],
        };
        let q = init_posterior(&arch, InitMode::FromMle(&w), 1e-9).unwrap();
        let prior = MeanFieldPosterior::unit_prior(&arch).unwrap();
        let batch = TrainSet::new(Tensor::matrix(1, 1, vec![0.5]).unwrap(), vec![0], None).unwrap();
        let scale = LossScale {
            dataset_size: 1,
            mc_samples: 1,
            kl_scale: 1.0,
        };
        let mut tape = Tape::new();
        let b = q.bind(&mut tape).unwrap();
        let loss = vcl_loss(&mut tape, &b, &prior, &batch, &scale, &mut seeded(0)).unwrap();
        let kl = bnn::kl_value(&q, &prior).unwrap();
        let gap = tape.value(loss).item() - kl;
        assert!((0.0..1e-40).contains(&gap), "gap {gap}");
    }

    #[test]
    fn losses_pass_gradient_checks() {
        let q = posterior(5, 0.4);
        let prior = posterior(6, 0.8);
        let batch = toy_set().as_batch();
        for which in 0..4 {
            let mut tape = Tape::new();
            let b = q.bind(&mut tape).unwrap();
            let mut rng = seeded(8);
            let loss = match which {
                0 => vcl_loss(&mut tape, &b, &prior, &batch, &SCALE, &mut rng),
                1 => replay_elbo_loss(&mut tape, &b, &prior, &batch, &SCALE, &mut rng),
                2 => hybrid_loss(&mut tape, &b, &prior, &batch, &SCALE, &mut rng),
                _ => plain_loss(&mut tape, &b, &batch, &SCALE, &mut rng),
            }
            .unwrap();
            let err = grad_check(&mut tape, loss, &b.param_nodes(), 1e-5).unwrap();
            assert!(err < 1e-4, "loss {which}: {err}");
        }
    }

    #[test]
    fn minibatch_estimator_is_unbiased() {
        let x = Tensor::matrix(6, 2, vec![0.1, 0.9, 0.3, 0.2, 0.8, 0.5, 0.4, 0.4, 0.9, 0.1, 0.6, 0.7]).unwrap();
        let data = TrainSet::new(x, vec![0, 1, 1, 0, 1, 0], None).unwrap();
        let q = posterior(3, 0.2);
        let scale = LossScale {
            dataset_size: 6,
            mc_samples: 1,
            kl_scale: 0.0,
        };
        let eval = |idx: &[usize]| {
            let mut tape = Tape::new();
            let b = q.bind(&mut tape).unwrap();
            // the same seed draws the same weights regardless of batch size
            let n = expected_nll(&mut tape, &b, &data.batch(idx), &scale, true, &mut seeded(4)).unwrap();
            tape.value(n).item()
        };
        let full = eval(&[0, 1, 2, 3, 4, 5]);
        for size in 1..=5 {
            let mut subsets = Vec::new();
            for mask in 0u32..64 {
                if mask.count_ones() as usize == size {
                    subsets.push((0..6).filter(|i| mask & (1 << i) != 0).collect::<Vec<usize>>());
                }
            }
            let mean = subsets.iter().map(|s| eval(s)).sum::<f64>() / subsets.len() as f64;
            assert!((mean - full).abs() < 1e-9, "size {size}: {mean} vs {full}");
        }
    }

    #[test]
    fn loss_invariant_to_batch_order() {
        let q = posterior(9, 0.3);
        let prior = MeanFieldPosterior::unit_prior(q.arch()).unwrap();
        let data = toy_set();
        let eval = |idx: &[usize]| {
            let mut tape = Tape::new();
            let b = q.bind(&mut tape).unwrap();
            let l = vcl_loss(&mut tape, &b, &prior, &data.batch(idx), &SCALE, &mut seeded(1)).unwrap();
            tape.value(l).item()
        };
        let a = eval(&[0, 1, 2, 3]);
        let b = eval(&[3, 1, 0, 2]);
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn first_task_losses_coincide() {
        let q = posterior(4, 0.1);
        let p0 = MeanFieldPosterior::unit_prior(q.arch()).unwrap();
        let batch = toy_set().as_batch();
        let mut values = Vec::new();
        for which in 0..3 {
            let mut tape = Tape::new();
            let b = q.bind(&mut tape).unwrap();
            let mut rng = seeded(10);
            let l = match which {
                0 => vcl_loss(&mut tape, &b, &p0, &batch, &SCALE, &mut rng),
                1 => replay_elbo_loss(&mut tape, &b, &p0, &batch, &SCALE, &mut rng),
                _ => hybrid_loss(&mut tape, &b, &p0, &batch, &SCALE, &mut rng),
            }
            .unwrap();
            values.push(tape.value(l).item());
        }
        assert!((values[0] - values[1]).abs() < 1e-9);
        assert!((values[0] - values[2]).abs() < 1e-9);
    }

    #[test]
    fn training_reduces_loss_on_toy_task() {
        let data = toy_set();
        let cfg = TrainingConfig {
            epochs: 1000,
            batch: BatchPolicy::FullDataset,
            mc_samples: 2,
            ..TrainingConfig::default()
        };
        let arch = Architecture::new(2, vec![8], 2);
        let mut rng = seeded(3);
        let mle = fit_mle(&arch, &data, 300, 4, &TrainingConfig { adam: AdamParams::new(0.05), ..cfg.clone() }, &mut rng).unwrap();
        let mut q = init_posterior(&arch, InitMode::FromMle(&mle), 1e-3).unwrap();
        let p0 = MeanFieldPosterior::unit_prior(&arch).unwrap();
        let scale = LossScale {
            dataset_size: 4,
            mc_samples: 8,
            kl_scale: 1.0,
        };
        let value = |q: &MeanFieldPosterior| {
            let mut tape = Tape::new();
            let b = q.bind(&mut tape).unwrap();
            let l = vcl_loss(&mut tape, &b, &p0, &data.as_batch(), &scale, &mut seeded(77)).unwrap();
            tape.value(l).item()
        };
        let before = value(&q);
        fit(&mut q, Some(&p0), &data, cfg.epochs, 4, &cfg, &mut rng).unwrap();
        let after = value(&q);
        assert!(after < before, "{after} !< {before}");
        // the point-estimate fit classifies XOR
        let probs = bnn::probabilities(&arch, &mle, &data.inputs, None).unwrap();
        for (i, &t) in data.targets.iter().enumerate() {
            assert!(probs.row(i)[t] > 0.5);
        }
    }

    #[test]
    fn train_task_validates_inputs() {
        let q = posterior(1, 0.1);
        let p0 = MeanFieldPosterior::unit_prior(q.arch()).unwrap();
        let ctx = TaskContext {
            task: 0,
            seen_tasks: 1,
            start: &q,
            previous: &p0,
            original_prior: &p0,
        };
        let cfg = TrainingConfig {
            epochs: 1,
            ..TrainingConfig::default()
        };
        let data = toy_set();
        let err = train_task(
            &LossSpec::for_method(Method::Vgr),
            &cfg,
            &ctx,
            &data,
            Auxiliary::None,
            &mut seeded(1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InputMismatch(_)));
        let err = train_task(
            &LossSpec::for_method(Method::VclCoreset),
            &cfg,
            &ctx,
            &data,
            Auxiliary::Coresets(&[]),
            &mut seeded(1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InputMismatch(_)));
    }

    #[test]
    fn train_task_is_deterministic() {
        let q = posterior(2, 0.05);
        let p0 = MeanFieldPosterior::unit_prior(q.arch()).unwrap();
        let ctx = TaskContext {
            task: 0,
            seen_tasks: 1,
            start: &q,
            previous: &p0,
            original_prior: &p0,
        };
        let cfg = TrainingConfig {
            epochs: 20,
            batch: BatchPolicy::Fixed(2),
            ..TrainingConfig::default()
        };
        let run = || {
            train_task(&LossSpec::for_method(Method::Vcl), &cfg, &ctx, &toy_set(), Auxiliary::None, &mut seeded(5))
                .unwrap()
                .propagated
        };
        let (a, b) = (run(), run());
        assert_eq!(a.to_bytes(0), b.to_bytes(0));
    }
}

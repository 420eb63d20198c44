//! Episodic memory: coreset selection and evaluation-time fine-tuning.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::bnn::MeanFieldPosterior;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::objectives::{fit, TrainSet, TrainingConfig};
use crate::rng::{self, Rng};
use crate::tasks::TaskSequence;

/// Examples withheld from one task's training set.
#[derive(Clone, Debug, PartialEq)]
pub struct Coreset {
    pub task: usize,
    /// Row indices into the task's original training set.
    pub indices: Vec<usize>,
    pub data: TrainSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    KCenter,
    Uniform,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest-point selection starting from `seed_index`.
///
/// Ties go to the lowest row index. Returns indices in pick order.
pub fn k_center_select(data: &Tensor, k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = data.rows();
    if k > n {
        return Err(Error::InvalidArgument(format!("coreset size {k} exceeds {n} points")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if seed_index >= n {
        return Err(Error::InvalidArgument(format!("seed index {seed_index} out of range for {n} points")));
    }
    let mut picked = vec![seed_index];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(seed_index))).collect();
    while picked.len() < k {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        picked.push(best);
        let c = data.row(best);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), c));
        }
    }
    Ok(picked)
}

/// `k` distinct indices drawn uniformly, in ascending order.
pub fn uniform_select(n: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::InvalidArgument(format!("coreset size {k} exceeds {n} points")));
    }
    let mut idx = index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Largest distance from any row to its nearest chosen centre.
pub fn covering_radius(data: &Tensor, centres: &[usize]) -> f64 {
    if centres.is_empty() {
        return f64::INFINITY;
    }
    (0..data.rows())
        .map(|i| {
            centres
                .iter()
                .map(|&c| sq_dist(data.row(i), data.row(c)))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

/// Selects `k` examples per task and removes them from the training sets.
pub fn withhold(seq: &mut TaskSequence, k: usize, selector: Selector, seed: u64) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("coreset size must be positive".into()));
    }
    for t in 0..seq.len() {
        let full = seq.train_set(t);
        let n = full.len();
        let picked = match selector {
            Selector::KCenter => k_center_select(&full.inputs, k, 0)?,
            Selector::Uniform => uniform_select(n, k, &mut rng::stream(seed, "coreset", t as u64))?,
        };
        let mut keep = vec![true; n];
        for &i in &picked {
            keep[i] = false;
        }
        let rest: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
        let task = &mut seq.tasks[t];
        task.train = task
            .train
            .subset(&rest)
            .ok_or_else(|| Error::Data(format!("task {t}: coreset consumed the whole training set")))?;
        let mut picked = picked;
        picked.sort_unstable();
        task.coreset = Some(Coreset {
            task: t,
            data: full.subset(&picked),
            indices: picked,
        });
    }
    Ok(())
}

/// Fine-tunes a copy of `q` on the coresets of every seen task.
///
/// The objective is an ELBO on coreset data with `q` itself as the prior.
/// Single-head coresets are pooled into one set; multi-head coresets train
/// their heads in turn. `q` is left untouched.
pub fn finetune(q: &MeanFieldPosterior, coresets: &[Coreset], cfg: &TrainingConfig, rng: &mut Rng) -> Result<MeanFieldPosterior> {
    if coresets.is_empty() {
        return Err(Error::InvalidArgument("no coresets to fine-tune on".into()));
    }
    let mut tuned = q.clone();
    if cfg.finetune_epochs == 0 {
        return Ok(tuned);
    }
    if coresets.iter().all(|c| c.data.heads.is_some()) {
        for c in coresets {
            let batch = cfg.finetune_batch.resolve(c.data.len(), 1);
            fit(&mut tuned, Some(q), &c.data, cfg.finetune_epochs, batch, cfg, rng)?;
        }
    } else {
        let parts: Vec<&TrainSet> = coresets.iter().map(|c| &c.data).collect();
        let pooled = TrainSet::concat(&parts)?;
        let batch = cfg.finetune_batch.resolve(pooled.len(), coresets.len());
        fit(&mut tuned, Some(q), &pooled, cfg.finetune_epochs, batch, cfg, rng)?;
    }
    Ok(tuned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn line(points: &[f64]) -> Tensor {
        Tensor::matrix(points.len(), 1, points.to_vec()).unwrap()
    }

    #[test]
    fn k_center_on_a_line() {
        let x = line(&[0.0, 1.0, 2.0, 10.0]);
        assert_eq!(k_center_select(&x, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(k_center_select(&x, 3, 0).unwrap(), vec![0, 3, 2]);
        assert!(k_center_select(&x, 5, 0).is_err());
        assert!(k_center_select(&x, 0, 0).unwrap().is_empty());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let x = line(&[0.0, -1.0, 1.0]);
        assert_eq!(k_center_select(&x, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn k_center_within_twice_optimal_radius() {
        let mut rng = seeded(11);
        for trial in 0..20 {
            let n = 9;
            let k = 1 + trial % 3;
            let pts: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor::matrix(n, 2, pts).unwrap();
            let greedy = covering_radius(&x, &k_center_select(&x, k, 0).unwrap());
            let mut best = f64::INFINITY;
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize == k {
                    let c: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
                    best = best.min(covering_radius(&x, &c));
                }
            }
            assert!(greedy <= 2.0 * best + 1e-12, "trial {trial}: {greedy} vs {best}");
        }
    }

    #[test]
    fn uniform_selection_is_distinct() {
        let idx = uniform_select(50, 20, &mut seeded(3)).unwrap();
        assert_eq!(idx.len(), 20);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(uniform_select(3, 4, &mut seeded(3)).is_err());
    }
}

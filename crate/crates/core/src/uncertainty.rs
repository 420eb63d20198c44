//! Monte Carlo evaluation of stored posteriors: predictive accuracy and
//! the mutual information between weights and labels (BALD).

use std::fmt::Write as _;
use std::path::Path;

use crate::bnn::{self, MeanFieldPosterior, PosteriorSnapshot};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::objectives::TrainSet;
use crate::rng::{self, Rng};
use crate::snapshot;

/// Clamped values below this are reported as suspicious rather than noise.
pub const CLAMP_TOLERANCE: f64 = 1e-6;

/// Class probabilities of `set` under one weight draw; rows on a head are
/// renormalised over that head's columns.
fn probabilities_for(post: &MeanFieldPosterior, weights: &bnn::WeightSet, set: &TrainSet) -> Result<Tensor> {
    let arch = post.arch();
    let Some(heads) = &set.heads else {
        return bnn::probabilities(arch, weights, &set.inputs, None);
    };
    let c = arch.output_dim;
    let mut out = Tensor::zeros(&[set.len(), c]);
    let mut present = heads.clone();
    present.sort_unstable();
    present.dedup();
    for h in present {
        let rows: Vec<usize> = (0..heads.len()).filter(|&i| heads[i] == h).collect();
        let p = bnn::probabilities(arch, weights, &set.inputs.select_rows(&rows), Some(h))?;
        for (k, &i) in rows.iter().enumerate() {
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(p.row(k));
        }
    }
    Ok(out)
}

/// `n_samples` per-draw probability tables for `set`.
pub fn predictive_samples(post: &MeanFieldPosterior, set: &TrainSet, n_samples: usize, rng: &mut Rng) -> Result<Vec<Tensor>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    (0..n_samples)
        .map(|_| probabilities_for(post, &post.sample_weight_set(rng), set))
        .collect()
}

fn mean_table(samples: &[Tensor]) -> Tensor {
    let mut acc = Tensor::zeros(samples[0].shape());
    for s in samples {
        for (a, v) in acc.data_mut().iter_mut().zip(s.data()) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    acc.map(|v| v / n)
}

/// Fraction of rows whose Monte Carlo predictive argmax is the target.
pub fn accuracy(post: &MeanFieldPosterior, set: &TrainSet, n_samples: usize, rng: &mut Rng) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let mean = mean_table(&predictive_samples(post, set, n_samples, rng)?);
    let mut correct = 0;
    for i in 0..set.len() {
        let offset = match &set.heads {
            Some(h) => post.arch().head_columns(h[i])?.0,
            None => 0,
        };
        let row = mean.row(i);
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        if best == offset + set.targets[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// An MI estimate and how much was clamped away to keep it non-negative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiEstimate {
    pub value: f64,
    pub clamped: f64,
}

/// `H(mean_s p_s) - mean_s H(p_s)` in nats, averaged over rows.
pub fn mi_from_samples(samples: &[Tensor]) -> Result<MiEstimate> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "mutual information needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let shape = samples[0].shape();
    if shape.len() != 2 || shape[0] == 0 || samples.iter().any(|s| s.shape() != shape) {
        return Err(Error::InvalidArgument("sample tables must share a non-empty 2-d shape".into()));
    }
    let mean = mean_table(samples);
    let n = shape[0];
    let s = samples.len() as f64;
    let mut total = 0.0;
    for i in 0..n {
        let expected: f64 = samples.iter().map(|t| entropy(t.row(i))).sum::<f64>() / s;
        total += entropy(mean.row(i)) - expected;
    }
    let raw = total / n as f64;
    Ok(if raw < 0.0 {
        MiEstimate { value: 0.0, clamped: -raw }
    } else {
        MiEstimate { value: raw, clamped: 0.0 }
    })
}

pub fn mutual_information(post: &MeanFieldPosterior, test: &TrainSet, n_samples: usize, rng: &mut Rng) -> Result<MiEstimate> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "mutual information needs at least 2 samples, got {n_samples}"
        )));
    }
    mi_from_samples(&predictive_samples(post, test, n_samples, rng)?)
}

/// Row `t` is the posterior after task `t`, column `t'` the test set of task `t'`.
#[derive(Clone, Debug, PartialEq)]
pub struct MiMatrix {
    pub raw: Vec<Vec<f64>>,
    /// Each row divided by its maximum (rows of zeros stay zero).
    pub scaled: Vec<Vec<f64>>,
    /// Per row: max over seen columns < min over unseen columns. `None`
    /// for the last row, which has no unseen columns.
    pub separation: Vec<Option<bool>>,
    pub max_clamp: f64,
}

impl MiMatrix {
    pub fn from_raw(raw: Vec<Vec<f64>>, max_clamp: f64) -> Self {
        let scaled = raw
            .iter()
            .map(|row| {
                let m = row.iter().copied().fold(0.0, f64::max);
                row.iter().map(|&v| if m > 0.0 { v / m } else { 0.0 }).collect()
            })
            .collect();
        let t_total = raw.len();
        let separation = raw
            .iter()
            .enumerate()
            .map(|(t, row)| {
                (t + 1 < t_total).then(|| {
                    let seen = row[..=t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let unseen = row[t + 1..].iter().copied().fold(f64::INFINITY, f64::min);
                    seen < unseen
                })
            })
            .collect();
        Self {
            raw,
            scaled,
            separation,
            max_clamp,
        }
    }

    pub fn size(&self) -> usize {
        self.raw.len()
    }

    /// True when every row that has unseen columns separates.
    pub fn separates(&self) -> bool {
        self.separation.iter().all(|s| s.unwrap_or(true))
    }

    pub fn separated_rows(&self) -> usize {
        self.separation.iter().filter(|s| **s == Some(true)).count()
    }
}

pub fn mi_matrix(snapshots: &[PosteriorSnapshot], tests: &[TrainSet], n_samples: usize, seed: u64) -> Result<MiMatrix> {
    if snapshots.len() != tests.len() {
        return Err(Error::InputMismatch(format!(
            "{} snapshots but {} test sets",
            snapshots.len(),
            tests.len()
        )));
    }
    let t_total = snapshots.len();
    let mut raw = vec![vec![0.0; t_total]; t_total];
    let mut max_clamp: f64 = 0.0;
    for (t, snap) in snapshots.iter().enumerate() {
        for (u, test) in tests.iter().enumerate() {
            let mut rng = rng::stream(seed, "mi", (t * t_total + u) as u64);
            let est = mutual_information(snap.posterior(), test, n_samples, &mut rng)?;
            raw[t][u] = est.value;
            max_clamp = max_clamp.max(est.clamped);
        }
    }
    Ok(MiMatrix::from_raw(raw, max_clamp))
}

/// CSV with header `posterior_task,test_task,value`; task ids are 1-based.
pub fn matrix_csv(values: &[Vec<f64>]) -> String {
    let mut out = String::from("posterior_task,test_task,value\n");
    for (t, row) in values.iter().enumerate() {
        for (u, v) in row.iter().enumerate() {
            writeln!(out, "{},{},{}", t + 1, u + 1, v).unwrap();
        }
    }
    out
}

/// Writes `mi_raw.csv` and `mi_scaled.csv` into `dir`.
pub fn write_mi_csvs(dir: &Path, m: &MiMatrix) -> Result<()> {
    snapshot::write_atomic(&dir.join("mi_raw.csv"), matrix_csv(&m.raw).as_bytes())?;
    snapshot::write_atomic(&dir.join("mi_scaled.csv"), matrix_csv(&m.scaled).as_bytes())
}

/// Parses a matrix CSV written by [`matrix_csv`].
pub fn parse_matrix_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    if lines.next() != Some("posterior_task,test_task,value") {
        return Err(Error::Format("unexpected MI csv header".into()));
    }
    let mut cells = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("bad MI csv row {line:?}"));
        if f.len() != 3 {
            return Err(bad());
        }
        let t: usize = f[0].parse().map_err(|_| bad())?;
        let u: usize = f[1].parse().map_err(|_| bad())?;
        let v: f64 = f[2].parse().map_err(|_| bad())?;
        if t == 0 || u == 0 {
            return Err(bad());
        }
        cells.push((t - 1, u - 1, v));
    }
    let n = cells.iter().map(|c| c.0.max(c.1) + 1).max().unwrap_or(0);
    if cells.len() != n * n {
        return Err(Error::Format("MI csv is not a full square matrix".into()));
    }
    let mut m = vec![vec![0.0; n]; n];
    for (t, u, v) in cells {
        m[t][u] = v;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::{init_posterior, Architecture, InitMode, WeightSet};
    use crate::rng::seeded;

    fn table(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identical_samples_have_zero_mi() {
        let s = table(&[&[0.2, 0.3, 0.5], &[0.9, 0.05, 0.05]]);
        let est = mi_from_samples(&[s.clone(), s.clone(), s]).unwrap();
        assert!(est.value.abs() < 1e-15);
    }

    #[test]
    fn opposite_one_hots_give_ln2() {
        let a = table(&[&[1.0, 0.0]]);
        let b = table(&[&[0.0, 1.0]]);
        let est = mi_from_samples(&[a, b]).unwrap();
        assert!((est.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn needs_two_samples() {
        assert!(mi_from_samples(&[table(&[&[1.0, 0.0]])]).is_err());
    }

    #[test]
    fn invariant_to_class_relabelling() {
        let a = table(&[&[0.7, 0.2, 0.1], &[0.1, 0.1, 0.8]]);
        let b = table(&[&[0.3, 0.3, 0.4], &[0.5, 0.25, 0.25]]);
        let perm = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..t.rows()).map(|i| vec![t.row(i)[2], t.row(i)[0], t.row(i)[1]]).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let x = mi_from_samples(&[a.clone(), b.clone()]).unwrap().value;
        let y = mi_from_samples(&[perm(&a), perm(&b)]).unwrap().value;
        assert!((x - y).abs() < 1e-15);
    }

    #[test]
    fn near_deterministic_posterior_has_near_zero_mi() {
        let arch = Architecture::new(3, vec![4], 3);
        let w = WeightSet::glorot(&arch, &mut seeded(1));
        let q = init_posterior(&arch, InitMode::FromMle(&w), 1e-9).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.5, 0.9, 0.3, 0.3, 0.3]).unwrap();
        let set = TrainSet::new(x, vec![0, 1], None).unwrap();
        let est = mutual_information(&q, &set, 20, &mut seeded(2)).unwrap();
        assert!(est.value < 1e-12);
    }

    #[test]
    fn matrix_scaling_and_separation() {
        let m = MiMatrix::from_raw(vec![vec![0.1, 0.4, 0.5], vec![0.1, 0.2, 0.8], vec![0.0, 0.0, 0.0]], 0.0);
        assert_eq!(m.scaled[0], vec![0.2, 0.8, 1.0]);
        assert_eq!(m.scaled[2], vec![0.0, 0.0, 0.0]);
        assert_eq!(m.separation, vec![Some(true), Some(true), None]);
        assert!(m.separates());
        let m = MiMatrix::from_raw(vec![vec![0.5, 0.4], vec![0.1, 0.1]], 0.0);
        assert_eq!(m.separation, vec![Some(false), None]);
        let one = MiMatrix::from_raw(vec![vec![0.3]], 0.0);
        assert_eq!(one.scaled, vec![vec![1.0]]);
        assert!(one.separates());
    }

    #[test]
    fn csv_round_trip() {
        let raw = vec![vec![0.1, 0.25], vec![1e-17, 0.0]];
        let text = matrix_csv(&raw);
        assert!(text.starts_with("posterior_task,test_task,value\n1,1,0.1\n"));
        assert_eq!(parse_matrix_csv(&text).unwrap(), raw);
    }

    #[test]
    fn multi_head_accuracy_uses_head_window() {
        let arch = Architecture::new(1, vec![], 4).with_heads(2);
        let w = WeightSet {
            layers: vec![bnn::DenseLayer {
                w: Tensor::matrix(1, 4, vec![0.0; 4]).unwrap(),
                // head 0 prefers label 1, head 1 prefers label 0
                b: Tensor::vector(vec![0.0, 5.0, 3.0, -9.0]),
            }],
        };
        let q = init_posterior(&arch, InitMode::FromMle(&w), 1e-9).unwrap();
        let x = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        let set = TrainSet::new(x, vec![1, 0], Some(vec![0, 1])).unwrap();
        assert_eq!(accuracy(&q, &set, 3, &mut seeded(0)).unwrap(), 1.0);
    }
}

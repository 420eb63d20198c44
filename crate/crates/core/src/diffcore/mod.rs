//! Dense `f64` tensors with a reverse-mode autodiff tape.
//!
//! The primitive set covers fully connected networks, reparameterised
//! Gaussian weights and adversarial training. Every primitive checks input
//! shapes and rejects non-finite forward values.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, NodeId, Primitive, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("{0}")]
    InvalidArgument(String),
}

/// Compares reverse-mode gradients of `loss` against central differences.
///
/// Each element of every leaf in `params` is perturbed by `±h` and the tape
/// re-evaluated. Returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` seen. The tape is
/// restored to its original values before returning.
pub fn grad_check(tape: &mut Tape, loss: NodeId, params: &[NodeId], h: f64) -> Result<f64, DiffError> {
    if !(h > 0.0) {
        return Err(DiffError::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for &p in params {
        if *tape.primitive(p) != Primitive::Leaf {
            return Err(DiffError::InvalidArgument(format!("node {} is not a leaf", p.index())));
        }
        let analytic = grads.wrt(p);
        let original = tape.value(p).clone();
        for i in 0..original.len() {
            let mut probe = original.clone();
            probe.data_mut()[i] = original.data()[i] + h;
            tape.set_leaf(p, probe.clone())?;
            tape.recompute()?;
            let plus = tape.value(loss).item();
            probe.data_mut()[i] = original.data()[i] - h;
            tape.set_leaf(p, probe)?;
            tape.recompute()?;
            let minus = tape.value(loss).item();
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        tape.set_leaf(p, original)?;
    }
    tape.recompute()?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_by_identity() {
        let mut tape = Tape::new();
        let eye = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = tape.leaf(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn activations_match_definitions() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let y = tape.leaf(Tensor::vector(vec![-10.0]));
        let l = tape.leaky_relu(y, 0.2).unwrap();
        assert!((tape.value(l).item() + 2.0).abs() < 1e-12);

        let z = tape.leaf(Tensor::vector(vec![0.0]));
        let s = tape.softplus(z).unwrap();
        assert!((tape.value(s).item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((tape.value(s).item() - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(kernels::softplus(800.0), 800.0);
        assert!(kernels::softplus(-800.0) >= 0.0);
        for y in [1e-6, 0.01, 1.0, 5.0, 40.0] {
            let back = kernels::softplus(kernels::softplus_inv(y));
            assert!((back - y).abs() <= 1e-12 * y.max(1.0), "{y} -> {back}");
        }
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            DiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
        let c = tape.leaf(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, c), Err(DiffError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]));
        assert_eq!(tape.log(x), Err(DiffError::NonFinite { op: "log" }));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let f = tape.mul(x, x).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn relu_gradient_at_negative_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0));
        let r = tape.relu(x).unwrap();
        let g = tape.backward(r).unwrap();
        assert_eq!(g.wrt(x).item(), 0.0);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.backward(r).unwrap().wrt(x).item(), 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn nodes_off_the_loss_path_get_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::vector(vec![5.0, 5.0]));
        let side = tape.square(unused).unwrap();
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
        assert_eq!(g.wrt(side).data(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[5]));
        let sq = tape.square(x).unwrap();
        let q = tape.sum(sq).unwrap();
        assert!(grad_check(&mut tape, q, &[x], 1e-5).unwrap() < 1e-7);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.leaf(Tensor::scalar(4.0));
        let loss = tape.sum(c).unwrap();
        assert_eq!(grad_check(&mut tape, loss, &[x], 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn grad_check_softplus_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[6]));
        let a = tape.softplus(x).unwrap();
        let b = tape.softplus(a).unwrap();
        let l = tape.log(b).unwrap();
        let loss = tape.sum(l).unwrap();
        assert!(grad_check(&mut tape, loss, &[x], 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let l = tape.sum(x).unwrap();
        assert!(grad_check(&mut tape, l, &[x], 0.0).is_err());
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[4, 3]));
        let w1 = tape.leaf(random(&mut rng, &[3, 5]));
        let b1 = tape.leaf(random(&mut rng, &[5]));
        let w2 = tape.leaf(random(&mut rng, &[5, 3]));
        let h = tape.matmul(x, w1).unwrap();
        let h = tape.add_row(h, b1).unwrap();
        let h = tape.tanh(h).unwrap();
        let o = tape.matmul(h, w2).unwrap();
        let lp = tape.log_softmax(o).unwrap();
        let p = tape.pick(lp, vec![0, 2, 1, 1]).unwrap();
        let loss = tape.mean(p).unwrap();
        let err = grad_check(&mut tape, loss, &[x, w1, b1, w2], 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn recompute_restores_after_grad_check() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -0.7]));
        let e = tape.exp(x).unwrap();
        let loss = tape.sum(e).unwrap();
        let before = tape.value(loss).item();
        grad_check(&mut tape, loss, &[x], 1e-5).unwrap();
        assert_eq!(tape.value(loss).item(), before);
    }

    #[test]
    fn structural_primitives() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = tape.gather_rows(m, vec![2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.slice_cols(m, 1, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 4.0, 6.0]);
        let c = tape.concat(&[m, g]).unwrap();
        assert_eq!(tape.value(c).shape(), &[6, 2]);
        let p = tape.pick(m, vec![1, 0, 1]).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 3.0, 6.0]);
        assert!(tape.pick(m, vec![2, 0, 0]).is_err());
        assert!(tape.slice_cols(m, 1, 2).is_err());
    }

    #[test]
    fn log_softmax_rows_normalise() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1000.0, 1001.0, 999.0, -3.0, 0.0, 2.0]).unwrap());
        let lp = tape.log_softmax(x).unwrap();
        for row in tape.value(lp).data().chunks(3) {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let mut expected = vec![0.0; 3];
        kernels::softmax_rows(&[-3.0, 0.0, 2.0], 3, &mut expected);
        let got: Vec<f64> = tape.value(lp).row(1).iter().map(|v| v.exp()).collect();
        assert!(close(&got, &expected, 1e-12));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut tape = Tape::new();
            let a = tape.leaf(random(&mut rng, &[3, 4]));
            let b = tape.leaf(random(&mut rng, &[4, 2]));
            let c = tape.matmul(a, b).unwrap();
            let d = tape.softplus(c).unwrap();
            let l = tape.sum(d).unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(l).item().to_bits(), g.wrt(a).data().to_vec())
        };
        assert_eq!(build(), build());
    }
}

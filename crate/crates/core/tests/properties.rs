use bayes_cl::bnn;
use bayes_cl::coreset;
use bayes_cl::diffcore::{grad_check, Tape, Tensor};
use bayes_cl::uncertainty;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smooth_chain_gradients(a in matrix(3, 4), w in matrix(4, 2), b in prop::collection::vec(-1.0f64..1.0, 2)) {
        let mut tape = Tape::new();
        let an = tape.leaf(a);
        let wn = tape.leaf(w);
        let bn = tape.leaf(Tensor::vector(b));
        let h = tape.matmul(an, wn).unwrap();
        let h = tape.add_row(h, bn).unwrap();
        let h = tape.tanh(h).unwrap();
        let h = tape.softplus(h).unwrap();
        let lp = tape.log_softmax(h).unwrap();
        let picked = tape.pick(lp, vec![0, 1, 1]).unwrap();
        let loss = tape.sum(picked).unwrap();
        let err = grad_check(&mut tape, loss, &[an, wn, bn], 1e-5).unwrap();
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn log_softmax_rows_normalise(a in matrix(4, 5)) {
        let mut tape = Tape::new();
        let n = tape.leaf(a);
        let lp = tape.log_softmax(n).unwrap();
        let v = tape.value(lp);
        for r in 0..4 {
            let s: f64 = v.row(r).iter().map(|x| x.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_of_add_is_linear(a in matrix(2, 3), b in matrix(2, 3)) {
        let mut tape = Tape::new();
        let an = tape.leaf(a.clone());
        let bn = tape.leaf(b.clone());
        let s = tape.add(an, bn).unwrap();
        let s = tape.sum(s).unwrap();
        let total: f64 = a.data().iter().chain(b.data()).sum();
        prop_assert!((tape.value(s).item() - total).abs() < 1e-12);
        let g = tape.backward(s).unwrap();
        prop_assert!(g.wrt(an).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn gaussian_kl_is_non_negative(mq in -3.0f64..3.0, sq in 0.05f64..3.0, mp in -3.0f64..3.0, sp in 0.05f64..3.0) {
        prop_assert!(bnn::gaussian_kl(mq, sq, mp, sp) >= -1e-12);
        prop_assert!(bnn::gaussian_kl(mq, sq, mq, sq).abs() < 1e-12);
    }

    #[test]
    fn k_center_picks_are_distinct(pts in prop::collection::vec(-1.0f64..1.0, 10..40), k in 1usize..5) {
        let n = pts.len() / 2;
        let x = Tensor::matrix(n, 2, pts[..2 * n].to_vec()).unwrap();
        let k = k.min(n);
        let picked = coreset::k_center_select(&x, k, 0).unwrap();
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        prop_assert_eq!(picked[0], 0);
    }

    #[test]
    fn mutual_information_is_bounded(p in prop::collection::vec(0.01f64..1.0, 12)) {
        // 4 samples x 1 row x 3 classes
        let samples: Vec<Tensor> = p
            .chunks(3)
            .map(|c| {
                let s: f64 = c.iter().sum();
                Tensor::matrix(1, 3, c.iter().map(|x| x / s).collect()).unwrap()
            })
            .collect();
        let mi = uncertainty::mi_from_samples(&samples).unwrap();
        prop_assert!(mi.value >= 0.0);
        prop_assert!(mi.value <= 3.0f64.ln() + 1e-12);
    }
}

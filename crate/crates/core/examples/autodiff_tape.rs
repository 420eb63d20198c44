//! Builds a tiny expression on the tape, differentiates it and checks the
//! result against central differences.

use bayes_cl::diffcore::{grad_check, Tape, Tensor};

fn main() -> bayes_cl::Result<()> {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?);
    let w = tape.leaf(Tensor::matrix(3, 2, vec![0.2, -0.4, 1.1, 0.6, -0.3, 0.9])?);
    let h = tape.matmul(x, w)?;
    let h = tape.tanh(h)?;
    let sq = tape.mul(h, h)?;
    let loss = tape.sum(sq)?;

    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).item());
    println!("dloss/dw = {:?}", grads.wrt(w).data());
    let err = grad_check(&mut tape, loss, &[x, w], 1e-6)?;
    println!("max relative error vs finite differences: {err:.2e}");
    Ok(())
}

//! Finite-difference check of every training objective on a small
//! Bayesian network.

use bayes_cl::bnn::{self, Activation, Architecture, InitMode, MeanFieldPosterior, WeightSet};
use bayes_cl::diffcore::{grad_check, Tape, Tensor};
use bayes_cl::objectives::{self, LossScale, TrainSet};
use bayes_cl::rng::seeded;

fn main() -> bayes_cl::Result<()> {
    let arch = Architecture::new(2, vec![4], 3).with_activation(Activation::Tanh);
    println!("{} weights", arch.num_weights());
    let mut rng = seeded(7);
    let q = bnn::init_posterior(&arch, InitMode::FromMle(&WeightSet::glorot(&arch, &mut rng)), 0.2)?;
    let prior = MeanFieldPosterior::unit_prior(&arch)?;
    let x = Tensor::matrix(4, 2, vec![0.1, 0.9, -0.4, 0.3, 0.8, -0.2, 0.0, 0.5])?;
    let batch = TrainSet::new(x, vec![0, 2, 1, 2], None)?;
    let scale = LossScale {
        dataset_size: 40,
        mc_samples: 2,
        kl_scale: 1.0,
    };

    for name in ["vcl", "replay-elbo", "hybrid", "plain"] {
        let mut tape = Tape::new();
        let b = q.bind(&mut tape)?;
        let mut r = seeded(1);
        let loss = match name {
            "vcl" => objectives::vcl_loss(&mut tape, &b, &prior, &batch, &scale, &mut r)?,
            "replay-elbo" => objectives::replay_elbo_loss(&mut tape, &b, &prior, &batch, &scale, &mut r)?,
            "hybrid" => objectives::hybrid_loss(&mut tape, &b, &prior, &batch, &scale, &mut r)?,
            _ => objectives::plain_loss(&mut tape, &b, &batch, &scale, &mut r)?,
        };
        let err = grad_check(&mut tape, loss, &b.param_nodes(), 1e-6)?;
        println!("{name:12} loss {:10.4}  max rel err {err:.2e}", tape.value(loss).item());
    }
    Ok(())
}

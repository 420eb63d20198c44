//! Saves a posterior snapshot, reloads it and compares predictions.

use bayes_cl::bnn::{self, Architecture, InitMode, PosteriorSnapshot, WeightSet};
use bayes_cl::diffcore::Tensor;
use bayes_cl::rng::seeded;

fn main() -> bayes_cl::Result<()> {
    let arch = Architecture::new(4, vec![8], 3);
    let mut rng = seeded(3);
    let q = bnn::init_posterior(&arch, InitMode::FromMle(&WeightSet::glorot(&arch, &mut rng)), 0.05)?;
    let path = std::env::temp_dir().join("bayes_cl_snapshot_example.bcls");
    PosteriorSnapshot::new(2, q.clone()).save(&path)?;
    let back = PosteriorSnapshot::load(&path)?;
    println!("task {} restored, identical: {}", back.task(), back.posterior() == &q);

    let x = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, 1.0, 0.0, -1.0, 0.5])?;
    let p = bnn::predict(back.posterior(), &x, 20, None, &mut seeded(1))?;
    println!("predictive probabilities {:.3?}", p.data());
    std::fs::remove_file(&path).ok();
    Ok(())
}

//! Greedy k-center selection and coreset withholding on synthetic tasks.

use bayes_cl::coreset::{self, Selector};
use bayes_cl::diffcore::Tensor;
use bayes_cl::tasks::{self, BlobSpec};

fn main() -> bayes_cl::Result<()> {
    let x = Tensor::matrix(6, 1, vec![0.0, 0.4, 1.0, 5.0, 5.2, 9.0])?;
    for k in 1..=4 {
        let picked = coreset::k_center_select(&x, k, 0)?;
        println!("k={k}: picks {picked:?}, covering radius {:.2}", coreset::covering_radius(&x, &picked));
    }

    let mut seq = tasks::synth_tasks(&BlobSpec::default(), 3, 1)?;
    let before: Vec<usize> = seq.tasks.iter().map(|t| t.train.len()).collect();
    coreset::withhold(&mut seq, 10, Selector::KCenter, 1)?;
    for (t, task) in seq.tasks.iter().enumerate() {
        let c = task.coreset.as_ref().expect("withheld");
        println!("task {}: {} -> {} training rows, coreset rows {:?}", t + 1, before[t], task.train.len(), c.indices);
    }
    Ok(())
}

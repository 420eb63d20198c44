//! Closed-form KL between mean-field posteriors against a Monte Carlo
//! estimate.

use bayes_cl::bnn::{self, Architecture, MeanFieldPosterior};
use bayes_cl::rng::seeded;

fn log_density(q: &MeanFieldPosterior, w: &bayes_cl::bnn::WeightSet) -> f64 {
    let mut total = 0.0;
    for (ql, wl) in q.layers().iter().zip(&w.layers) {
        for (p, x) in [(&ql.weight, &wl.w), (&ql.bias, &wl.b)] {
            let sigma = p.sigma();
            for ((m, s), v) in p.mu.data().iter().zip(sigma.data()).zip(x.data()) {
                let z = (v - m) / s;
                total += -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            }
        }
    }
    total
}

fn main() -> bayes_cl::Result<()> {
    println!("KL(N(1,1) || N(0,1))   = {:.9}", bnn::gaussian_kl(1.0, 1.0, 0.0, 1.0));
    println!("KL(N(0,2^2) || N(0,1)) = {:.9}", bnn::gaussian_kl(0.0, 2.0, 0.0, 1.0));

    let arch = Architecture::new(2, vec![2], 2);
    let p = MeanFieldPosterior::unit_prior(&arch)?;
    let mut q = p.clone();
    for (i, t) in q.params_mut().into_iter().enumerate() {
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.3 * j as f64 - 0.2 } else { -1.0 + 0.1 * j as f64 };
        }
    }
    let exact = bnn::kl_value(&q, &p)?;
    let mut rng = seeded(5);
    let n = 200_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let w = q.sample_weight_set(&mut rng);
        let d = log_density(&q, &w) - log_density(&p, &w);
        s += d;
        s2 += d * d;
    }
    let mean = s / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    println!("closed form {exact:.5}, monte carlo {mean:.5} +- {se:.5}");
    Ok(())
}

//! Trains a small GAN on noisy glyphs and inspects its samples.

use bayes_cl::diffcore::Tensor;
use bayes_cl::replay::{self, GeneratorConfig, GeneratorKind};
use bayes_cl::rng::seeded;
use rand::Rng;

fn glyphs(n: usize, rng: &mut impl Rng) -> Tensor {
    let mut data = Vec::with_capacity(n * 64);
    for _ in 0..n {
        for r in 0..8 {
            for c in 0..8 {
                let base = if r == 3 || r == 4 || c == 3 || c == 4 { 0.8 } else { 0.2 };
                data.push(base + rng.gen_range(-0.15..0.15));
            }
        }
    }
    Tensor::matrix(n, 64, data).expect("n x 64 values")
}

fn main() -> bayes_cl::Result<()> {
    let mut rng = seeded(21);
    let real = glyphs(256, &mut rng);
    let cfg = GeneratorConfig {
        kind: GeneratorKind::GanFc,
        latent_dim: 8,
        hidden: vec![32, 64],
        epochs: 200,
        batch_size: 32,
        ..GeneratorConfig::default()
    };
    let gan = replay::train_gan(&real, &cfg, &mut rng)?;
    let fake = gan.sample(256, &mut rng)?;
    let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
    let d_real = gan.discriminate(&real)?;
    let d_fake = gan.discriminate(&fake)?;
    let acc = (d_real.iter().filter(|&&p| p > 0.5).count() + d_fake.iter().filter(|&&p| p <= 0.5).count()) as f64 / 512.0;
    println!("pixel mean real {:.3}, generated {:.3}", mean(&real), mean(&fake));
    println!("discriminator accuracy {acc:.3}");
    for r in 0..8 {
        let row: String = fake.row(0)[r * 8..r * 8 + 8].iter().map(|&v| if v > 0.5 { '#' } else { '.' }).collect();
        println!("{row}");
    }
    Ok(())
}

//! Stein variational gradient descent on a standard 2D Gaussian using the
//! generic core with an explicit score function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xald::autodiff::Tensor;
use xald::error::Result;
use xald::sampler::{svgd_generic, GradientField, SamplerConfig};

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let init: Vec<Tensor> = (0..50)
        .map(|_| Tensor::from_fn(&[2], |_| rng.random_range(-3.0..3.0)))
        .collect();
    let config = SamplerConfig {
        epsilon: f64::INFINITY,
        tau: 0.05,
        iters: 500,
        n_particles: 50,
        ..SamplerConfig::default()
    };
    // ∇ log N(0, I) = -x
    let score = GradientField(|x: &Tensor| Ok(x.map(|v| -v)));
    let anchor = Tensor::zeros(&[2]);
    let out = svgd_generic(&score, init, &anchor, &config)?;

    let n = out.len() as f64;
    let mean = |d: usize| out.iter().map(|p| p.data()[d] as f64).sum::<f64>() / n;
    let (mx, my) = (mean(0), mean(1));
    let cov = |a: usize, b: usize, ma: f64, mb: f64| {
        out.iter().map(|p| (p.data()[a] as f64 - ma) * (p.data()[b] as f64 - mb)).sum::<f64>() / (n - 1.0)
    };
    println!("mean ({mx:.4}, {my:.4})");
    println!("cov [[{:.4}, {:.4}], [., {:.4}]]", cov(0, 0, mx, mx), cov(0, 1, mx, my), cov(1, 1, my, my));
    Ok(())
}

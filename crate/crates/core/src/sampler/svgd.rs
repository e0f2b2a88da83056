use rayon::prelude::*;

use super::kernel::median_sigma2;
use super::projection::project_ball;
use super::SamplerConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One particle evaluated under a [`SteinTarget`].
pub trait ParticleState: Send + Sync {
    /// Kernel embedding Φ(x).
    fn embedding(&self) -> &Tensor;
    /// ∇_x log P(x).
    fn log_density_grad(&self) -> &Tensor;
    /// `J_Φ(x)^T · cotangent`, shaped like the particle.
    fn embedding_vjp(&self, cotangent: &Tensor) -> Result<Tensor>;
}

/// A target density plus kernel embedding.
pub trait SteinTarget: Sync {
    type State: ParticleState;
    fn evaluate(&self, particle: &Tensor) -> Result<Self::State>;
}

/// Particle compared in its own coordinates (Φ = identity).
#[derive(Clone, Debug)]
pub struct IdentityState {
    pub point: Tensor,
    pub grad: Tensor,
}

impl ParticleState for IdentityState {
    fn embedding(&self) -> &Tensor {
        &self.point
    }

    fn log_density_grad(&self) -> &Tensor {
        &self.grad
    }

    fn embedding_vjp(&self, cotangent: &Tensor) -> Result<Tensor> {
        Ok(cotangent.clone())
    }
}

/// Target given directly by its score function `x -> ∇ log P(x)`, with a
/// pixel-space kernel.
pub struct GradientField<F>(pub F);

impl<F> SteinTarget for GradientField<F>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    type State = IdentityState;

    fn evaluate(&self, particle: &Tensor) -> Result<IdentityState> {
        Ok(IdentityState {
            point: particle.clone(),
            grad: (self.0)(particle)?,
        })
    }
}

/// Moves every particle once given their evaluated states.
///
/// `iteration` only labels errors.
pub fn svgd_step<S: ParticleState>(
    particles: &[Tensor],
    states: &[S],
    anchor: &Tensor,
    config: &SamplerConfig,
    iteration: usize,
) -> Result<Vec<Tensor>> {
    let n = particles.len();
    for s in states {
        if !s.log_density_grad().all_finite() {
            return Err(Error::NonFiniteGradient { iteration });
        }
    }
    let emb: Vec<&Tensor> = states.iter().map(|s| s.embedding()).collect();
    let sigma2 = median_sigma2(&emb)?;
    let mut k = vec![1.0f64; n * n];
    for j in 0..n {
        for i in j + 1..n {
            let v = (-emb[j].squared_distance(emb[i])? / (2.0 * sigma2)).exp();
            k[j * n + i] = v;
            k[i * n + j] = v;
        }
    }

    (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &particles[i];
            let mut phi = vec![0.0f64; x.len()];
            for j in 0..n {
                let kji = k[j * n + i];
                if kji == 0.0 {
                    continue;
                }
                for (p, g) in phi.iter_mut().zip(states[j].log_density_grad().data()) {
                    *p += kji * *g as f64;
                }
                if j == i {
                    continue;
                }
                // ∇_{x_j} k(Φ_j, Φ_i) = J_j^T [k (Φ_i - Φ_j) / σ²]
                let cot = Tensor::from_fn(emb[i].shape(), |c| {
                    let d = emb[i].data()[c] as f64 - emb[j].data()[c] as f64;
                    (kji * d / sigma2) as f32
                });
                let rep = states[j].embedding_vjp(&cot)?;
                rep.expect_same_shape(x, "svgd repulsion")?;
                for (p, r) in phi.iter_mut().zip(rep.data()) {
                    *p += *r as f64;
                }
            }
            let norm = phi.iter().map(|p| p * p).sum::<f64>().sqrt() / n as f64;
            if !norm.is_finite() {
                return Err(Error::NonFiniteGradient { iteration });
            }
            let moved = if norm > 0.0 {
                // r(φ) = φ / ||φ||; the 1/N factor cancels
                let scale = config.tau / (norm * n as f64);
                Tensor::from_fn(x.shape(), |c| (x.data()[c] as f64 + scale * phi[c]) as f32)
            } else {
                x.clone()
            };
            project_ball(&moved, anchor, config.epsilon, config.norm_p)
        })
        .collect()
}

/// Runs `config.iters` Stein variational updates with ℓ2-normalized
/// directions and ball projection around `anchor`.
pub fn svgd_generic<T: SteinTarget>(
    target: &T,
    mut particles: Vec<Tensor>,
    anchor: &Tensor,
    config: &SamplerConfig,
) -> Result<Vec<Tensor>> {
    config.validate()?;
    for p in &particles {
        p.expect_same_shape(anchor, "svgd particles")?;
    }
    for iteration in 0..config.iters {
        let states = particles
            .par_iter()
            .map(|p| target.evaluate(p))
            .collect::<Result<Vec<_>>>()?;
        particles = svgd_step(&particles, &states, anchor, config, iteration)?;
    }
    Ok(particles)
}

//! Adversarial particle generation inside an ε-ball around a natural image.
//!
//! [`svgd_generic`] is the Stein variational core: every iteration moves each
//! particle along the ℓ2-normalized direction
//!
//! ```text
//! φ(x_i) = 1/N Σ_j [ k(Φ(x_j), Φ(x_i)) ∇ log P(x_j) + ∇_{x_j} k(Φ(x_j), Φ(x_i)) ]
//! ```
//!
//! and projects back onto the ball. The model-driven samplers plug a
//! segmentation network into it: the log-density gradient is the gradient of
//! the Dice discrepancy against the anchor prediction, and Φ is either the
//! identity (pixel kernel) or the network encoder (feature kernel).

mod ald;
mod diversity;
mod kernel;
mod projection;
mod svgd;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use ald::{
    ald_sample, svgd_sample, svgdf_sample, vat_multi_restart, vat_perturb, AldState, AldTarget, Energy,
};
pub use diversity::{diversity_table, mean_diversity, DiversityRow, SamplerMethod};
pub use kernel::{median_bandwidth, median_sigma2, rbf_kernel};
pub use projection::project_ball;
pub use svgd::{svgd_generic, svgd_step, GradientField, IdentityState, ParticleState, SteinTarget};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    Linf,
}

impl std::str::FromStr for Norm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" => Ok(Norm::Linf),
            _ => Err(format!("unknown norm {s:?} (expected 2 or inf)")),
        }
    }
}

/// Space in which the RBF kernel compares particles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpace {
    Pixel,
    Feature,
}

impl std::str::FromStr for KernelSpace {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pixel" => Ok(KernelSpace::Pixel),
            "feature" => Ok(KernelSpace::Feature),
            _ => Err(format!("unknown kernel space {s:?} (expected pixel or feature)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Ball radius in intensity units; `f64::INFINITY` disables projection.
    pub epsilon: f64,
    pub norm_p: Norm,
    /// Step length applied to the normalized update direction.
    pub tau: f64,
    pub iters: usize,
    /// Amplitude of the uniform initial noise.
    pub eta: f64,
    pub n_particles: usize,
    pub kernel_space: KernelSpace,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let epsilon = 0.1;
        SamplerConfig {
            epsilon,
            norm_p: Norm::L2,
            tau: epsilon / 2.0,
            iters: 5,
            eta: epsilon / 10.0,
            n_particles: 2,
            kernel_space: KernelSpace::Feature,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.iters < 1 {
            return Err(Error::config("iters must be >= 1"));
        }
        if self.n_particles < 1 {
            return Err(Error::config("n_particles must be >= 1"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Particles approximating the adversarial distribution around `anchor`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    pub anchor: Tensor,
    pub particles: Vec<Tensor>,
    pub config: SamplerConfig,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Largest ball-norm displacement of any particle from the anchor.
    pub fn max_displacement(&self) -> f64 {
        self.particles
            .iter()
            .map(|p| displacement_norm(p, &self.anchor, self.config.norm_p))
            .fold(0.0, f64::max)
    }
}

pub(crate) fn displacement_norm(x: &Tensor, anchor: &Tensor, norm: Norm) -> f64 {
    let diffs = x.data().iter().zip(anchor.data()).map(|(a, b)| *a as f64 - *b as f64);
    match norm {
        Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        Norm::Linf => diffs.fold(0.0, |m, d| m.max(d.abs())),
    }
}

/// `project(anchor + eta * U(-1, 1))` for each of `n_particles` particles.
pub fn init_particles<R: Rng + ?Sized>(anchor: &Tensor, config: &SamplerConfig, rng: &mut R) -> Result<ParticleSet> {
    config.validate()?;
    let particles = (0..config.n_particles)
        .map(|_| {
            let noisy = Tensor::from_fn(anchor.shape(), |k| {
                let u: f64 = rng.random_range(-1.0..1.0);
                (anchor.data()[k] as f64 + config.eta * u) as f32
            });
            project_ball(&noisy, anchor, config.epsilon, config.norm_p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParticleSet {
        anchor: anchor.clone(),
        particles,
        config: *config,
    })
}

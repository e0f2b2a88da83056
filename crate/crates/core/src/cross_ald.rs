//! Mixed-particle regularization.
//!
//! A pair of unlabeled images `(x_i, x_j)` with particle sets around each is
//! reduced to one Monte Carlo draw `(γ, n, m)`. The adversarial mixture
//! `γ x_i'^(n) + (1-γ) x_j'^(m)` is pushed towards the (detached) prediction on
//! the natural mixture `γ x_i + (1-γ) x_j` under the soft Dice loss.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::dice_loss;
use crate::sampler::ParticleSet;
use crate::segnet::BoundModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    /// Concentration of the symmetric Beta(α, α) mixing weight.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig { alpha: 1.0, seed: 0 }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `γ ~ Beta(α, α)` as `G1 / (G1 + G2)` with `G1, G2 ~ Gamma(α, 1)`.
pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::config(format!("alpha must be > 0, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config(e.to_string()))?;
    let a: f64 = gamma.sample(rng);
    let b: f64 = gamma.sample(rng);
    if a + b == 0.0 {
        // both draws underflowed; the mass sits at the endpoints
        return Ok(if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    }
    Ok((a / (a + b)).clamp(0.0, 1.0))
}

/// `γ a + (1 - γ) b`; the endpoints return an operand unchanged.
pub fn mix(a: &Tensor, b: &Tensor, gamma: f64) -> Result<Tensor> {
    a.expect_same_shape(b, "mix")?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("mixing weight must lie in [0, 1], got {gamma}")));
    }
    if gamma == 1.0 {
        return Ok(a.clone());
    }
    if gamma == 0.0 {
        return Ok(b.clone());
    }
    a.zip_map(b, "mix", |x, y| (gamma * x as f64 + (1.0 - gamma) * y as f64) as f32)
}

/// One Monte Carlo draw of the mixed-particle objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixDraw {
    pub gamma: f64,
    /// Particle index into the first set.
    pub n: usize,
    /// Particle index into the second set.
    pub m: usize,
}

impl MixDraw {
    /// Draws `γ`, then `n`, then `m`.
    pub fn sample<R: Rng + ?Sized>(alpha: f64, n_i: usize, n_j: usize, rng: &mut R) -> Result<Self> {
        if n_i == 0 || n_j == 0 {
            return Err(Error::TooFewParticles(0));
        }
        let gamma = sample_beta(alpha, rng)?;
        Ok(MixDraw {
            gamma,
            n: rng.random_range(0..n_i),
            m: rng.random_range(0..n_j),
        })
    }

    /// The same draw seen from the swapped pair.
    pub fn swapped(self) -> Self {
        MixDraw {
            gamma: 1.0 - self.gamma,
            n: self.m,
            m: self.n,
        }
    }
}

/// Mixed adversarial input and mixed natural input of one draw.
pub fn cross_ald_inputs(
    x_i: &Tensor,
    x_j: &Tensor,
    pset_i: &ParticleSet,
    pset_j: &ParticleSet,
    draw: MixDraw,
) -> Result<(Tensor, Tensor)> {
    if !pset_i.anchor.bit_eq(x_i) || !pset_j.anchor.bit_eq(x_j) {
        return Err(Error::AnchorMismatch);
    }
    let pi = pset_i.particles.get(draw.n).ok_or(Error::TooFewParticles(pset_i.len()))?;
    let pj = pset_j.particles.get(draw.m).ok_or(Error::TooFewParticles(pset_j.len()))?;
    Ok((mix(pi, pj, draw.gamma)?, mix(x_i, x_j, draw.gamma)?))
}

/// `dice(f(x̃'), stopgrad f(x̃))` for a fixed draw, built into `g`.
pub fn cross_ald_loss_with<T: Real>(
    g: &mut Graph<T>,
    net: &BoundModel,
    x_i: &Tensor,
    x_j: &Tensor,
    pset_i: &ParticleSet,
    pset_j: &ParticleSet,
    draw: MixDraw,
) -> Result<Var> {
    let (adv, nat) = cross_ald_inputs(x_i, x_j, pset_i, pset_j, draw)?;
    mixed_consistency(g, net, &adv, &nat)
}

/// [`cross_ald_loss_with`] with a fresh draw from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn cross_ald_loss<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    net: &BoundModel,
    x_i: &Tensor,
    x_j: &Tensor,
    pset_i: &ParticleSet,
    pset_j: &ParticleSet,
    mix_cfg: &MixConfig,
    rng: &mut R,
) -> Result<(Var, MixDraw)> {
    mix_cfg.validate()?;
    let draw = MixDraw::sample(mix_cfg.alpha, pset_i.len(), pset_j.len(), rng)?;
    let loss = cross_ald_loss_with(g, net, x_i, x_j, pset_i, pset_j, draw)?;
    Ok((loss, draw))
}

/// Dice between the prediction on `input` and the detached prediction on
/// `reference`.
pub fn mixed_consistency<T: Real>(g: &mut Graph<T>, net: &BoundModel, input: &Tensor, reference: &Tensor) -> Result<Var> {
    let r = g.constant(reference.cast())?;
    let target = net.forward(g, r)?.probs;
    let target = g.detach(target);
    let x = g.constant(input.cast())?;
    let p = net.forward(g, x)?.probs;
    dice_loss(g, p, target, true)
}

/// Random mixup between natural inputs with a mixed pseudo-target.
///
/// The target is `γ f(x_i) + (1-γ) f(x_j)` from detached predictions, or the
/// mixed one-hot labels when both are given.
pub fn ranmixup_loss_with<T: Real>(
    g: &mut Graph<T>,
    net: &BoundModel,
    x_i: &Tensor,
    x_j: &Tensor,
    labels: Option<(&Tensor, &Tensor)>,
    gamma: f64,
) -> Result<Var> {
    let mixed = mix(x_i, x_j, gamma)?;
    let target = match labels {
        Some((y_i, y_j)) => mix(y_i, y_j, gamma)?,
        None => {
            let pi = predict(g, net, x_i)?;
            let pj = predict(g, net, x_j)?;
            mix(&pi, &pj, gamma)?
        }
    };
    let t = g.constant(target.cast())?;
    let x = g.constant(mixed.cast())?;
    let p = net.forward(g, x)?.probs;
    dice_loss(g, p, t, true)
}

/// [`ranmixup_loss_with`] with `γ` drawn from `rng`.
pub fn ranmixup_loss<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    net: &BoundModel,
    x_i: &Tensor,
    x_j: &Tensor,
    labels: Option<(&Tensor, &Tensor)>,
    mix_cfg: &MixConfig,
    rng: &mut R,
) -> Result<(Var, f64)> {
    mix_cfg.validate()?;
    let gamma = sample_beta(mix_cfg.alpha, rng)?;
    Ok((ranmixup_loss_with(g, net, x_i, x_j, labels, gamma)?, gamma))
}

fn predict<T: Real>(g: &mut Graph<T>, net: &BoundModel, x: &Tensor) -> Result<Tensor> {
    let x = g.constant(x.cast())?;
    let p = net.forward(g, x)?.probs;
    Ok(g.value(p).cast())
}

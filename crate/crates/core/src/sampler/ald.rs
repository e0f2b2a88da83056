use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::svgd::{svgd_generic, ParticleState, SteinTarget};
use super::{init_particles, KernelSpace, ParticleSet, SamplerConfig};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{dice_loss, kl_pixelwise};
use crate::segnet::SegModel;

/// Discrepancy between a perturbed prediction and the anchor prediction that
/// plays the role of `log P` (up to the normalizer).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Energy {
    Dice,
    Kl,
}

/// Adversarial local distribution of a fixed model around one image.
pub struct AldTarget<'a> {
    model: &'a SegModel,
    anchor_probs: Tensor,
    space: KernelSpace,
    energy: Energy,
}

/// Evaluated particle: energy gradient plus the graph needed for feature VJPs.
pub struct AldState {
    energy: f64,
    grad: Tensor,
    embedding: Tensor,
    features: Option<(Graph<f32>, Var, Var)>,
}

impl AldState {
    pub fn energy(&self) -> f64 {
        self.energy
    }
}

impl ParticleState for AldState {
    fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    fn log_density_grad(&self) -> &Tensor {
        &self.grad
    }

    fn embedding_vjp(&self, cotangent: &Tensor) -> Result<Tensor> {
        match &self.features {
            None => Ok(cotangent.clone()),
            Some((g, x, feat)) => {
                let mut grads = g.backward_with(*feat, cotangent)?;
                Ok(grads.take(*x).unwrap_or_else(|| Tensor::zeros(g.shape(*x))))
            }
        }
    }
}

impl<'a> AldTarget<'a> {
    pub fn new(model: &'a SegModel, anchor: &Tensor, space: KernelSpace, energy: Energy) -> Result<Self> {
        let anchor_probs = model.forward(anchor)?.probs;
        Ok(AldTarget {
            model,
            anchor_probs,
            space,
            energy,
        })
    }

    pub fn anchor_probs(&self) -> &Tensor {
        &self.anchor_probs
    }

    /// Energy of `particle` without gradients.
    pub fn energy_value(&self, particle: &Tensor) -> Result<f64> {
        let p = self.model.forward(particle)?.probs;
        match self.energy {
            Energy::Dice => crate::losses::dice_loss_value(&p, &self.anchor_probs),
            Energy::Kl => crate::losses::kl_pixelwise_value(&p, &self.anchor_probs),
        }
    }
}

impl SteinTarget for AldTarget<'_> {
    type State = AldState;

    fn evaluate(&self, particle: &Tensor) -> Result<AldState> {
        let mut g = Graph::<f32>::new();
        let net = self.model.bind(&mut g, false)?;
        let x = g.param(particle.clone())?;
        let out = net.forward(&mut g, x)?;
        let anchor = g.constant(self.anchor_probs.clone())?;
        let loss = match self.energy {
            Energy::Dice => dice_loss(&mut g, out.probs, anchor, true)?,
            Energy::Kl => kl_pixelwise(&mut g, out.probs, anchor)?,
        };
        let energy = g.value(loss).item() as f64;
        let grad = g
            .backward(loss)?
            .take(x)
            .unwrap_or_else(|| Tensor::zeros(particle.shape()));
        Ok(match self.space {
            KernelSpace::Pixel => AldState {
                energy,
                grad,
                embedding: particle.clone(),
                features: None,
            },
            KernelSpace::Feature => AldState {
                energy,
                grad,
                embedding: g.value(out.features).clone(),
                features: Some((g, x, out.features)),
            },
        })
    }
}

fn run(model: &SegModel, anchor: &Tensor, config: &SamplerConfig, space: KernelSpace, energy: Energy) -> Result<ParticleSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = init_particles(anchor, config, &mut rng)?;
    let target = AldTarget::new(model, anchor, space, energy)?;
    let particles = svgd_generic(&target, init.particles, anchor, config)?;
    Ok(ParticleSet {
        anchor: anchor.clone(),
        particles,
        config: SamplerConfig {
            kernel_space: space,
            ..*config
        },
    })
}

/// SVGD particles with the RBF kernel on raw pixels.
pub fn svgd_sample(model: &SegModel, anchor: &Tensor, config: &SamplerConfig) -> Result<ParticleSet> {
    run(model, anchor, config, KernelSpace::Pixel, Energy::Dice)
}

/// SVGD particles with the RBF kernel on encoder features.
pub fn svgdf_sample(model: &SegModel, anchor: &Tensor, config: &SamplerConfig) -> Result<ParticleSet> {
    run(model, anchor, config, KernelSpace::Feature, Energy::Dice)
}

/// Dispatches on `config.kernel_space`.
pub fn ald_sample(model: &SegModel, anchor: &Tensor, config: &SamplerConfig) -> Result<ParticleSet> {
    run(model, anchor, config, config.kernel_space, Energy::Dice)
}

/// One adversarial image: random start, then `iters` steps of normalized
/// projected ascent on the pixelwise KL to the anchor prediction.
pub fn vat_perturb(model: &SegModel, anchor: &Tensor, config: &SamplerConfig) -> Result<Tensor> {
    let single = SamplerConfig {
        n_particles: 1,
        ..*config
    };
    let mut set = run(model, anchor, &single, KernelSpace::Pixel, Energy::Kl)?;
    set.particles.pop().ok_or(Error::TooFewParticles(0))
}

/// `n_particles` independent [`vat_perturb`] runs with seeds drawn from
/// `config.seed`.
pub fn vat_multi_restart(model: &SegModel, anchor: &Tensor, config: &SamplerConfig) -> Result<ParticleSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let seeds: Vec<u64> = (0..config.n_particles).map(|_| rng.random()).collect();
    let particles = seeds
        .into_iter()
        .map(|s| vat_perturb(model, anchor, &config.with_seed(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParticleSet {
        anchor: anchor.clone(),
        particles,
        config: *config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::Arch;

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 16, 16], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn constant_model_leaves_initialization() {
        let model = SegModel::init(Arch::default(), 1).unwrap().with_zero_head();
        let x = image(2);
        let cfg = SamplerConfig {
            n_particles: 1,
            seed: 4,
            ..SamplerConfig::default()
        };
        let init = init_particles(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(vat_perturb(&model, &x, &cfg).unwrap().bit_eq(&init.particles[0]));
        assert!(svgdf_sample(&model, &x, &cfg).unwrap().particles[0].bit_eq(&init.particles[0]));
    }

    #[test]
    fn feature_embedding_vjp_matches_finite_difference() {
        let model = SegModel::init(Arch::default(), 3).unwrap();
        let x = image(5);
        let target = AldTarget::new(&model, &x, KernelSpace::Feature, Energy::Dice).unwrap();
        let state = target.evaluate(&x).unwrap();
        let cot = Tensor::from_fn(state.embedding().shape(), |k| ((k * 7919) % 13) as f32 / 13.0 - 0.5);
        let vjp = state.embedding_vjp(&cot).unwrap();
        let dot = |f: &Tensor| f.data().iter().zip(cot.data()).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
        for &k in &[0usize, 37, 130, 255] {
            let h = 1e-3f32;
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let fd = (dot(&model.features(&xp).unwrap()) - dot(&model.features(&xm).unwrap())) / (2.0 * h as f64);
            let an = vjp.data()[k] as f64;
            assert!((fd - an).abs() <= 2e-2 * an.abs().max(1e-2), "{k}: {fd} vs {an}");
        }
    }

    #[test]
    fn particles_stay_in_ball_and_are_seeded() {
        let model = SegModel::init(Arch::default(), 7).unwrap();
        let x = image(8);
        let cfg = SamplerConfig {
            n_particles: 3,
            seed: 11,
            ..SamplerConfig::default()
        };
        for f in [svgd_sample, svgdf_sample, vat_multi_restart] {
            let a = f(&model, &x, &cfg).unwrap();
            let b = f(&model, &x, &cfg).unwrap();
            assert_eq!(a, b);
            assert!(a.max_displacement() <= cfg.epsilon + 1e-5);
            assert_eq!(a.len(), 3);
        }
    }
}

//! Semi-supervised training: supervised Dice on the labeled batch plus a
//! warm-up-weighted consistency regularizer on the unlabeled batch, optimized
//! with SGD and momentum.
//!
//! All randomness of a step (batch indices, pairings, sampler seeds, mixing
//! draws) is drawn sequentially from the state's generator before any
//! parallel work starts, and per-image gradients are summed in a fixed order,
//! so the trajectory does not depend on the number of worker threads.

mod experiments;
mod run;

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::cross_ald::{cross_ald_loss_with, mixed_consistency, ranmixup_loss_with, sample_beta, MixConfig, MixDraw};
use crate::data::Sample;
use crate::error::{Error, LossComponent, Result};
use crate::losses::{dice_loss, kl_pixelwise, one_hot};
use crate::metrics::{seg_metrics, MetricReport};
use crate::sampler::{svgd_sample, svgdf_sample, vat_multi_restart, vat_perturb, ParticleSet, SamplerConfig};
use crate::segnet::{Arch, SegModel};

pub use experiments::{particle_count_sweep, run_ladder, LadderRow, SweepRow};
pub use run::{run_training, train_on, write_curves, CHECKPOINT_FILE, CURVES_FILE, REPORT_FILE, HistoryEntry, TrainReport, TrainingOutput};

/// Separates the training-state generator from the initialization stream
/// that shares the same user seed.
pub const STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Unlabeled-data term of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    /// KL between the prediction on a single adversarial image and the
    /// anchor prediction.
    Vat,
    /// Mixed-particle Dice on single VAT particles.
    VatMixup,
    /// Mixup of natural images against mixed predictions.
    Ranmixup,
    /// Dice consistency on one pixel-kernel SVGD particle per image.
    SvgdConsistency,
    /// Dice consistency on one feature-kernel SVGD particle per image.
    SvgdfConsistency,
    /// Mixed-particle Dice on feature-kernel SVGD particles.
    CrossAld,
}

impl Regularizer {
    pub const ALL: [Regularizer; 7] = [
        Regularizer::None,
        Regularizer::Vat,
        Regularizer::VatMixup,
        Regularizer::Ranmixup,
        Regularizer::SvgdConsistency,
        Regularizer::SvgdfConsistency,
        Regularizer::CrossAld,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Vat => "vat",
            Regularizer::VatMixup => "vat_mixup",
            Regularizer::Ranmixup => "ranmixup",
            Regularizer::SvgdConsistency => "svgd_consistency",
            Regularizer::SvgdfConsistency => "svgdf_consistency",
            Regularizer::CrossAld => "cross_ald",
        }
    }

    /// Whether the term consumes unlabeled images two at a time.
    pub fn is_paired(self) -> bool {
        matches!(self, Regularizer::VatMixup | Regularizer::Ranmixup | Regularizer::CrossAld)
    }
}

impl std::fmt::Display for Regularizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Regularizer {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Regularizer::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Regularizer::ALL.iter().map(|r| r.name()).collect();
            format!("unknown regularizer {s:?}; valid options: {}", names.join(", "))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda_cross_max: f64,
    /// Weight of the contrastive term; the term itself is identically zero.
    pub lambda_cs: f64,
    /// Warm-up length; `None` means `0.4 · total_iters`.
    pub rampup_iters: Option<usize>,
    pub sampler: SamplerConfig,
    pub mix: MixConfig,
    pub regularizer: Regularizer,
    pub seed: u64,
    /// Re-split the training set with this fraction instead of using the
    /// manifest's labeled indices.
    pub labeled_fraction: Option<f64>,
    /// Evaluate every this many iterations (0: only at the end).
    pub eval_every: usize,
    pub arch: Arch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 2000,
            batch_labeled: 2,
            batch_unlabeled: 4,
            lr: 0.01,
            momentum: 0.9,
            lambda_cross_max: 0.1,
            lambda_cs: 0.0,
            rampup_iters: None,
            sampler: SamplerConfig::default(),
            mix: MixConfig::default(),
            regularizer: Regularizer::CrossAld,
            seed: 0,
            labeled_fraction: None,
            eval_every: 0,
            arch: Arch::default(),
        }
    }
}

impl TrainConfig {
    pub fn rampup(&self) -> usize {
        self.rampup_iters
            .unwrap_or_else(|| ((0.4 * self.total_iters as f64).round() as usize).max(1))
    }

    /// Copy with the warm-up length filled in.
    pub fn resolved(&self) -> Self {
        TrainConfig {
            rampup_iters: Some(self.rampup()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters < 1 {
            return Err(Error::config("total_iters must be >= 1"));
        }
        let t = self.rampup();
        if t < 1 || t > self.total_iters {
            return Err(Error::config(format!(
                "rampup_iters must lie in [1, {}], got {t}",
                self.total_iters
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        for (name, v) in [("lambda_cross_max", self.lambda_cross_max), ("lambda_cs", self.lambda_cs)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.batch_labeled < 1 {
            return Err(Error::config("batch_labeled must be >= 1"));
        }
        if self.regularizer != Regularizer::None && self.batch_unlabeled < 1 {
            return Err(Error::config("batch_unlabeled must be >= 1"));
        }
        if self.regularizer.is_paired() && !self.batch_unlabeled.is_multiple_of(2) {
            return Err(Error::config(format!(
                "{} pairs unlabeled images; batch_unlabeled must be even, got {}",
                self.regularizer, self.batch_unlabeled
            )));
        }
        if let Some(f) = self.labeled_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!("labeled_fraction must lie in (0, 1], got {f}")));
            }
        }
        self.sampler.validate()?;
        self.mix.validate()?;
        self.arch.validate()
    }
}

/// `λ_max · exp(-5 (1 - min(t, T)/T)^2)`.
pub fn warmup_weight(iter: usize, rampup: usize, lambda_max: f64) -> f64 {
    let t = rampup.max(1) as f64;
    let p = 1.0 - (iter as f64).min(t) / t;
    lambda_max * (-5.0 * p * p).exp()
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: SegModel,
    /// Momentum buffers keyed like the model parameters.
    pub velocity: BTreeMap<String, Tensor>,
    pub iter: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<HistoryEntry>,
}

impl TrainState {
    pub fn new(model: SegModel, seed: u64) -> Self {
        let velocity = model
            .params()
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        TrainState {
            model,
            velocity,
            iter: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            history: Vec::new(),
        }
    }
}

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub sup_loss: f64,
    pub reg_loss: f64,
    pub lambda: f64,
}

type Grads = BTreeMap<String, Vec<f64>>;

/// Value and parameter gradient of one per-image loss.
fn loss_and_grads<F>(model: &SegModel, component: LossComponent, iter: usize, build: F) -> Result<(f64, Grads)>
where
    F: FnOnce(&mut Graph<f32>, &crate::segnet::BoundModel) -> Result<crate::autodiff::Var>,
{
    let numeric = |e: Error| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { component, iteration: iter },
        other => other,
    };
    let mut g = Graph::<f32>::new();
    let net = model.bind(&mut g, true)?;
    let loss = build(&mut g, &net).map_err(numeric)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { component, iteration: iter });
    }
    let grads = g.backward(loss).map_err(numeric)?;
    let mut out = BTreeMap::new();
    for (name, v) in net.vars() {
        let gv = grads.get(v).expect("bound parameters require grad");
        out.insert(name.to_string(), gv.data().iter().map(|&x| x as f64).collect());
    }
    Ok((value, out))
}

/// Ordered mean of per-unit results.
fn mean_grads(parts: Vec<(f64, Grads)>) -> (f64, Grads) {
    let n = parts.len() as f64;
    let mut total = 0.0;
    let mut acc: Grads = BTreeMap::new();
    for (v, g) in parts {
        total += v;
        for (k, gv) in g {
            match acc.get_mut(&k) {
                Some(a) => a.iter_mut().zip(&gv).for_each(|(x, y)| *x += y),
                None => {
                    acc.insert(k, gv);
                }
            }
        }
    }
    acc.values_mut().for_each(|a| a.iter_mut().for_each(|x| *x /= n));
    (total / n, acc)
}

/// Per-unit randomness of the regularizer, drawn before parallel work.
enum Unit {
    Single { image: usize, seed: u64, pick: usize },
    Pair { i: usize, j: usize, seed_i: u64, seed_j: u64, draw: MixDraw },
}

fn draw_units<R: Rng>(cfg: &TrainConfig, n_images: usize, rng: &mut R) -> Result<Vec<Unit>> {
    let reg = cfg.regularizer;
    let n = cfg.sampler.n_particles;
    if reg.is_paired() {
        // consecutive images of the already random batch form the pairs
        let order: Vec<usize> = (0..n_images).collect();
        order
            .chunks_exact(2)
            .map(|p| {
                let seed_i = rng.random();
                let seed_j = rng.random();
                let draw = match reg {
                    Regularizer::CrossAld => MixDraw::sample(cfg.mix.alpha, n, n, rng)?,
                    Regularizer::VatMixup => MixDraw::sample(cfg.mix.alpha, 1, 1, rng)?,
                    _ => MixDraw {
                        gamma: sample_beta(cfg.mix.alpha, rng)?,
                        n: 0,
                        m: 0,
                    },
                };
                Ok(Unit::Pair {
                    i: p[0],
                    j: p[1],
                    seed_i,
                    seed_j,
                    draw,
                })
            })
            .collect()
    } else {
        Ok((0..n_images)
            .map(|image| Unit::Single {
                image,
                seed: rng.random(),
                pick: rng.random_range(0..n),
            })
            .collect())
    }
}

fn sampler_for(cfg: &TrainConfig, seed: u64) -> SamplerConfig {
    cfg.sampler.with_seed(seed ^ cfg.sampler.seed)
}

fn unit_loss(cfg: &TrainConfig, model: &SegModel, images: &[&Tensor], unit: &Unit, iter: usize) -> Result<(f64, Grads)> {
    let reg = LossComponent::Regularizer;
    let sample_err = |e: Error| match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => Error::NonFiniteLoss {
            component: reg,
            iteration: iter,
        },
        other => other,
    };
    match *unit {
        Unit::Single { image, seed, pick } => {
            let x = images[image];
            let scfg = sampler_for(cfg, seed);
            let adv = match cfg.regularizer {
                Regularizer::Vat => vat_perturb(model, x, &scfg).map_err(sample_err)?,
                Regularizer::SvgdConsistency => svgd_sample(model, x, &scfg).map_err(sample_err)?.particles.swap_remove(pick),
                Regularizer::SvgdfConsistency => svgdf_sample(model, x, &scfg).map_err(sample_err)?.particles.swap_remove(pick),
                other => unreachable!("{other} is paired"),
            };
            let kl = cfg.regularizer == Regularizer::Vat;
            loss_and_grads(model, reg, iter, |g, net| {
                if kl {
                    let r = g.constant(x.clone())?;
                    let target = net.forward(g, r)?.probs;
                    let target = g.detach(target);
                    let a = g.constant(adv)?;
                    let p = net.forward(g, a)?.probs;
                    kl_pixelwise(g, p, target)
                } else {
                    mixed_consistency(g, net, &adv, x)
                }
            })
        }
        Unit::Pair {
            i,
            j,
            seed_i,
            seed_j,
            draw,
        } => {
            let (xi, xj) = (images[i], images[j]);
            if cfg.regularizer == Regularizer::Ranmixup {
                return loss_and_grads(model, reg, iter, |g, net| ranmixup_loss_with(g, net, xi, xj, None, draw.gamma));
            }
            let sample = |x: &Tensor, seed: u64| -> Result<ParticleSet> {
                let scfg = sampler_for(cfg, seed);
                match cfg.regularizer {
                    Regularizer::VatMixup => vat_multi_restart(model, x, &SamplerConfig { n_particles: 1, ..scfg }),
                    _ => svgdf_sample(model, x, &scfg),
                }
                .map_err(sample_err)
            };
            let (pi, pj) = (sample(xi, seed_i)?, sample(xj, seed_j)?);
            loss_and_grads(model, reg, iter, |g, net| cross_ald_loss_with(g, net, xi, xj, &pi, &pj, draw))
        }
    }
}

/// Draws `k` of `n` indices, without replacement when possible.
fn draw_batch<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if k <= n {
        sample_indices(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Picks batches from the labeled and unlabeled pools, then runs
/// [`train_step`].
pub fn train_iteration(
    state: &mut TrainState,
    cfg: &TrainConfig,
    labeled: &[&Sample],
    unlabeled: &[&Tensor],
) -> Result<StepLosses> {
    if labeled.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let li = draw_batch(&mut state.rng, labeled.len(), cfg.batch_labeled);
    let lb: Vec<&Sample> = li.iter().map(|&k| labeled[k]).collect();
    // drawn even when unused so every regularizer sees the same labeled batches
    let ui = if unlabeled.is_empty() {
        Vec::new()
    } else {
        draw_batch(&mut state.rng, unlabeled.len(), cfg.batch_unlabeled)
    };
    let ub: Vec<&Tensor> = if cfg.regularizer == Regularizer::None {
        Vec::new()
    } else {
        ui.iter().map(|&k| unlabeled[k]).collect()
    };
    train_step(state, cfg, &lb, &ub)
}

/// One optimizer update on the given batches.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, labeled: &[&Sample], unlabeled: &[&Tensor]) -> Result<StepLosses> {
    let iter = state.iter;
    let lambda = warmup_weight(iter, cfg.rampup(), cfg.lambda_cross_max);
    let c = state.model.arch().num_classes;
    let model = &state.model;

    let units = if cfg.regularizer != Regularizer::None && lambda > 0.0 && !unlabeled.is_empty() {
        draw_units(cfg, unlabeled.len(), &mut state.rng)?
    } else {
        Vec::new()
    };

    let sup_parts = labeled
        .par_iter()
        .map(|s| {
            let (h, w) = (s.height(), s.width());
            let y = one_hot(&s.mask, c, h, w)?;
            loss_and_grads(model, LossComponent::Supervised, iter, |g, net| {
                let x = g.constant(s.image.clone())?;
                let p = net.forward(g, x)?.probs;
                let t = g.constant(y)?;
                dice_loss(g, p, t, true)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (sup_loss, mut grads) = mean_grads(sup_parts);

    let mut reg_loss = 0.0;
    if !units.is_empty() {
        let parts = units
            .par_iter()
            .map(|u| unit_loss(cfg, model, unlabeled, u, iter))
            .collect::<Result<Vec<_>>>()?;
        let (r, rg) = mean_grads(parts);
        reg_loss = r;
        for (k, gv) in rg {
            let acc = grads.get_mut(&k).expect("same parameter set");
            acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += lambda * b);
        }
    }
    // the contrastive term is a zero-valued hook, so lambda_cs adds nothing

    for (name, g) in &grads {
        if g.iter().any(|v| !v.is_finite()) {
            let component = if sup_loss.is_finite() {
                LossComponent::Regularizer
            } else {
                LossComponent::Supervised
            };
            return Err(Error::NonFiniteLoss { component, iteration: iter });
        }
        let v = state.velocity.get_mut(name).expect("velocity mirrors params");
        let p = state.model.param_mut(name).expect("gradient keys are params");
        for ((vk, pk), gk) in v.data_mut().iter_mut().zip(p.data_mut()).zip(g) {
            let nv = cfg.momentum * *vk as f64 + gk;
            *vk = nv as f32;
            *pk = (*pk as f64 - cfg.lr * nv) as f32;
        }
    }
    state.iter += 1;
    let losses = StepLosses {
        sup_loss,
        reg_loss,
        lambda,
    };
    state.history.push(HistoryEntry {
        iter: state.iter,
        sup_loss,
        reg_loss,
        lambda,
        metrics: None,
    });
    Ok(losses)
}

/// Argmax predictions scored against the masks, averaged over samples.
pub fn evaluate(model: &SegModel, samples: &[Sample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = model.arch().num_classes;
    let reports = samples
        .par_iter()
        .map(|s| {
            let pred = model.forward(&s.image)?.argmax();
            seg_metrics(&pred, &s.mask, s.height(), s.width(), c)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::mean(&reports)
}

//! One Monte Carlo draw of the Cross-ALD loss for a pair of images, with its
//! gradient norm w.r.t. the network parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xald::autodiff::Graph;
use xald::cross_ald::{cross_ald_loss, ranmixup_loss, MixConfig};
use xald::data::generate_dataset;
use xald::error::Result;
use xald::sampler::{svgdf_sample, SamplerConfig};
use xald::segnet::{Arch, SegModel};

fn main() -> Result<()> {
    let ds = generate_dataset(32, 32, 4, 1, 11)?;
    let (x_i, x_j) = (&ds.train[0].image, &ds.train[1].image);
    let model = SegModel::init(Arch::default(), 5)?;
    let cfg = SamplerConfig::default();
    let p_i = svgdf_sample(&model, x_i, &cfg)?;
    let p_j = svgdf_sample(&model, x_j, &cfg.with_seed(1))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::<f32>::new();
    let net = model.bind(&mut g, true)?;
    let (loss, draw) = cross_ald_loss(&mut g, &net, x_i, x_j, &p_i, &p_j, &MixConfig::default(), &mut rng)?;
    let grads = g.backward(loss)?;
    let norm: f64 = net.vars().filter_map(|(_, v)| grads.get(v)).map(|t| t.squared_norm()).sum::<f64>().sqrt();
    println!("cross-ald loss {:.5} at {draw:?}, |grad| {norm:.4e}", g.value(loss).item());

    let mut g = Graph::<f32>::new();
    let net = model.bind(&mut g, false)?;
    let (loss, gamma) = ranmixup_loss(&mut g, &net, x_i, x_j, None, &MixConfig::default(), &mut rng)?;
    println!("ranmixup loss {:.5} at gamma {gamma:.3}", g.value(loss).item());
    Ok(())
}

mod common;

use rand::Rng;
use xald::autodiff::{analytic_gradient, central_difference, Graph, Tensor, Var};
use xald::segnet::{Arch, SegModel};

#[test]
fn first_layer_respects_the_fan_in_bound() {
    let model = SegModel::init(Arch::default(), 21).unwrap();
    let w = model.param("enc1.weight").unwrap();
    let bound = (6.0f32 / 9.0).sqrt();
    let max = w.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    assert!(max <= bound && max > 0.9 * bound, "{max} vs {bound}");
    assert!(model.param("enc1.bias").unwrap().data().iter().all(|&b| b == 0.0));
}

#[test]
fn class_zero_mass_gradient_matches_finite_differences() {
    let model = SegModel::init(Arch::default(), 22).unwrap();
    let mut r = common::rng(22);
    let x = Tensor::<f64>::from_fn(&[1, 16, 16], |_| r.random_range(0.0..1.0));
    let f = |g: &mut Graph<f64>, img: Var| {
        let net = model.bind(g, false)?;
        let probs = net.forward(g, img)?.probs;
        let flat = g.reshape(probs, &[3, 256])?;
        let per_class = g.sum_axis(flat, 1)?;
        let w = g.constant(Tensor::new(vec![3], vec![1.0, 0.0, 0.0])?)?;
        let picked = g.mul(per_class, w)?;
        g.sum(picked)
    };
    let an = analytic_gradient(&f, &x).unwrap();
    for _ in 0..20 {
        let k = r.random_range(0..256);
        let num = central_difference(&f, &x, k, 1e-6).unwrap();
        let err = (an.data()[k] - num).abs() / (num.abs().max(1e-6));
        assert!(err < 1e-3, "pixel {k}: {} vs {num}", an.data()[k]);
    }
}

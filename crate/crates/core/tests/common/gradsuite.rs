//! Finite-difference probes of every differentiable primitive and of the
//! composed network and loss pipelines.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use xald::autodiff::{analytic_gradient, central_difference, Graph, Tensor, Var};
use xald::error::Result;
use xald::losses::{dice_loss, kl_pixelwise};
use xald::segnet::{Arch, SegModel};

pub const PROBES: usize = 100;
pub const TOLERANCE: f64 = 1e-3;
/// Input perturbation in the double-precision engine.
pub const STEP: f64 = 1e-6;
const INSTANCES: usize = 10;

type ScalarFn = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

pub struct ProbeResult {
    pub name: &'static str,
    pub probes: usize,
    pub worst: f64,
}

impl ProbeResult {
    pub fn passed(&self) -> bool {
        self.probes == PROBES && self.worst < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values at least 0.05 away from zero, so piecewise primitives are probed
/// off their kinks.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Contracts `y` against fixed random weights so every output coordinate
/// contributes to the probed scalar.
fn contract(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(r.clone())?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

type InputGen = Box<dyn Fn(&mut ChaCha8Rng) -> Tensor<f64>>;

struct Case {
    name: &'static str,
    input: InputGen,
    build: Box<dyn Fn(&mut ChaCha8Rng) -> ScalarFn>,
}

fn unary(
    name: &'static str,
    input: impl Fn(&mut ChaCha8Rng) -> Tensor<f64> + 'static,
    out_shape: &'static [usize],
    op: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + Clone + 'static,
) -> Case {
    Case {
        name,
        input: Box::new(input),
        build: Box::new(move |rng| {
            let r = uniform(rng, out_shape, -1.0, 1.0);
            let op = op.clone();
            Box::new(move |g, x| {
                let y = op(g, x)?;
                contract(g, y, &r)
            })
        }),
    }
}

fn binary(
    name: &'static str,
    lhs_is_x: bool,
    other: impl Fn(&mut ChaCha8Rng) -> Tensor<f64> + Clone + 'static,
    op: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var> + Clone + 'static,
) -> Case {
    const S: &[usize] = &[2, 3, 4];
    let input_other = other.clone();
    Case {
        name,
        input: Box::new(move |rng| {
            if lhs_is_x {
                uniform(rng, S, -1.0, 1.0)
            } else {
                input_other(rng)
            }
        }),
        build: Box::new(move |rng| {
            let r = uniform(rng, S, -1.0, 1.0);
            let c = if lhs_is_x { other(rng) } else { uniform(rng, S, -1.0, 1.0) };
            let op = op.clone();
            Box::new(move |g, x| {
                let c = g.constant(c.clone())?;
                let y = if lhs_is_x { op(g, x, c)? } else { op(g, c, x)? };
                contract(g, y, &r)
            })
        }),
    }
}

fn positive(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(rng, &[2, 3, 4], 0.5, 2.0)
}

fn signed(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(rng, &[2, 3, 4], -1.0, 1.0)
}

fn simplex(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let raw = uniform(rng, &[c, h, w], 0.05, 1.0);
    let hw = h * w;
    Tensor::from_fn(&[c, h, w], |k| {
        let pos = k % hw;
        let total: f64 = (0..c).map(|cc| raw.data()[cc * hw + pos]).sum();
        raw.data()[k] / total
    })
}

fn primitive_cases() -> Vec<Case> {
    const S: &[usize] = &[2, 3, 4];
    vec![
        binary("add", true, signed, |g, a, b| g.add(a, b)),
        binary("sub", false, signed, |g, a, b| g.sub(a, b)),
        binary("mul", true, signed, |g, a, b| g.mul(a, b)),
        binary("div (numerator)", true, positive, |g, a, b| g.div(a, b)),
        binary("div (denominator)", false, positive, |g, a, b| g.div(a, b)),
        unary("mul (shared operand)", signed, S, |g, x| g.mul(x, x)),
        unary("scale", signed, S, |g, x| g.scale(x, -1.7)),
        unary("add_scalar", signed, S, |g, x| g.add_scalar(x, 0.3)),
        unary("exp", signed, S, |g, x| g.exp(x)),
        unary("log", positive, S, |g, x| g.log(x)),
        unary("pow", positive, S, |g, x| g.pow(x, 1.7)),
        unary("leaky_relu", |r| off_kink(r, &[2, 3, 4]), S, |g, x| g.leaky_relu(x, 0.01)),
        unary("clamp_min", |r| off_kink(r, &[2, 3, 4]), S, |g, x| g.clamp_min(x, 0.0)),
        unary("sum", signed, &[1], |g, x| g.sum(x)),
        unary("mean", signed, &[1], |g, x| g.mean(x)),
        unary("sum_axis", signed, &[2, 4], |g, x| g.sum_axis(x, 1)),
        unary("reshape", signed, &[6, 4], |g, x| g.reshape(x, &[6, 4])),
        unary("softmax", |r| uniform(r, &[3, 4, 4], -2.0, 2.0), &[3, 4, 4], |g, x| g.softmax(x)),
        unary("avg_pool2", |r| uniform(r, &[2, 4, 6], -1.0, 1.0), &[2, 2, 3], |g, x| g.avg_pool2(x)),
        unary("upsample2", |r| uniform(r, &[2, 3, 2], -1.0, 1.0), &[2, 6, 4], |g, x| g.upsample2(x)),
        Case {
            name: "concat",
            input: Box::new(signed),
            build: Box::new(|rng| {
                let other = uniform(rng, &[1, 3, 4], -1.0, 1.0);
                let r = uniform(rng, &[5, 3, 4], -1.0, 1.0);
                Box::new(move |g, x| {
                    let o = g.constant(other.clone())?;
                    let y = g.concat(&[x, o, x])?;
                    contract(g, y, &r)
                })
            }),
        },
        conv_case("conv2d (input)", 0),
        conv_case("conv2d (weight)", 1),
        conv_case("conv2d (bias)", 2),
    ]
}

/// `which` selects the probed operand: 0 input, 1 weight, 2 bias.
fn conv_case(name: &'static str, which: usize) -> Case {
    let shapes: [&'static [usize]; 3] = [&[2, 5, 6], &[3, 2, 3, 3], &[3]];
    Case {
        name,
        input: Box::new(move |rng| uniform(rng, shapes[which], -1.0, 1.0)),
        build: Box::new(move |rng| {
            let fixed: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform(rng, s, -1.0, 1.0)).collect();
            let r = uniform(rng, &[3, 5, 6], -1.0, 1.0);
            Box::new(move |g, x| {
                let mut v = Vec::with_capacity(3);
                for (k, t) in fixed.iter().enumerate() {
                    v.push(if k == which { x } else { g.constant(t.clone())? });
                }
                let y = g.conv2d(v[0], v[1], Some(v[2]))?;
                contract(g, y, &r)
            })
        }),
    }
}

fn pipeline_cases() -> Vec<Case> {
    vec![
        Case {
            name: "dice_loss (free argument)",
            input: Box::new(|r| simplex(r, 3, 4, 4)),
            build: Box::new(|rng| {
                let q = simplex(rng, 3, 4, 4);
                Box::new(move |g, p| {
                    let q = g.constant(q.clone())?;
                    dice_loss(g, p, q, false)
                })
            }),
        },
        Case {
            name: "softmax -> dice_loss",
            input: Box::new(|r| uniform(r, &[3, 4, 4], -2.0, 2.0)),
            build: Box::new(|rng| {
                let q = simplex(rng, 3, 4, 4);
                Box::new(move |g, x| {
                    let p = g.softmax(x)?;
                    let q = g.constant(q.clone())?;
                    dice_loss(g, p, q, true)
                })
            }),
        },
        Case {
            name: "softmax -> kl_pixelwise",
            input: Box::new(|r| uniform(r, &[3, 4, 4], -2.0, 2.0)),
            build: Box::new(|rng| {
                let q = simplex(rng, 3, 4, 4);
                Box::new(move |g, x| {
                    let p = g.softmax(x)?;
                    let q = g.constant(q.clone())?;
                    kl_pixelwise(g, p, q)
                })
            }),
        },
        Case {
            name: "segnet forward -> dice_loss (image)",
            input: Box::new(|r| uniform(r, &[1, 16, 16], 0.0, 1.0)),
            build: Box::new(|rng| {
                let model = SegModel::init(Arch::default(), rng.random()).unwrap();
                let q = simplex(rng, 3, 16, 16);
                Box::new(move |g, x| {
                    let net = model.bind(g, false)?;
                    let out = net.forward(g, x)?;
                    let q = g.constant(q.clone())?;
                    dice_loss(g, out.probs, q, true)
                })
            }),
        },
    ]
}

fn run_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<ProbeResult> {
    let mut worst = 0.0f64;
    let mut probes = 0;
    for _ in 0..INSTANCES {
        let x = (case.input)(rng);
        let f = (case.build)(rng);
        let analytic = analytic_gradient(&f, &x)?;
        for _ in 0..PROBES / INSTANCES {
            let k = rng.random_range(0..x.len());
            let numeric = central_difference(&f, &x, k, STEP)?;
            worst = worst.max(rel_err(analytic.data()[k], numeric));
            probes += 1;
        }
    }
    Ok(ProbeResult {
        name: case.name,
        probes,
        worst,
    })
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + xald::autodiff::REL_FLOOR)
}

/// Gradient of a Dice loss w.r.t. one network weight tensor at a time, the
/// tensor entering the double-precision graph as the probed input.
fn weight_probes(rng: &mut ChaCha8Rng) -> Result<ProbeResult> {
    let mut worst = 0.0f64;
    let mut probes = 0;
    for _ in 0..INSTANCES {
        let model = SegModel::init(Arch::default(), rng.random())?;
        // nonzero biases so every bias gradient is exercised
        let mut model = model;
        for (name, _) in Arch::default().param_shapes() {
            if name.ends_with(".bias") {
                let t = model.param_mut(name).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            }
        }
        let names: Vec<String> = model.params().keys().cloned().collect();
        let x = uniform(rng, &[1, 16, 16], 0.0, 1.0);
        let q = simplex(rng, 3, 16, 16);
        for _ in 0..PROBES / INSTANCES {
            let name = names[rng.random_range(0..names.len())].clone();
            let w: Tensor<f64> = model.param(&name).unwrap().cast();
            let (m, x, q) = (&model, &x, &q);
            let f = move |g: &mut Graph<f64>, wv: Var| {
                let net = m.bind(g, false)?.with_var(&name, wv)?;
                let xv = g.constant(x.clone())?;
                let out = net.forward(g, xv)?;
                let qv = g.constant(q.clone())?;
                dice_loss(g, out.probs, qv, true)
            };
            let k = rng.random_range(0..w.len());
            let analytic = analytic_gradient(&f, &w)?.data()[k];
            let numeric = central_difference(&f, &w, k, STEP)?;
            worst = worst.max(rel_err(analytic, numeric));
            probes += 1;
        }
    }
    Ok(ProbeResult {
        name: "segnet forward -> dice_loss (weights)",
        probes,
        worst,
    })
}

/// Every primitive and pipeline, each with [`PROBES`] probes.
pub fn run_all(seed: u64) -> Result<Vec<ProbeResult>> {
    let mut rng = super::rng(seed);
    let mut out = Vec::new();
    for case in primitive_cases().iter().chain(&pipeline_cases()) {
        out.push(run_case(case, &mut rng)?);
    }
    out.push(weight_probes(&mut rng)?);
    Ok(out)
}

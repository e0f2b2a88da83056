use std::collections::BTreeMap;

use super::kernels::{self, widen, ConvDims};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LeakyRelu(Var, f64),
    ClampMin(Var, f64),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    Reshape(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Pow(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LeakyRelu(a, _)
            | Op::ClampMin(a, _)
            | Op::AvgPool2(a)
            | Op::Upsample2(a)
            | Op::Softmax(a)
            | Op::Reshape(a) => vec![*a],
            Op::SumAxis { input, .. } => vec![*input],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut p = vec![*input, *weight];
                p.extend(bias.iter().copied());
                p
            }
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a backward pass, keyed by leaf.
#[derive(Clone, Debug, Default)]
pub struct GradientMap<T: Real = f32> {
    entries: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> GradientMap<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.entries.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.entries.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }
}

/// Append-only computation graph.
///
/// Nodes are stored in creation order, so every parent index is smaller than
/// its child's and the reverse insertion order is a topological order.
/// Values never change after insertion; `backward` only reads the graph and
/// may be called repeatedly with different seeds.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "expected [channels, height, width]".into(),
        }),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that gradients are taken with respect to.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Constant copy of `v`; no gradient flows through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), name, |x, y| {
            T::of(f(x.to_f64(), y.to_f64()))
        })?;
        self.push(name, out, op)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).map(|x| T::of(f(x.to_f64())));
        self.push(name, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Natural logarithm; non-positive inputs produce a non-finite error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary("pow", a, |x| x.powf(p), Op::Pow(a, p))
    }

    /// `x` for positive inputs, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(
            "leaky_relu",
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    /// Elementwise `max(x, floor)`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_f64();
        self.push("sum", Tensor::scalar(T::of(s)), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.sum_f64() / t.len() as f64;
        self.push("mean", Tensor::scalar(T::of(m)), Op::Mean(a))
    }

    /// Sum over one axis; the axis is removed from the shape (a rank-1 input
    /// reduces to shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                op: "sum_axis",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|k| src[(o * len + k) * inner + i].to_f64()).sum();
                out.push(T::of(s));
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(
            "sum_axis",
            Tensor::from_parts(out_shape, out),
            Op::SumAxis {
                input: a,
                outer,
                len,
                inner,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = t.reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a))
    }

    /// Same-padded, stride-1 2D convolution with a square odd kernel.
    /// `input` is `[cin, h, w]`, `weight` is `[cout, cin, k, k]`, `bias` is `[cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (cin, h, w) = chw("conv2d", self.shape(input))?;
        let ws = self.shape(weight).to_vec();
        let (cout, k) = match ws[..] {
            [co, ci, k1, k2] if ci == cin && k1 == k2 && k1 % 2 == 1 => (co, k1),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: self.shape(input).to_vec(),
                    rhs: ws,
                })
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let dims = ConvDims { cin, cout, h, w, k };
        let out = kernels::conv2d_forward(
            dims,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        self.push(
            "conv2d",
            Tensor::from_parts(vec![cout, h, w], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
        )
    }

    /// 2×2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = chw("avg_pool2", self.shape(a))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "avg_pool2",
                shape: self.shape(a).to_vec(),
                reason: "spatial dims must be even".into(),
            });
        }
        let out = kernels::avgpool2_forward(c, h, w, self.value(a).data());
        self.push("avg_pool2", Tensor::from_parts(vec![c, h / 2, w / 2], out), Op::AvgPool2(a))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = chw("upsample2", self.shape(a))?;
        let out = kernels::upsample2_forward(c, h, w, self.value(a).data());
        self.push("upsample2", Tensor::from_parts(vec![c, 2 * h, 2 * w], out), Op::Upsample2(a))
    }

    /// Concatenate along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => {
                return Err(Error::InvalidShape {
                    op: "concat",
                    shape: vec![],
                    reason: "no inputs".into(),
                })
            }
        };
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            channels += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = channels;
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()))
    }

    /// Softmax over the leading axis, independently at every trailing position.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.shape()[0];
        let p = t.len() / c;
        let src = t.data();
        let mut out = vec![T::ZERO; t.len()];
        let mut e = vec![0.0f64; c];
        for px in 0..p {
            let m = (0..c)
                .map(|ch| src[ch * p + px].to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ch in 0..c {
                e[ch] = (src[ch * p + px].to_f64() - m).exp();
                z += e[ch];
            }
            for ch in 0..c {
                out[ch * p + px] = T::of(e[ch] / z);
            }
        }
        let shape = t.shape().to_vec();
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(a))
    }

    /// Reverse-mode gradients of a scalar `root` w.r.t. every leaf that
    /// requires gradient.
    pub fn backward(&self, root: Var) -> Result<GradientMap<T>> {
        let shape = self.shape(root);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(shape.to_vec()));
        }
        let seed = Tensor::from_parts(shape.to_vec(), vec![T::ONE]);
        self.backward_with(root, &seed)
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `root`) back to
    /// every leaf that requires gradient.
    pub fn backward_with(&self, root: Var, seed: &Tensor<T>) -> Result<GradientMap<T>> {
        seed.expect_same_shape(self.value(root), "backward seed")?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        let mut out = GradientMap::default();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(widen(seed.data()));
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                if matches!(node.op, Op::Leaf) {
                    out.entries.insert(Var(idx), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            for p in node.op.parents() {
                if p.0 >= idx {
                    return Err(Error::Cycle(idx));
                }
            }
            if matches!(node.op, Op::Leaf) {
                let data = g.into_iter().map(T::of).collect();
                out.entries
                    .insert(Var(idx), Tensor::from_parts(node.value.shape().to_vec(), data));
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn val64(&self, v: Var) -> Vec<f64> {
        widen(self.value(v).data())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: impl FnOnce() -> Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = g();
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.to_vec());
                self.accumulate(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || g.to_vec());
                self.accumulate(grads, *b, || g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, || {
                    let bv = self.val64(*b);
                    g.iter().zip(&bv).map(|(x, y)| x * y).collect()
                });
                self.accumulate(grads, *b, || {
                    let av = self.val64(*a);
                    g.iter().zip(&av).map(|(x, y)| x * y).collect()
                });
            }
            Op::Div(a, b) => {
                let bv = self.val64(*b);
                self.accumulate(grads, *a, || g.iter().zip(&bv).map(|(x, y)| x / y).collect());
                self.accumulate(grads, *b, || {
                    let av = self.val64(*a);
                    g.iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(x, (u, v))| -x * u / (v * v))
                        .collect()
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, || g.iter().map(|x| c * x).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, || g.to_vec()),
            Op::Exp(a) => {
                let ov = widen(node.value.data());
                self.accumulate(grads, *a, || g.iter().zip(&ov).map(|(x, y)| x * y).collect());
            }
            Op::Log(a) => self.accumulate(grads, *a, || {
                let av = self.val64(*a);
                g.iter().zip(&av).map(|(x, y)| x / y).collect()
            }),
            Op::Pow(a, p) => self.accumulate(grads, *a, || {
                let av = self.val64(*a);
                g.iter()
                    .zip(&av)
                    .map(|(x, y)| x * p * y.powf(p - 1.0))
                    .collect()
            }),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, || vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, || vec![g[0] / n as f64; n]);
            }
            Op::SumAxis {
                input,
                outer,
                len,
                inner,
            } => self.accumulate(grads, *input, || {
                let mut out = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    for k in 0..*len {
                        let dst = &mut out[(o * len + k) * inner..(o * len + k + 1) * inner];
                        dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                out
            }),
            Op::LeakyRelu(a, slope) => self.accumulate(grads, *a, || {
                let av = self.value(*a).data();
                g.iter()
                    .zip(av)
                    .map(|(x, y)| if y.to_f64() > 0.0 { *x } else { slope * x })
                    .collect()
            }),
            Op::ClampMin(a, floor) => self.accumulate(grads, *a, || {
                let av = self.value(*a).data();
                g.iter()
                    .zip(av)
                    .map(|(x, y)| if y.to_f64() > *floor { *x } else { 0.0 })
                    .collect()
            }),
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                // the dense loops run in the graph's precision
                let gt: Vec<T> = g.iter().map(|&v| T::of(v)).collect();
                self.accumulate(grads, *input, || {
                    widen(&kernels::conv2d_grad_input(*dims, &gt, self.value(*weight).data()))
                });
                let need_w = self.nodes[weight.0].requires_grad;
                let need_b = bias.is_some_and(|b| self.nodes[b.0].requires_grad);
                if need_w || need_b {
                    let (gw, gb) = kernels::conv2d_grad_params(*dims, &gt, self.value(*input).data());
                    self.accumulate(grads, *weight, || widen(&gw));
                    if let Some(b) = bias {
                        self.accumulate(grads, *b, || widen(&gb));
                    }
                }
            }
            Op::AvgPool2(a) => self.accumulate(grads, *a, || {
                let s = self.shape(*a);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            out[(ch * h + y) * w + x] = 0.25 * g[(ch * oh + y / 2) * ow + x / 2];
                        }
                    }
                }
                out
            }),
            Op::Upsample2(a) => self.accumulate(grads, *a, || {
                let s = self.shape(*a);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            out[(ch * h + y / 2) * w + x / 2] += g[(ch * oh + y) * ow + x];
                        }
                    }
                }
                out
            }),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(grads, *p, || g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Softmax(a) => self.accumulate(grads, *a, || {
                let s = widen(node.value.data());
                let c = node.value.shape()[0];
                let p = s.len() / c;
                let mut out = vec![0.0; s.len()];
                for px in 0..p {
                    let dotp: f64 = (0..c).map(|ch| g[ch * p + px] * s[ch * p + px]).sum();
                    for ch in 0..c {
                        out[ch * p + px] = s[ch * p + px] * (g[ch * p + px] - dotp);
                    }
                }
                out
            }),
        }
    }
}

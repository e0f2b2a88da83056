//! Tiny two-scale encoder–decoder segmentation network.
//!
//! ```text
//! image [1,H,W]
//!   enc1: conv3x3 1->w, leaky
//!   enc2: conv3x3 w->w, leaky          ──── skip [w,H,W]
//!   avgpool 2x2
//!   enc3: conv3x3 w->2w, leaky         ──── features [2w,H/2,W/2]
//!   upsample x2, concat(skip)          [3w,H,W]
//!   dec:  conv3x3 3w->w, leaky
//!   head: conv1x1 w->C, softmax        ──── probs [C,H,W]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

const CHECKPOINT_MAGIC: &[u8; 5] = b"XALD1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Arch {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            in_channels: 1,
            num_classes: 3,
            base_width: 8,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 {
            return Err(Error::config("in_channels must be 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.base_width < 2 {
            return Err(Error::config(format!("base_width must be >= 2, got {}", self.base_width)));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter, in sorted name order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (w, c, i) = (self.base_width, self.num_classes, self.in_channels);
        vec![
            ("dec.bias", vec![w]),
            ("dec.weight", vec![w, 3 * w, 3, 3]),
            ("enc1.bias", vec![w]),
            ("enc1.weight", vec![w, i, 3, 3]),
            ("enc2.bias", vec![w]),
            ("enc2.weight", vec![w, w, 3, 3]),
            ("enc3.bias", vec![2 * w]),
            ("enc3.weight", vec![2 * w, w, 3, 3]),
            ("head.bias", vec![c]),
            ("head.weight", vec![c, w, 1, 1]),
        ]
    }

    pub fn check_image_shape(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match *shape {
            [c, h, w] if c == self.in_channels && h >= 8 && w >= 8 && h % 2 == 0 && w % 2 == 0 => Ok((h, w)),
            _ => Err(Error::InvalidShape {
                op: "segnet",
                shape: shape.to_vec(),
                reason: format!("expected [{}, H, W] with H, W even and >= 8", self.in_channels),
            }),
        }
    }
}

/// Per-pixel class probabilities, `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
}

impl Prediction {
    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[2]
    }

    /// Most probable class per pixel; ties resolve to the lowest class index.
    pub fn argmax(&self) -> Vec<u8> {
        let c = self.num_classes();
        let p = self.probs.len() / c;
        let d = self.probs.data();
        (0..p)
            .map(|px| {
                let mut best = 0;
                for ch in 1..c {
                    if d[ch * p + px] > d[best * p + px] {
                        best = ch;
                    }
                }
                best as u8
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    arch: Arch,
    params: BTreeMap<String, Tensor>,
    /// Initialization seed; `None` for models restored from a checkpoint.
    seed: Option<u64>,
}

/// Model parameters inserted as leaves of one graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    arch: Arch,
    vars: BTreeMap<String, Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub skip: Var,
    pub features: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
}

impl SegModel {
    /// Uniform `±sqrt(6 / fan_in)` weights, zero biases.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in arch.param_shapes() {
            let t = if name.ends_with(".weight") {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                let bound = (6.0 / fan_in).sqrt();
                Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name.to_string(), t);
        }
        Ok(SegModel {
            arch,
            params,
            seed: Some(seed),
        })
    }

    pub fn from_params(arch: Arch, params: BTreeMap<String, Tensor>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_shapes();
        if params.len() != expected.len() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(*name) {
                Some(t) if t.shape() == shape.as_slice() => {
                    if !t.all_finite() {
                        return Err(Error::NonFinite { op: "segnet params" });
                    }
                }
                Some(t) => {
                    return Err(Error::ShapeMismatch {
                        op: "segnet params",
                        lhs: shape.clone(),
                        rhs: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::config(format!("missing parameter {name}"))),
            }
        }
        Ok(SegModel {
            arch,
            params,
            seed: None,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Zero the final 1×1 projection so every pixel predicts `1/C` per class.
    pub fn with_zero_head(mut self) -> Self {
        for name in ["head.weight", "head.bias"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self
    }

    /// Insert the parameters into `g`; `trainable` decides whether they are
    /// differentiated.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundModel> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            vars.insert(name.clone(), g.leaf(t.cast(), trainable)?);
        }
        Ok(BoundModel { arch: self.arch, vars })
    }

    pub fn forward(&self, image: &Tensor) -> Result<Prediction> {
        let mut g = Graph::<f32>::new();
        let net = self.bind(&mut g, false)?;
        let x = g.constant(image.clone())?;
        let out = net.forward(&mut g, x)?;
        Ok(Prediction {
            probs: g.value(out.probs).clone(),
        })
    }

    /// Encoder output used as the semantic embedding, `[2w, H/2, W/2]`.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let net = self.bind(&mut g, false)?;
        let x = g.constant(image.clone())?;
        let enc = net.encode(&mut g, x)?;
        Ok(g.value(enc.features).clone())
    }

    /// Encoder activations `(skip, features)`.
    pub fn encode(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::<f32>::new();
        let net = self.bind(&mut g, false)?;
        let x = g.constant(image.clone())?;
        let enc = net.encode(&mut g, x)?;
        Ok((g.value(enc.skip).clone(), g.value(enc.features).clone()))
    }

    /// Decoder applied to cached encoder activations.
    pub fn decode(&self, skip: &Tensor, features: &Tensor) -> Result<Prediction> {
        let mut g = Graph::<f32>::new();
        let net = self.bind(&mut g, false)?;
        let enc = Encoded {
            skip: g.constant(skip.clone())?,
            features: g.constant(features.clone())?,
        };
        let (_, probs) = net.decode(&mut g, &enc)?;
        Ok(Prediction {
            probs: g.value(probs).clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0, path };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, 0, "bad checkpoint magic"));
        }
        let mut params = BTreeMap::new();
        while r.pos < bytes.len() {
            let at = r.pos as u64;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, at, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::format(path, at, format!("bad rank {rank} for {name}")));
            }
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::format(path, at, e.to_string()))?;
            if params.insert(name.clone(), t).is_some() {
                return Err(Error::format(path, at, format!("duplicate parameter {name}")));
            }
        }
        let arch = infer_arch(&params).ok_or_else(|| Error::format(path, 0, "unrecognized parameter set"))?;
        SegModel::from_params(arch, params).map_err(|e| Error::format(path, 0, e.to_string()))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        SegModel::from_bytes(&bytes, path)
    }
}

fn infer_arch(params: &BTreeMap<String, Tensor>) -> Option<Arch> {
    let enc1 = params.get("enc1.weight")?.shape();
    let head = params.get("head.weight")?.shape();
    if enc1.len() != 4 || head.len() != 4 {
        return None;
    }
    Some(Arch {
        in_channels: enc1[1],
        num_classes: head[0],
        base_width: enc1[0],
    })
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, self.pos as u64, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl BoundModel {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// `(name, leaf)` pairs in sorted name order.
    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Copy that reads parameter `name` from `var` instead of its own leaf.
    pub fn with_var(&self, name: &str, var: Var) -> Result<Self> {
        let mut out = self.clone();
        match out.vars.get_mut(name) {
            Some(v) => *v = var,
            None => return Err(Error::config(format!("unknown parameter {name}"))),
        }
        Ok(out)
    }

    fn conv<T: Real>(&self, g: &mut Graph<T>, x: Var, layer: &str) -> Result<Var> {
        let w = self.vars[&format!("{layer}.weight")];
        let b = self.vars[&format!("{layer}.bias")];
        g.conv2d(x, w, Some(b))
    }

    fn conv_act<T: Real>(&self, g: &mut Graph<T>, x: Var, layer: &str) -> Result<Var> {
        let y = self.conv(g, x, layer)?;
        g.leaky_relu(y, LEAKY_SLOPE)
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, image: Var) -> Result<Encoded> {
        self.arch.check_image_shape(g.shape(image))?;
        let h1 = self.conv_act(g, image, "enc1")?;
        let skip = self.conv_act(g, h1, "enc2")?;
        let pooled = g.avg_pool2(skip)?;
        let features = self.conv_act(g, pooled, "enc3")?;
        Ok(Encoded { skip, features })
    }

    /// Returns `(logits, probs)`.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, enc: &Encoded) -> Result<(Var, Var)> {
        let up = g.upsample2(enc.features)?;
        let cat = g.concat(&[up, enc.skip])?;
        let d = self.conv_act(g, cat, "dec")?;
        let logits = self.conv(g, d, "head")?;
        let probs = g.softmax(logits)?;
        Ok((logits, probs))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, image: Var) -> Result<Outputs> {
        let enc = self.encode(g, image)?;
        let (logits, probs) = self.decode(g, &enc)?;
        Ok(Outputs {
            features: enc.features,
            logits,
            probs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = SegModel::init(Arch::default(), 0).unwrap();
        let b = SegModel::init(Arch::default(), 0).unwrap();
        let c = SegModel::init(Arch::default(), 1).unwrap();
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.1.bit_eq(y.1)));
        assert!(a.params().iter().zip(c.params()).any(|(x, y)| !x.1.bit_eq(y.1)));
    }

    #[test]
    fn first_conv_bound_follows_fan_in() {
        let m = SegModel::init(Arch::default(), 3).unwrap();
        let bound = (6.0f32 / 9.0).sqrt();
        let w = m.param("enc1.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        // 72 uniform draws: the largest magnitude lands near the bound
        assert!(w.data().iter().any(|v| v.abs() > 0.8 * bound));
        assert!(m.param("enc1.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_invalid_arch() {
        let bad = Arch {
            num_classes: 1,
            ..Arch::default()
        };
        assert!(SegModel::init(bad, 0).is_err());
        let bad = Arch {
            base_width: 1,
            ..Arch::default()
        };
        assert!(SegModel::init(bad, 0).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let m = SegModel::init(Arch::default(), 5).unwrap().with_zero_head();
        let p = m.forward(&image(16, 16, 1)).unwrap();
        assert!(p.probs.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));
    }

    #[test]
    fn output_and_feature_shapes() {
        let m = SegModel::init(Arch::default(), 5).unwrap();
        let x = image(32, 32, 2);
        assert_eq!(m.forward(&x).unwrap().probs.shape(), &[3, 32, 32]);
        assert_eq!(m.features(&x).unwrap().shape(), &[16, 16, 16]);
    }

    #[test]
    fn rejects_odd_or_tiny_images() {
        let m = SegModel::init(Arch::default(), 5).unwrap();
        assert!(m.forward(&Tensor::zeros(&[1, 9, 10])).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 6, 6])).is_err());
        assert!(m.forward(&Tensor::zeros(&[2, 8, 8])).is_err());
    }

    #[test]
    fn probabilities_on_simplex() {
        let m = SegModel::init(Arch::default(), 9).unwrap();
        let p = m.forward(&image(16, 16, 4)).unwrap();
        let d = p.probs.data();
        let n = 16 * 16;
        for px in 0..n {
            let s: f64 = (0..3).map(|c| d[c * n + px] as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn decode_of_encode_is_forward() {
        let m = SegModel::init(Arch::default(), 11).unwrap();
        let x = image(16, 24, 6);
        let (skip, feat) = m.encode(&x).unwrap();
        assert!(m.decode(&skip, &feat).unwrap().probs.bit_eq(&m.forward(&x).unwrap().probs));
        assert!(feat.bit_eq(&m.features(&x).unwrap()));
    }

    #[test]
    fn one_pixel_change_changes_features() {
        let m = SegModel::init(Arch::default(), 12).unwrap();
        let x = image(16, 16, 8);
        let mut y = x.clone();
        y.data_mut()[100] += 0.5;
        assert_eq!(m.features(&x).unwrap(), m.features(&x).unwrap());
        assert_ne!(m.features(&x).unwrap(), m.features(&y).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let m = SegModel::init(Arch::default(), 21).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..5], b"XALD1");
        let p = Path::new("mem.ckpt");
        let back = SegModel::from_bytes(&bytes, p).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.arch(), m.arch());

        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(matches!(SegModel::from_bytes(&bad, p), Err(Error::Format { .. })));
        assert!(matches!(
            SegModel::from_bytes(&bytes[..bytes.len() - 3], p),
            Err(Error::Format { .. })
        ));
    }
}

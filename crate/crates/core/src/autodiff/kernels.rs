//! Dense loops behind the spatial primitives. The convolution forward pass
//! accumulates in the graph's own precision; gradients accumulate in `f64`.

use super::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn pad(&self) -> usize {
        self.k / 2
    }

    /// Row stride of the padded layouts.
    fn stride(&self) -> usize {
        self.w + 2 * self.pad()
    }

    /// Plane size of the zero-padded input layout.
    fn padded_len(&self) -> usize {
        (self.h + 2 * self.pad()) * self.stride()
    }

    /// Span covering every output pixel in the strided output layout; the
    /// columns past `w` in each row are scratch.
    fn span(&self) -> usize {
        (self.h - 1) * self.stride() + self.w
    }

    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.cin + i) * self.k + ky) * self.k + kx
    }

    /// `[c, h, w]` planes copied into zero-padded `[c, h + 2p, w + 2p]`.
    fn pad_planes<T: Real>(&self, c: usize, src: &[T]) -> Vec<T> {
        let (p, s, hw) = (self.pad(), self.stride(), self.h * self.w);
        let mut out = vec![T::ZERO; c * self.padded_len()];
        for ch in 0..c {
            let dst = &mut out[ch * self.padded_len()..];
            for y in 0..self.h {
                let row = &src[ch * hw + y * self.w..ch * hw + (y + 1) * self.w];
                dst[(y + p) * s + p..(y + p) * s + p + self.w].copy_from_slice(row);
            }
        }
        out
    }

    /// `[c, h, w]` planes laid out with the padded row stride, zero scratch.
    fn stride_planes<T: Real>(&self, c: usize, src: &[T]) -> Vec<T> {
        let (s, hw, span) = (self.stride(), self.h * self.w, self.span());
        let mut out = vec![T::ZERO; c * span];
        for ch in 0..c {
            for y in 0..self.h {
                let row = &src[ch * hw + y * self.w..ch * hw + (y + 1) * self.w];
                out[ch * span + y * s..ch * span + y * s + self.w].copy_from_slice(row);
            }
        }
        out
    }
}

pub(crate) fn widen<T: Real>(src: &[T]) -> Vec<f64> {
    src.iter().map(|v| v.to_f64()).collect()
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], a: T, src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * *s;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::ZERO; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::ZERO;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    let l = lanes;
    ((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7])) + tail
}

/// Same-padded stride-1 convolution, `input` is `[cin, h, w]`, `weight` is
/// `[cout, cin, k, k]`.
///
/// Every tap is one contiguous multiply-add over the padded plane, and taps
/// that fall into the zero border add exact zeros, so each output still equals
/// the bias plus its in-image terms summed in `(i, ky, kx)` order.
pub(crate) fn conv2d_forward<T: Real>(d: ConvDims, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (s, span, plen) = (d.stride(), d.span(), d.padded_len());
    let xp = d.pad_planes(d.cin, input);
    let mut out = Vec::with_capacity(d.cout * d.h * d.w);
    let mut acc = vec![T::ZERO; span];
    for o in 0..d.cout {
        let b = bias.map_or(T::ZERO, |b| b[o]);
        acc.iter_mut().for_each(|a| *a = b);
        for i in 0..d.cin {
            let plane = &xp[i * plen..(i + 1) * plen];
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wv = weight[d.widx(o, i, ky, kx)];
                    if wv == T::ZERO {
                        continue;
                    }
                    let off = ky * s + kx;
                    axpy(&mut acc, wv, &plane[off..off + span]);
                }
            }
        }
        for y in 0..d.h {
            out.extend_from_slice(&acc[y * s..y * s + d.w]);
        }
    }
    out
}

/// Gradient of the convolution w.r.t. its input.
pub(crate) fn conv2d_grad_input<T: Real>(d: ConvDims, grad_out: &[T], weight: &[T]) -> Vec<T> {
    let (p, s, span, plen) = (d.pad(), d.stride(), d.span(), d.padded_len());
    let gp = d.stride_planes(d.cout, grad_out);
    let mut gin_p = vec![T::ZERO; d.cin * plen];
    for i in 0..d.cin {
        let dst = &mut gin_p[i * plen..(i + 1) * plen];
        for o in 0..d.cout {
            let gplane = &gp[o * span..(o + 1) * span];
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wv = weight[d.widx(o, i, ky, kx)];
                    if wv == T::ZERO {
                        continue;
                    }
                    let off = ky * s + kx;
                    axpy(&mut dst[off..off + span], wv, gplane);
                }
            }
        }
    }
    let mut gin = Vec::with_capacity(d.cin * d.h * d.w);
    for i in 0..d.cin {
        for y in 0..d.h {
            let row = i * plen + (y + p) * s + p;
            gin.extend_from_slice(&gin_p[row..row + d.w]);
        }
    }
    gin
}

/// Gradient of the convolution w.r.t. weight and bias.
pub(crate) fn conv2d_grad_params<T: Real>(d: ConvDims, grad_out: &[T], input: &[T]) -> (Vec<T>, Vec<T>) {
    let (s, span, plen, hw) = (d.stride(), d.span(), d.padded_len(), d.h * d.w);
    let gp = d.stride_planes(d.cout, grad_out);
    let xp = d.pad_planes(d.cin, input);
    let mut gw = vec![T::ZERO; d.cout * d.cin * d.k * d.k];
    let mut gb = vec![T::ZERO; d.cout];
    for o in 0..d.cout {
        gb[o] = grad_out[o * hw..(o + 1) * hw].iter().fold(T::ZERO, |a, &b| a + b);
        let gplane = &gp[o * span..(o + 1) * span];
        for i in 0..d.cin {
            let plane = &xp[i * plen..(i + 1) * plen];
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let off = ky * s + kx;
                    gw[d.widx(o, i, ky, kx)] = dot(gplane, &plane[off..off + span]);
                }
            }
        }
    }
    (gw, gb)
}

pub(crate) fn avgpool2_forward<T: Real>(c: usize, h: usize, w: usize, input: &[T]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &input[ch * h * w..];
        for y in 0..oh {
            for x in 0..ow {
                let s = plane[2 * y * w + 2 * x].to_f64()
                    + plane[2 * y * w + 2 * x + 1].to_f64()
                    + plane[(2 * y + 1) * w + 2 * x].to_f64()
                    + plane[(2 * y + 1) * w + 2 * x + 1].to_f64();
                out.push(T::of(s * 0.25));
            }
        }
    }
    out
}

pub(crate) fn upsample2_forward<T: Real>(c: usize, h: usize, w: usize, input: &[T]) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let row = &input[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            for x in 0..ow {
                out.push(row[x / 2]);
            }
        }
    }
    out
}

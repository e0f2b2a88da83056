use super::{displacement_norm, Norm};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Euclidean projection onto `{x : ||x - anchor||_p <= epsilon}`.
///
/// Points already inside are returned unchanged. Results are rounded so that
/// their own displacement norm, measured the same way, never exceeds
/// `epsilon`; projecting twice is therefore a bitwise no-op.
pub fn project_ball(candidate: &Tensor, anchor: &Tensor, epsilon: f64, norm: Norm) -> Result<Tensor> {
    candidate.expect_same_shape(anchor, "project_ball")?;
    if !(epsilon > 0.0) {
        return Err(Error::config(format!("epsilon must be > 0, got {epsilon}")));
    }
    if epsilon.is_infinite() {
        return Ok(candidate.clone());
    }
    match norm {
        Norm::L2 => Ok(project_l2(candidate, anchor, epsilon)),
        Norm::Linf => Ok(project_linf(candidate, anchor, epsilon)),
    }
}

fn project_l2(candidate: &Tensor, anchor: &Tensor, epsilon: f64) -> Tensor {
    let n = displacement_norm(candidate, anchor, Norm::L2);
    if n <= epsilon {
        return candidate.clone();
    }
    let mut scale = epsilon / n;
    loop {
        let out = Tensor::from_fn(anchor.shape(), |k| {
            let a = anchor.data()[k] as f64;
            let c = candidate.data()[k] as f64;
            (a + (c - a) * scale) as f32
        });
        if displacement_norm(&out, anchor, Norm::L2) <= epsilon {
            return out;
        }
        scale *= 1.0 - 1e-7;
    }
}

fn project_linf(candidate: &Tensor, anchor: &Tensor, epsilon: f64) -> Tensor {
    Tensor::from_fn(anchor.shape(), |k| {
        let a = anchor.data()[k];
        let c = candidate.data()[k];
        let d = c as f64 - a as f64;
        if d.abs() <= epsilon {
            return c;
        }
        let mut out = (a as f64 + d.clamp(-epsilon, epsilon)) as f32;
        while (out as f64 - a as f64).abs() > epsilon {
            out = if out > a { out.next_down() } else { out.next_up() };
        }
        out
    })
}

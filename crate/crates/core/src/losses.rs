//! Differentiable losses on `[C, H, W]` probability maps.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Additive smoothing in the Dice ratio; guards `0/0` for absent classes.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probabilities are clamped to at least this before taking logs.
pub const KL_FLOOR: f64 = 1e-8;

fn class_sums<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = shape[0];
    let rest = shape[1..].iter().product();
    let flat = g.reshape(x, &[c, rest])?;
    g.sum_axis(flat, 1)
}

fn check_pair<T: Real>(g: &Graph<T>, op: &'static str, p: Var, q: Var) -> Result<()> {
    if g.shape(p) != g.shape(q) || g.shape(p).len() < 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: g.shape(p).to_vec(),
            rhs: g.shape(q).to_vec(),
        });
    }
    Ok(())
}

/// Soft Dice loss with product intersection:
/// `mean_c [1 - (2 Σ p_c q_c + s) / (Σ p_c + Σ q_c + s)]`.
///
/// With `stop_grad_q` the second argument is treated as a constant target.
pub fn dice_loss<T: Real>(g: &mut Graph<T>, p: Var, q: Var, stop_grad_q: bool) -> Result<Var> {
    check_pair(g, "dice_loss", p, q)?;
    let q = if stop_grad_q { g.detach(q) } else { q };
    let pq = g.mul(p, q)?;
    let inter = class_sums(g, pq)?;
    let sp = class_sums(g, p)?;
    let sq = class_sums(g, q)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTH)?;
    let den = g.add(sp, sq)?;
    let den = g.add_scalar(den, DICE_SMOOTH)?;
    let ratio = g.div(num, den)?;
    let m = g.mean(ratio)?;
    let neg = g.scale(m, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Pixel-averaged `KL(q || p)` with `q` the constant reference:
/// `mean_pixels Σ_c q_c (log q_c - log p_c)`.
pub fn kl_pixelwise<T: Real>(g: &mut Graph<T>, p: Var, q: Var) -> Result<Var> {
    check_pair(g, "kl_pixelwise", p, q)?;
    let shape = g.shape(p).to_vec();
    let pixels: usize = shape[1..].iter().product();
    let q = g.detach(q);
    let qc = g.clamp_min(q, KL_FLOOR)?;
    let pc = g.clamp_min(p, KL_FLOOR)?;
    let lq = g.log(qc)?;
    let lp = g.log(pc)?;
    let diff = g.sub(lq, lp)?;
    let terms = g.mul(q, diff)?;
    let total = g.sum(terms)?;
    g.scale(total, 1.0 / pixels as f64)
}

/// Value of [`dice_loss`] on plain tensors.
pub fn dice_loss_value(p: &Tensor, q: &Tensor) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let pv = g.constant(p.clone())?;
    let qv = g.constant(q.clone())?;
    let l = dice_loss(&mut g, pv, qv, true)?;
    Ok(g.value(l).item() as f64)
}

/// Value of [`kl_pixelwise`] on plain tensors.
pub fn kl_pixelwise_value(p: &Tensor, q: &Tensor) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let pv = g.constant(p.clone())?;
    let qv = g.constant(q.clone())?;
    let l = kl_pixelwise(&mut g, pv, qv)?;
    Ok(g.value(l).item() as f64)
}

/// `[C, H, W]` one-hot encoding of a row-major label mask.
pub fn one_hot(mask: &[u8], num_classes: usize, h: usize, w: usize) -> Result<Tensor> {
    if mask.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "one_hot",
            lhs: vec![h, w],
            rhs: vec![mask.len()],
        });
    }
    let mut t = Tensor::zeros(&[num_classes, h, w]);
    let d = t.data_mut();
    for (px, &label) in mask.iter().enumerate() {
        let label = label as usize;
        if label >= num_classes {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        d[label * h * w + px] = 1.0;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identical_hard_predictions_have_zero_loss() {
        let p = one_hot(&[0, 1, 2, 1, 0, 0], 3, 2, 3).unwrap();
        assert!(dice_loss_value(&p, &p).unwrap() <= 1e-4);
    }

    #[test]
    fn disjoint_hard_predictions_have_unit_loss() {
        let p = one_hot(&[0, 1, 0, 1], 2, 2, 2).unwrap();
        let q = one_hot(&[1, 0, 1, 0], 2, 2, 2).unwrap();
        assert!((dice_loss_value(&p, &q).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn single_pixel_hand_value() {
        // class 0: 1 - 0.72/1.2 = 0.4, class 1: 1 - 0.32/0.8 = 0.6
        let p = t(&[2, 1, 1], &[0.6, 0.4]);
        let l = dice_loss_value(&p, &p).unwrap();
        assert!((l - 0.5).abs() < 1e-4, "{l}");
    }

    #[test]
    fn kl_hand_value() {
        let q = t(&[2, 1, 1], &[1.0, 0.0]);
        let p = t(&[2, 1, 1], &[0.5, 0.5]);
        let v = kl_pixelwise_value(&p, &q).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
        assert_eq!(kl_pixelwise_value(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::<f32>::new();
        let p = g.constant(Tensor::zeros(&[2, 2, 2])).unwrap();
        let q = g.constant(Tensor::zeros(&[3, 2, 2])).unwrap();
        assert!(dice_loss(&mut g, p, q, false).is_err());
        assert!(kl_pixelwise(&mut g, p, q).is_err());
    }

    #[test]
    fn stop_grad_blocks_target_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::new(vec![2, 1, 2], vec![0.3, 0.6, 0.7, 0.4]).unwrap()).unwrap();
        let q = g.param(Tensor::new(vec![2, 1, 2], vec![0.5, 0.1, 0.5, 0.9]).unwrap()).unwrap();
        let l = dice_loss(&mut g, p, q, true).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(q).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(p).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn one_hot_rejects_bad_labels() {
        assert!(matches!(one_hot(&[0, 3], 3, 1, 2), Err(Error::LabelOutOfRange { .. })));
    }
}

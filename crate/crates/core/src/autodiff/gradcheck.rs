use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

fn eval<T: Real, F>(f: &F, x: &Tensor<T>) -> Result<f64>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let root = f(&mut g, xv)?;
    let v = g.value(root);
    if !v.is_scalar() {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    let v = v.item().to_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            op: "finite_difference",
        });
    }
    Ok(v)
}

/// Reverse-mode gradient of `f` at `x`.
pub fn analytic_gradient<T: Real, F>(f: &F, x: &Tensor<T>) -> Result<Tensor<T>>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone())?;
    let root = f(&mut g, xv)?;
    let mut grads = g.backward(root)?;
    Ok(grads.take(xv).expect("input leaf always receives a gradient"))
}

/// Central difference of `f` along coordinate `coord`.
pub fn central_difference<T: Real, F>(f: &F, x: &Tensor<T>, coord: usize, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut plus = x.clone();
    let mut minus = x.clone();
    let c = x.data()[coord].to_f64();
    plus.data_mut()[coord] = T::of(c + step);
    minus.data_mut()[coord] = T::of(c - step);
    let h = plus.data()[coord].to_f64() - minus.data()[coord].to_f64();
    Ok((eval(f, &plus)? - eval(f, &minus)?) / h)
}

/// Largest relative error `|analytic - numeric| / (|numeric| + 1e-8)` over
/// the listed coordinates.
pub fn finite_difference_probe<T: Real, F>(f: F, x: &Tensor<T>, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {step}")));
    }
    let analytic = analytic_gradient(&f, x)?;
    let mut worst = 0.0f64;
    for &c in coords {
        let numeric = central_difference(&f, x, c, step)?;
        let a = analytic.data()[c].to_f64();
        worst = worst.max((a - numeric).abs() / (numeric.abs() + REL_FLOOR));
    }
    Ok(worst)
}

/// [`finite_difference_probe`] over every coordinate of `x`.
pub fn finite_difference_check<T: Real, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_difference_probe(f, x, step, &coords)
}

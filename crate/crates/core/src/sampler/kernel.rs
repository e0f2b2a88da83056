use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Lower bound on the squared bandwidth.
pub const SIGMA2_FLOOR: f64 = 1e-6;

/// `exp(-||a - b||^2 / (2 sigma^2))`.
pub fn rbf_kernel(a: &Tensor, b: &Tensor, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("kernel bandwidth must be > 0, got {sigma}")));
    }
    Ok((-a.squared_distance(b)? / (2.0 * sigma * sigma)).exp())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median-heuristic squared bandwidth
/// `median_{i<j} ||e_i - e_j||^2 / (2 ln(N + 1))`, floored at `1e-6`.
/// Even pair counts take the mean of the two middle distances; a single
/// embedding yields the floor.
pub fn median_sigma2(embeddings: &[&Tensor]) -> Result<f64> {
    let n = embeddings.len();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(embeddings[i].squared_distance(embeddings[j])?);
        }
    }
    if d.is_empty() {
        return Ok(SIGMA2_FLOOR);
    }
    let s2 = median(d) / (2.0 * ((n + 1) as f64).ln());
    Ok(s2.max(SIGMA2_FLOOR))
}

/// Square root of [`median_sigma2`].
pub fn median_bandwidth(embeddings: &[Tensor]) -> Result<f64> {
    let refs: Vec<&Tensor> = embeddings.iter().collect();
    Ok(median_sigma2(&refs)?.sqrt())
}

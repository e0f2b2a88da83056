//! Segmentation metrics on hard label masks and the particle-diversity
//! statistic.
//!
//! Dice and Jaccard are averaged over foreground classes (label 0 is
//! background). Surface distances are computed between per-class boundary
//! pixel sets, where a boundary pixel carries the class and has an in-image
//! 4-neighbour with a different label. Directed nearest-boundary distances
//! come from an exact squared Euclidean distance transform.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice_pct: f64,
    pub jaccard_pct: f64,
    pub hd95_px: f64,
    pub asd_px: f64,
}

impl MetricReport {
    pub const PERFECT: MetricReport = MetricReport {
        dice_pct: 100.0,
        jaccard_pct: 100.0,
        hd95_px: 0.0,
        asd_px: 0.0,
    };

    /// Elementwise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = reports.len() as f64;
        let mut acc = [0.0f64; 4];
        for r in reports {
            acc[0] += r.dice_pct;
            acc[1] += r.jaccard_pct;
            acc[2] += r.hd95_px;
            acc[3] += r.asd_px;
        }
        Ok(MetricReport {
            dice_pct: acc[0] / n,
            jaccard_pct: acc[1] / n,
            hd95_px: acc[2] / n,
            asd_px: acc[3] / n,
        })
    }
}

/// Row-major boundary pixels of class `class`.
pub fn boundary_pixels(mask: &[u8], h: usize, w: usize, class: u8) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] != class {
                continue;
            }
            let differs = (y > 0 && mask[(y - 1) * w + x] != class)
                || (y + 1 < h && mask[(y + 1) * w + x] != class)
                || (x > 0 && mask[y * w + x - 1] != class)
                || (x + 1 < w && mask[y * w + x + 1] != class);
            if differs {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact 1D squared distance transform (lower envelope of parabolas).
/// Infinite entries of `f` are not sites.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let qf = q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let pf = p as f64;
                    let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest site.
pub fn squared_distance_transform(sites: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(y, x) in sites {
        grid[y * w + x] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Nearest-rank percentile of an unsorted sample.
pub fn nearest_rank_percentile(values: &[f64], pct: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = (pct * v.len()).div_ceil(100).max(1);
    v[rank - 1]
}

fn surface_distances(a: &[(usize, usize)], b: &[(usize, usize)], h: usize, w: usize) -> (f64, f64) {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return (0.0, 0.0),
        (true, false) | (false, true) => {
            let diag = ((h * h + w * w) as f64).sqrt();
            return (diag, diag);
        }
        _ => {}
    }
    let dt_b = squared_distance_transform(b, h, w);
    let dt_a = squared_distance_transform(a, h, w);
    let d_ab: Vec<f64> = a.iter().map(|&(y, x)| dt_b[y * w + x].sqrt()).collect();
    let d_ba: Vec<f64> = b.iter().map(|&(y, x)| dt_a[y * w + x].sqrt()).collect();
    let hd95 = nearest_rank_percentile(&d_ab, 95).max(nearest_rank_percentile(&d_ba, 95));
    let mut total = 0.0;
    for d in d_ab.iter().chain(&d_ba) {
        total += d;
    }
    (hd95, total / (d_ab.len() + d_ba.len()) as f64)
}

/// Dice, Jaccard, 95th-percentile Hausdorff and average surface distance
/// between a predicted and a ground-truth mask.
pub fn seg_metrics(pred: &[u8], gt: &[u8], h: usize, w: usize, num_classes: usize) -> Result<MetricReport> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "seg_metrics",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    if num_classes < 2 {
        return Err(Error::config("seg_metrics needs at least 2 classes"));
    }
    if let Some(&label) = pred.iter().chain(gt).find(|&&l| l as usize >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: label as usize,
            num_classes,
        });
    }
    let mut acc = [0.0f64; 4];
    for c in 1..num_classes {
        let c = c as u8;
        let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            let (ip, ig) = (p == c, g == c);
            np += ip as usize;
            ng += ig as usize;
            inter += (ip && ig) as usize;
        }
        let union = np + ng - inter;
        let (dice, jac) = if np + ng == 0 {
            (1.0, 1.0)
        } else {
            (2.0 * inter as f64 / (np + ng) as f64, inter as f64 / union as f64)
        };
        let bp = boundary_pixels(pred, h, w, c);
        let bg = boundary_pixels(gt, h, w, c);
        let (hd95, asd) = surface_distances(&bp, &bg, h, w);
        acc[0] += dice;
        acc[1] += jac;
        acc[2] += hd95;
        acc[3] += asd;
    }
    let k = (num_classes - 1) as f64;
    Ok(MetricReport {
        dice_pct: 100.0 * acc[0] / k,
        jaccard_pct: 100.0 * acc[1] / k,
        hd95_px: acc[2] / k,
        asd_px: acc[3] / k,
    })
}

/// Mean over unordered pairs of the summed squared elementwise difference.
pub fn mean_pairwise_sse(particles: &[Tensor]) -> Result<f64> {
    if particles.len() < 2 {
        return Err(Error::TooFewParticles(particles.len()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..particles.len() {
        for j in i + 1..particles.len() {
            total += particles[i].squared_distance(&particles[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

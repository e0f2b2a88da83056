//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod gradsuite;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xald::metrics::MetricReport;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn is_boundary(mask: &[u8], h: usize, w: usize, y: usize, x: usize) -> bool {
    let c = mask[y * w + x];
    let dirs: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    dirs.iter().any(|&(dy, dx)| {
        let (ny, nx) = (y as isize + dy, x as isize + dx);
        ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && mask[ny as usize * w + nx as usize] != c
    })
}

fn boundary(mask: &[u8], h: usize, w: usize, class: u8) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] == class && is_boundary(mask, h, w, y, x) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Nearest distance by enumerating every pair.
fn directed(a: &[(usize, usize)], b: &[(usize, usize)]) -> Vec<f64> {
    a.iter()
        .map(|&(y, x)| {
            b.iter()
                .map(|&(v, u)| {
                    let dy = y as f64 - v as f64;
                    let dx = x as f64 - u as f64;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn percentile95(d: &[f64]) -> f64 {
    let mut s = d.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // smallest value with at least 95% of the sample at or below it
    for (i, v) in s.iter().enumerate() {
        if (i + 1) * 100 >= 95 * s.len() {
            return *v;
        }
    }
    unreachable!()
}

/// Brute-force segmentation metrics over foreground classes.
pub fn brute_force_metrics(pred: &[u8], gt: &[u8], h: usize, w: usize, num_classes: usize) -> MetricReport {
    let diag = ((h * h + w * w) as f64).sqrt();
    let mut sums = [0.0f64; 4];
    for c in 1..num_classes as u8 {
        let np = pred.iter().filter(|&&p| p == c).count();
        let ng = gt.iter().filter(|&&g| g == c).count();
        let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == c && g == c).count();
        let union = np + ng - inter;
        let (dice, jac) = if np + ng == 0 {
            (1.0, 1.0)
        } else {
            (2.0 * inter as f64 / (np + ng) as f64, inter as f64 / union as f64)
        };
        let bp = boundary(pred, h, w, c);
        let bg = boundary(gt, h, w, c);
        let (hd, asd) = match (bp.is_empty(), bg.is_empty()) {
            (true, true) => (0.0, 0.0),
            (true, false) | (false, true) => (diag, diag),
            _ => {
                let ab = directed(&bp, &bg);
                let ba = directed(&bg, &bp);
                let hd = percentile95(&ab).max(percentile95(&ba));
                let mut total = 0.0;
                for d in ab.iter().chain(&ba) {
                    total += d;
                }
                (hd, total / (ab.len() + ba.len()) as f64)
            }
        };
        sums[0] += dice;
        sums[1] += jac;
        sums[2] += hd;
        sums[3] += asd;
    }
    let k = (num_classes - 1) as f64;
    MetricReport {
        dice_pct: 100.0 * sums[0] / k,
        jaccard_pct: 100.0 * sums[1] / k,
        hd95_px: sums[2] / k,
        asd_px: sums[3] / k,
    }
}

/// A blobby random mask: a few random rectangles painted over noise-free
/// background, so boundaries are neither trivial nor everywhere.
pub fn random_mask<R: Rng>(rng: &mut R, h: usize, w: usize, num_classes: u8) -> Vec<u8> {
    let mut m = vec![0u8; h * w];
    for _ in 0..rng.random_range(0..5) {
        let c = rng.random_range(0..num_classes);
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h), rng.random_range(x0..w));
        for y in y0..=y1 {
            for x in x0..=x1 {
                m[y * w + x] = c;
            }
        }
    }
    if rng.random_bool(0.3) {
        for v in m.iter_mut() {
            if rng.random_bool(0.05) {
                *v = rng.random_range(0..num_classes);
            }
        }
    }
    m
}

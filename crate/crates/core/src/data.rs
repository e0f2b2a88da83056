//! Synthetic segmentation corpus and its on-disk format.
//!
//! Each image is a noisy background with one rectangle (class 2) and one
//! rotated ellipse (class 1, drawn last). A dataset directory holds
//! `manifest.json` plus one `sample_%04d.bin` per image: training samples
//! first, evaluation samples numbered after them.
//!
//! Sample files are `"XDS1"`, `u32 H`, `u32 W` (little-endian), `H·W`
//! little-endian `f32` intensities, then `H·W` label bytes.

use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";
pub const NUM_CLASSES: usize = 3;
const SAMPLE_MAGIC: &[u8; 4] = b"XDS1";
const MAX_RETRIES: usize = 100;
const MIN_AREA: usize = 9;
/// Default labeled fraction written into freshly generated manifests.
pub const DEFAULT_LABELED_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major labels in `[0, C)`.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: String,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub labeled_indices: Vec<usize>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::config(format!("unsupported dataset version {:?}", self.version)));
        }
        check_geometry(self.h, self.w, self.n_train)?;
        if self.c != NUM_CLASSES {
            return Err(Error::config(format!("C must be {NUM_CLASSES}, got {}", self.c)));
        }
        if self.labeled_indices.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config("labeled_indices must be sorted and duplicate-free"));
        }
        if let Some(&i) = self.labeled_indices.iter().find(|&&i| i >= self.n_train) {
            return Err(Error::config(format!("labeled index {i} outside [0, {})", self.n_train)));
        }
        Ok(())
    }

    pub fn sample_path(dir: &Path, index: usize) -> PathBuf {
        dir.join(format!("sample_{index:04}.bin"))
    }

    /// Training indices not in `labeled_indices`.
    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.n_train).filter(|i| self.labeled_indices.binary_search(i).is_err()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

fn check_geometry(h: usize, w: usize, n_train: usize) -> Result<()> {
    if h < 16 || w < 16 || !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(Error::config(format!("H and W must be even and >= 16, got {h}x{w}")));
    }
    if n_train < 4 {
        return Err(Error::config(format!("n_train must be >= 4, got {n_train}")));
    }
    Ok(())
}

/// Rotated ellipse `((u/a)^2 + (v/b)^2 <= 1)` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Implicit-form membership of the pixel at `(y, x)`.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dy = y as f64 - self.cy;
        let dx = x as f64 - self.cx;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Scanline rasterization: for each row, the closed interval of columns
    /// inside the ellipse, clipped to the image.
    pub fn spans(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        let (s, c) = self.theta.sin_cos();
        let (ia, ib) = (1.0 / (self.a * self.a), 1.0 / (self.b * self.b));
        // quadratic form A dx^2 + B dx dy + C dy^2 <= 1
        let qa = c * c * ia + s * s * ib;
        let qb = 2.0 * c * s * (ia - ib);
        let qc = s * s * ia + c * c * ib;
        let mut out = Vec::new();
        for y in 0..h {
            let dy = y as f64 - self.cy;
            let disc = qb * qb * dy * dy - 4.0 * qa * (qc * dy * dy - 1.0);
            if disc < 0.0 {
                continue;
            }
            let r = disc.sqrt();
            let lo = self.cx + (-qb * dy - r) / (2.0 * qa);
            let hi = self.cx + (-qb * dy + r) / (2.0 * qa);
            let x0 = lo.ceil().max(0.0);
            let x1 = hi.floor().min(w as f64 - 1.0);
            if x1 >= x0 {
                out.push((y, x0 as usize, x1 as usize));
            }
        }
        out
    }
}

/// Geometry behind one generated sample, kept for oracle checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shapes {
    pub ellipse: Ellipse,
    /// `(top, left, height, width)`.
    pub rect: (usize, usize, usize, usize),
}

fn draw_shapes<R: Rng>(rng: &mut R, h: usize, w: usize) -> Shapes {
    let rh = rng.random_range(3..=h / 2);
    let rw = rng.random_range(3..=w / 2);
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    let r_max = (h.min(w) / 4) as f64;
    let a = rng.random_range(2.0..r_max);
    let b = rng.random_range(2.0..r_max);
    let r = a.max(b);
    let cy = rng.random_range(r..h as f64 - 1.0 - r);
    let cx = rng.random_range(r..w as f64 - 1.0 - r);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    Shapes {
        ellipse: Ellipse { cy, cx, a, b, theta },
        rect: (top, left, rh, rw),
    }
}

fn rasterize(shapes: &Shapes, h: usize, w: usize) -> Vec<u8> {
    let mut mask = vec![0u8; h * w];
    let (top, left, rh, rw) = shapes.rect;
    for y in top..top + rh {
        mask[y * w + left..y * w + left + rw].fill(2);
    }
    for (y, x0, x1) in shapes.ellipse.spans(h, w) {
        mask[y * w + x0..=y * w + x1].fill(1);
    }
    mask
}

/// Generates one sample from `rng`, retrying degenerate geometry.
pub fn generate_sample<R: Rng>(rng: &mut R, h: usize, w: usize) -> Option<(Sample, Shapes)> {
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    for _ in 0..MAX_RETRIES {
        let shapes = draw_shapes(rng, h, w);
        let mask = rasterize(&shapes, h, w);
        let mut counts = [0usize; NUM_CLASSES];
        mask.iter().for_each(|&l| counts[l as usize] += 1);
        if counts.iter().any(|&c| c < MIN_AREA) {
            continue;
        }
        let bg: f64 = rng.random_range(0.05..=0.25);
        let ramp_amp: f64 = rng.random_range(0.0..0.3);
        let ramp_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (s, c) = ramp_dir.sin_cos();
        let data = (0..h * w)
            .map(|k| {
                let (y, x) = (k / w, k % w);
                let offset = match mask[k] {
                    1 => 0.4,
                    2 => 0.25,
                    _ => 0.0,
                };
                let t = c * (x as f64 / (w - 1) as f64 - 0.5) + s * (y as f64 / (h - 1) as f64 - 0.5);
                let ramp = 1.0 + ramp_amp * t;
                let n: f64 = noise.sample(rng);
                ((bg + offset) * ramp + n).clamp(0.0, 1.0) as f32
            })
            .collect();
        let image = Tensor::new(vec![1, h, w], data).expect("image shape");
        return Some((Sample { image, mask }, shapes));
    }
    None
}

/// `max(1, round(fraction · n_train))` indices drawn without replacement,
/// sorted. Halves round away from zero.
pub fn split_labels(n_train: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("labeled fraction must lie in (0, 1], got {fraction}")));
    }
    if n_train == 0 {
        return Err(Error::EmptyDataset);
    }
    let count = ((fraction * n_train as f64).round() as usize).clamp(1, n_train);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, n_train, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Generates every sample in memory; `write_dataset` puts it on disk.
pub fn generate_dataset(h: usize, w: usize, n_train: usize, n_eval: usize, seed: u64) -> Result<Dataset> {
    check_geometry(h, w, n_train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_train + n_eval);
    for index in 0..n_train + n_eval {
        let (s, _) = generate_sample(&mut rng, h, w).ok_or_else(|| {
            Error::config(format!(
                "degenerate geometry after {MAX_RETRIES} retries (seed {seed}, sample {index})"
            ))
        })?;
        samples.push(s);
    }
    let eval = samples.split_off(n_train);
    let manifest = DatasetManifest {
        version: FORMAT_VERSION.to_string(),
        h,
        w,
        c: NUM_CLASSES,
        n_train,
        n_eval,
        labeled_indices: split_labels(n_train, DEFAULT_LABELED_FRACTION, seed)?,
        seed,
    };
    Ok(Dataset {
        manifest,
        train: samples,
        eval,
    })
}

pub fn sample_to_bytes(sample: &Sample) -> Vec<u8> {
    let (h, w) = (sample.height(), sample.width());
    let mut out = Vec::with_capacity(12 + 5 * h * w);
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in sample.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&sample.mask);
    out
}

/// Parses a sample file; `path` only labels errors.
pub fn sample_from_bytes(bytes: &[u8], path: &Path, num_classes: usize) -> Result<Sample> {
    let need = |n: usize, at: usize| {
        if bytes.len() < at + n {
            Err(Error::format(path, bytes.len() as u64, "truncated sample file"))
        } else {
            Ok(())
        }
    };
    need(12, 0)?;
    if &bytes[..4] != SAMPLE_MAGIC {
        return Err(Error::format(path, 0, "bad sample magic"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if h == 0 || w == 0 {
        return Err(Error::format(path, 4, format!("bad geometry {h}x{w}")));
    }
    let n = h * w;
    need(5 * n, 12)?;
    if bytes.len() != 12 + 5 * n {
        return Err(Error::format(path, (12 + 5 * n) as u64, "trailing bytes after mask"));
    }
    let data = bytes[12..12 + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mask = bytes[12 + 4 * n..].to_vec();
    if let Some(k) = mask.iter().position(|&l| l as usize >= num_classes) {
        return Err(Error::format(
            path,
            (12 + 4 * n + k) as u64,
            format!("label {} out of range for {num_classes} classes", mask[k]),
        ));
    }
    let image = Tensor::new(vec![1, h, w], data).map_err(|e| Error::format(path, 12, e.to_string()))?;
    Ok(Sample { image, mask })
}

pub fn save_sample(path: &Path, sample: &Sample) -> Result<()> {
    std::fs::write(path, sample_to_bytes(sample)).map_err(|e| Error::io(path, e))
}

pub fn load_sample(path: &Path, num_classes: usize) -> Result<Sample> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    sample_from_bytes(&bytes, path, num_classes)
}

/// Writes `manifest.json` and every sample file into `dir` (created if
/// needed).
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&dataset.manifest).map_err(|e| Error::Json {
        path: manifest_path.clone(),
        source: e,
    })?;
    json.push('\n');
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    for (i, s) in dataset.train.iter().chain(&dataset.eval).enumerate() {
        save_sample(&DatasetManifest::sample_path(dir, i), s)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(Error::MissingDataset(dir.to_path_buf()));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    manifest
        .validate()
        .map_err(|e| Error::format(&path, 0, e.to_string()))?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.n_train + manifest.n_eval);
    for i in 0..manifest.n_train + manifest.n_eval {
        let path = DatasetManifest::sample_path(dir, i);
        if !path.is_file() {
            return Err(Error::format(
                &path,
                0,
                format!(
                    "manifest lists {} samples but this file is missing",
                    manifest.n_train + manifest.n_eval
                ),
            ));
        }
        let s = load_sample(&path, manifest.c)?;
        if s.height() != manifest.h || s.width() != manifest.w {
            return Err(Error::format(
                &path,
                4,
                format!(
                    "sample is {}x{} but the manifest says {}x{}",
                    s.height(),
                    s.width(),
                    manifest.h,
                    manifest.w
                ),
            ));
        }
        samples.push(s);
    }
    let eval = samples.split_off(manifest.n_train);
    Ok(Dataset {
        manifest,
        train: samples,
        eval,
    })
}

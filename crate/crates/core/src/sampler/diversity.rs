//! Particle diversity of the three samplers around the same images.

use serde::{Deserialize, Serialize};

use super::{svgd_sample, svgdf_sample, vat_multi_restart, ParticleSet, SamplerConfig};
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::metrics::mean_pairwise_sse;
use crate::segnet::SegModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    /// Independent single-particle VAT runs.
    Vat,
    Svgd,
    Svgdf,
}

impl SamplerMethod {
    pub const ALL: [SamplerMethod; 3] = [SamplerMethod::Vat, SamplerMethod::Svgd, SamplerMethod::Svgdf];

    pub fn name(self) -> &'static str {
        match self {
            SamplerMethod::Vat => "vat",
            SamplerMethod::Svgd => "svgd",
            SamplerMethod::Svgdf => "svgdf",
        }
    }

    pub fn sample(self, model: &SegModel, anchor: &Tensor, config: &SamplerConfig) -> Result<ParticleSet> {
        match self {
            SamplerMethod::Vat => vat_multi_restart(model, anchor, config),
            SamplerMethod::Svgd => svgd_sample(model, anchor, config),
            SamplerMethod::Svgdf => svgdf_sample(model, anchor, config),
        }
    }
}

impl std::fmt::Display for SamplerMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityRow {
    pub method: SamplerMethod,
    pub n_particles: usize,
    pub image_index: usize,
    pub mean_sse: f64,
}

/// Mean pairwise SSE of every method and particle count on every image.
/// Rows are ordered by method, then count, then image.
pub fn diversity_table(
    model: &SegModel,
    images: &[(usize, &Tensor)],
    methods: &[SamplerMethod],
    counts: &[usize],
    config: &SamplerConfig,
) -> Result<Vec<DiversityRow>> {
    let mut rows = Vec::new();
    for &method in methods {
        for &n in counts {
            let cfg = SamplerConfig {
                n_particles: n,
                ..*config
            };
            cfg.validate()?;
            for &(image_index, x) in images {
                let set = method.sample(model, x, &cfg)?;
                rows.push(DiversityRow {
                    method,
                    n_particles: n,
                    image_index,
                    mean_sse: mean_pairwise_sse(&set.particles)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Average `mean_sse` over images for `(method, n)`.
pub fn mean_diversity(rows: &[DiversityRow], method: SamplerMethod, n: usize) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && r.n_particles == n)
        .map(|r| r.mean_sse)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::run::train_on;
use super::{Regularizer, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LadderRow {
    pub regularizer: Regularizer,
    pub seed: u64,
    pub final_metrics: MetricReport,
}

/// Trains `base` once per `(regularizer, seed)`.
pub fn run_ladder(base: &TrainConfig, regularizers: &[Regularizer], seeds: &[u64], dataset: &Dataset) -> Result<Vec<LadderRow>> {
    let jobs: Vec<(Regularizer, u64)> = regularizers
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    jobs.par_iter()
        .map(|&(regularizer, seed)| {
            let cfg = TrainConfig {
                regularizer,
                seed,
                ..base.clone()
            };
            let out = train_on(&cfg, dataset)?;
            Ok(LadderRow {
                regularizer,
                seed,
                final_metrics: out.report.final_metrics,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub n_particles: usize,
    pub seed: u64,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
}

/// Cross-ALD training for each particle count, written as
/// `n_particles,seed,dice,jaccard,hd95,asd` to `csv_path`.
pub fn particle_count_sweep(
    base: &TrainConfig,
    counts: &[usize],
    seeds: &[u64],
    dataset: &Dataset,
    csv_path: &Path,
) -> Result<Vec<SweepRow>> {
    let jobs: Vec<(usize, u64)> = counts
        .iter()
        .flat_map(|&n| seeds.iter().map(move |&s| (n, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(n, seed)| {
            let mut cfg = TrainConfig {
                regularizer: Regularizer::CrossAld,
                seed,
                ..base.clone()
            };
            cfg.sampler.n_particles = n;
            let m = train_on(&cfg, dataset)?.report.final_metrics;
            Ok(SweepRow {
                n_particles: n,
                seed,
                dice: m.dice_pct,
                jaccard: m.jaccard_pct,
                hd95: m.hd95_px,
                asd: m.asd_px,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let csv_err = |e: csv::Error| Error::io(csv_path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(csv_path).map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    Ok(rows)
}

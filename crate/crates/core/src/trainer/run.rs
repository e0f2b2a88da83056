use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate, train_iteration, TrainConfig, TrainState};
use crate::autodiff::Tensor;
use crate::data::{load_dataset, split_labels, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::segnet::SegModel;

pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iter: usize,
    pub sup_loss: f64,
    pub reg_loss: f64,
    pub lambda: f64,
    pub metrics: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// Entries at evaluation points.
    pub history: Vec<HistoryEntry>,
    pub final_metrics: MetricReport,
    pub runtime_sec: f64,
}

#[derive(Clone, Debug)]
pub struct TrainingOutput {
    pub report: TrainReport,
    pub model: SegModel,
    /// Every step, including those without an evaluation.
    pub curves: Vec<HistoryEntry>,
}

#[derive(Serialize)]
struct CurveRow {
    iter: usize,
    sup_loss: f64,
    reg_loss: f64,
    lambda: f64,
    dice: Option<f64>,
    jaccard: Option<f64>,
    hd95: Option<f64>,
    asd: Option<f64>,
}

/// One CSV row per step; metric columns are empty between evaluations.
pub fn write_curves(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for h in history {
        let m = h.metrics;
        w.serialize(CurveRow {
            iter: h.iter,
            sup_loss: h.sup_loss,
            reg_loss: h.reg_loss,
            lambda: h.lambda,
            dice: m.map(|m| m.dice_pct),
            jaccard: m.map(|m| m.jaccard_pct),
            hd95: m.map(|m| m.hd95_px),
            asd: m.map(|m| m.asd_px),
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains on an in-memory dataset.
pub fn train_on(config: &TrainConfig, dataset: &Dataset) -> Result<TrainingOutput> {
    config.validate()?;
    let config = config.resolved();
    let m = &dataset.manifest;
    if config.arch.num_classes != m.c {
        return Err(Error::Mismatch(format!(
            "model predicts {} classes, dataset has {}",
            config.arch.num_classes, m.c
        )));
    }
    if dataset.eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labeled_idx = match config.labeled_fraction {
        Some(f) => split_labels(m.n_train, f, config.seed)?,
        None => m.labeled_indices.clone(),
    };
    if labeled_idx.is_empty() {
        return Err(Error::config("no labeled training samples"));
    }
    let labeled: Vec<&Sample> = labeled_idx.iter().map(|&i| &dataset.train[i]).collect();
    let unlabeled: Vec<&Tensor> = (0..m.n_train)
        .filter(|i| labeled_idx.binary_search(i).is_err())
        .map(|i| &dataset.train[i].image)
        .collect();

    let start = Instant::now();
    let model = SegModel::init(config.arch, config.seed)?;
    let mut state = TrainState::new(model, config.seed ^ super::STREAM_SALT);
    for _ in 0..config.total_iters {
        train_iteration(&mut state, &config, &labeled, &unlabeled)?;
        let due = config.eval_every > 0 && state.iter.is_multiple_of(config.eval_every);
        if due || state.iter == config.total_iters {
            let metrics = evaluate(&state.model, &dataset.eval)?;
            state.history.last_mut().expect("step recorded").metrics = Some(metrics);
        }
    }
    let final_metrics = state
        .history
        .last()
        .and_then(|h| h.metrics)
        .expect("final evaluation recorded");
    let report = TrainReport {
        config,
        history: state.history.iter().filter(|h| h.metrics.is_some()).cloned().collect(),
        final_metrics,
        runtime_sec: start.elapsed().as_secs_f64(),
    };
    Ok(TrainingOutput {
        report,
        model: state.model,
        curves: state.history,
    })
}

/// Loads the dataset, trains, and writes `report.json`, `curves.csv` and
/// `model.ckpt` into `out_dir`.
pub fn run_training(config: &TrainConfig, dataset_dir: &Path, out_dir: &Path) -> Result<TrainingOutput> {
    config.validate()?;
    let dataset = load_dataset(dataset_dir)?;
    let out = train_on(config, &dataset)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let report_path = out_dir.join(REPORT_FILE);
    let mut json = serde_json::to_string_pretty(&out.report).map_err(|e| Error::Json {
        path: report_path.clone(),
        source: e,
    })?;
    json.push('\n');
    std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    write_curves(&out_dir.join(CURVES_FILE), &out.curves)?;
    out.model.save_checkpoint(&out_dir.join(CHECKPOINT_FILE))?;
    Ok(out)
}

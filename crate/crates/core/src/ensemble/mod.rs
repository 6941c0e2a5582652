//! Slice-model training, ensemble voting, metrics and evaluation outputs.

pub mod metrics;
pub mod train;
pub mod vote;

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{SliceStore, SplitPlan, Task};
use crate::error::{Error, Result};
use crate::model::BotNet;

pub use metrics::{compute_metrics, roc_auc, Confusion, MetricsReport, RocPoint};
pub use train::{train_slice_models, SliceModelEntry, SliceModelSet, TrainConfig};
pub use vote::{ensemble_predict, majority_vote, PredictionRecord};

/// The headline columns: precision, recall, F1, ROC-AUC, holdout and validation accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub roc_auc: f64,
    pub holdout_accuracy: f64,
    pub validation_accuracy: f64,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub summary: SummaryRow,
    /// One row per held-out scan.
    pub holdout_scan: MetricsReport,
    /// Scans of one subject combined into one decision.
    pub holdout_subject: MetricsReport,
    /// Best validation accuracy of each slice model.
    pub slice_val_acc: Vec<f64>,
    pub evaluated_scans: usize,
    pub skipped_scans: usize,
}

/// Ensemble predictions for every held-out scan. Scans for which some slice
/// model produced no usable probability are skipped and counted.
pub fn predict_holdout(models: &[BotNet], store: &SliceStore, plan: &SplitPlan) -> Result<(Vec<PredictionRecord>, usize)> {
    if models.len() != store.slices {
        return Err(Error::Data(format!("{} slice models for {} stored slices", models.len(), store.slices)));
    }
    let test = plan.test_set();
    let per_slice = crate::parallel::map_range(models.len(), |s| -> Result<Vec<f64>> {
        let samples = store.samples(&test, s)?;
        train::predict_probs(&models[s], &samples, 32)
    });
    let per_slice = per_slice.into_iter().collect::<Result<Vec<_>>>()?;
    let scans: Vec<_> = store.scans.iter().filter(|e| test.contains(&e.subject_id)).collect();
    let mut records = Vec::with_capacity(scans.len());
    let mut skipped = 0;
    for (i, e) in scans.iter().enumerate() {
        let probs: Vec<Option<f64>> =
            per_slice.iter().map(|p| Some(p[i]).filter(|v| (0.0..=1.0).contains(v))).collect();
        match ensemble_predict(&e.subject_id, &e.scan_id, e.target, &probs) {
            Ok(r) => records.push(r),
            Err(err) => {
                warn!("{err}; scan skipped");
                skipped += 1;
            }
        }
    }
    Ok((records, skipped))
}

/// Combines scans per subject: majority of scan labels (ties to mean score ≥ 0.5), mean score.
pub fn subject_level(records: &[PredictionRecord]) -> Vec<(String, usize, f64, usize)> {
    let mut by: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        by.entry(&r.subject_id).or_default().push(r);
    }
    by.into_iter()
        .map(|(s, rs)| {
            let mean = rs.iter().map(|r| r.ensemble_prob).sum::<f64>() / rs.len() as f64;
            let ones = rs.iter().filter(|r| r.ensemble_label == 1).count();
            let label = match (2 * ones).cmp(&rs.len()) {
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Less => 0,
                std::cmp::Ordering::Equal => usize::from(mean >= 0.5),
            };
            (s.to_string(), label, mean, rs[0].true_label)
        })
        .collect()
}

pub fn build_report(task: Task, set: &SliceModelSet, records: &[PredictionRecord], skipped: usize) -> Result<EvalReport> {
    let pred: Vec<usize> = records.iter().map(|r| r.ensemble_label).collect();
    let score: Vec<f64> = records.iter().map(|r| r.ensemble_prob).collect();
    let truth: Vec<usize> = records.iter().map(|r| r.true_label).collect();
    let holdout_scan = compute_metrics(&pred, &score, &truth)?;
    let subj = subject_level(records);
    let holdout_subject = compute_metrics(
        &subj.iter().map(|s| s.1).collect::<Vec<_>>(),
        &subj.iter().map(|s| s.2).collect::<Vec<_>>(),
        &subj.iter().map(|s| s.3).collect::<Vec<_>>(),
    )?;
    let slice_val_acc: Vec<f64> = set.entries.iter().map(|e| e.val_acc).collect();
    let summary = SummaryRow {
        precision: holdout_scan.precision,
        recall: holdout_scan.recall,
        f1: holdout_scan.f1,
        roc_auc: holdout_scan.roc_auc,
        holdout_accuracy: holdout_scan.accuracy,
        validation_accuracy: slice_val_acc.iter().sum::<f64>() / slice_val_acc.len().max(1) as f64,
    };
    Ok(EvalReport {
        task,
        summary,
        holdout_scan,
        holdout_subject,
        slice_val_acc,
        evaluated_scans: records.len(),
        skipped_scans: skipped,
    })
}

pub fn write_predictions_csv(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let slices = records.first().map_or(0, |r| r.slice_probs.len());
    let mut header = vec!["subject_id".to_string(), "scan_id".to_string()];
    header.extend((0..slices).map(|i| format!("p_slice_{i}")));
    header.extend(["ensemble_prob", "ensemble_label", "true_label"].map(String::from));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.subject_id.clone(), r.scan_id.clone()];
        row.extend(r.slice_probs.iter().map(|p| p.to_string()));
        row.extend([r.ensemble_prob.to_string(), r.ensemble_label.to_string(), r.true_label.to_string()]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads the model set from `model_dir`, predicts the held-out scans, and
/// writes `metrics.json`, `roc.csv` and `predictions.csv` to `out_dir`.
pub fn evaluate(model_dir: &Path, store: &SliceStore, plan: &SplitPlan, out_dir: &Path) -> Result<EvalReport> {
    let set = SliceModelSet::load(model_dir)?;
    set.validate(store.slices)?;
    if set.task != store.task || set.task != plan.task {
        return Err(Error::Data(format!(
            "models are for {}, store for {}, split for {}",
            set.task, store.task, plan.task
        )));
    }
    let models = set.load_models(model_dir)?;
    let (records, skipped) = predict_holdout(&models, store, plan)?;
    let report = build_report(set.task, &set, &records, skipped)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mp = out_dir.join("metrics.json");
    std::fs::write(&mp, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&mp, e))?;
    metrics::write_roc_csv(&out_dir.join("roc.csv"), &report.holdout_scan.roc_points)?;
    write_predictions_csv(&out_dir.join("predictions.csv"), &records)?;
    Ok(report)
}

//! End-to-end evaluation: score, rank, threshold, report.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsrae::{fnv1a64, load_checkpoint, Mode, ModelParams, Sample};
use crate::error::{Error, Result};
use crate::grouprank::{
    apply_threshold, members_from_samples, partition_inference, rank_scores, RankBackend, ThresholdMode, GROUP_SIZE,
};
use crate::metrics::{average_precision, roc_auc, Confusion};
use crate::scalar::Scalar;
use crate::schema::{fit_on_train, PscRecord, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: Split,
    pub n: usize,
    pub n_detained: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// `None` when the split has a single class.
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub seed: u64,
    pub checkpoint_id: String,
    pub config_digest: String,
    pub mode: Mode,
    pub backend: String,
    /// Where the threshold came from (`"given"` or the default rule).
    pub threshold_source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub splits: Vec<SplitMetrics>,
    pub threshold: ThresholdMode,
    pub metadata: EvalMetadata,
}

impl EvalReport {
    pub fn split(&self, split: Split) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub label: bool,
    pub score: f64,
}

/// Splits that get a metrics block, in report order.
pub const EVAL_SPLITS: [Split; 2] = [Split::TestGlobal, Split::TestRegional];

/// Normalizes records with the checkpoint's statistics, falling back to
/// statistics fitted on the train split of `records`.
pub fn normalized_samples<T: Scalar>(params: &ModelParams<T>, records: &[PscRecord]) -> Result<Vec<Sample<T>>> {
    let stats = match &params.norm {
        Some(s) => s.clone(),
        None => fit_on_train(records)?,
    };
    Sample::from_records(records, &stats)
}

pub fn config_digest<T: Scalar>(params: &ModelParams<T>) -> Result<String> {
    let json = serde_json::to_vec(&(&params.arch, &params.hyper, params.mode))?;
    Ok(format!("{:016x}", fnv1a64(&json)))
}

/// Validation-split detention prevalence as a rate threshold.
pub fn default_threshold(records: &[PscRecord]) -> Result<ThresholdMode> {
    let val: Vec<&PscRecord> = records.iter().filter(|r| r.split == Split::Val).collect();
    let det = val.iter().filter(|r| r.detained).count();
    if det == 0 {
        return Err(Error::Config(
            "no detained validation records to derive a default threshold; pass one explicitly".into(),
        ));
    }
    Ok(ThresholdMode::Rate(det as f64 / val.len() as f64))
}

fn split_metrics(split: Split, ids: &[String], labels: &[bool], scores: &[f64], mode: ThresholdMode) -> Result<SplitMetrics> {
    let predictions = apply_threshold(ids, scores, mode)?;
    let confusion = Confusion::from_predictions(&predictions, labels)?;
    let both = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
    Ok(SplitMetrics {
        split,
        n: labels.len(),
        n_detained: labels.iter().filter(|&&l| l).count(),
        precision: confusion.precision(),
        recall: confusion.recall(),
        f_score: confusion.f_score(),
        auc: if both { Some(roc_auc(scores, labels)?) } else { None },
        ap: if both { Some(average_precision(scores, labels)?) } else { None },
        confusion,
    })
}

/// Scores the evaluation splits, ranks them through `backend` in groups of
/// 20, thresholds per split and computes metrics. Returns the report and
/// the per-record scores of the evaluated records.
pub fn evaluate_params<T: Scalar>(
    params: &ModelParams<T>,
    checkpoint_id: &str,
    records: &[PscRecord],
    backend: &dyn RankBackend,
    threshold: Option<ThresholdMode>,
    seed: u64,
) -> Result<(EvalReport, Vec<ScoreRow>)> {
    let (threshold, source) = match threshold {
        Some(t) => (t, "given".to_string()),
        None => (default_threshold(records)?, "default: validation prevalence".to_string()),
    };
    threshold.validate()?;
    let eval_records: Vec<PscRecord> = records
        .iter()
        .filter(|r| EVAL_SPLITS.contains(&r.split))
        .cloned()
        .collect();
    if eval_records.is_empty() {
        return Err(Error::invalid("dataset", "no test_global or test_regional records"));
    }
    let samples = normalized_samples(params, &eval_records)?;
    let members = members_from_samples(params, &samples)?;
    let groups = partition_inference(&members, GROUP_SIZE, seed);
    let ranked: HashMap<String, f64> = rank_scores(backend, &groups)?.into_iter().collect();
    let rows: Vec<ScoreRow> = eval_records
        .iter()
        .map(|r| ScoreRow {
            id: r.id.clone(),
            label: r.detained,
            score: ranked[&r.id],
        })
        .collect();
    let mut splits = Vec::new();
    for split in EVAL_SPLITS {
        let idx: Vec<usize> = (0..eval_records.len()).filter(|&i| eval_records[i].split == split).collect();
        if idx.is_empty() {
            continue;
        }
        let ids: Vec<String> = idx.iter().map(|&i| rows[i].id.clone()).collect();
        let labels: Vec<bool> = idx.iter().map(|&i| rows[i].label).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| rows[i].score).collect();
        splits.push(split_metrics(split, &ids, &labels, &scores, threshold)?);
    }
    let report = EvalReport {
        splits,
        threshold,
        metadata: EvalMetadata {
            seed,
            checkpoint_id: checkpoint_id.to_string(),
            config_digest: config_digest(params)?,
            mode: params.mode,
            backend: backend.tag().to_string(),
            threshold_source: source,
        },
    };
    Ok((report, rows))
}

/// [`evaluate_params`] on a checkpoint file; the checkpoint id is a digest
/// of its bytes.
pub fn evaluate(
    checkpoint: &Path,
    records: &[PscRecord],
    backend: &dyn RankBackend,
    threshold: Option<ThresholdMode>,
    seed: u64,
) -> Result<(EvalReport, Vec<ScoreRow>)> {
    let params: ModelParams<f64> = load_checkpoint(checkpoint)?;
    let id = format!("{:016x}", fnv1a64(&fs::read(checkpoint)?));
    evaluate_params(&params, &id, records, backend, threshold, seed)
}

pub fn write_scores_csv(rows: &[ScoreRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        line: 0,
        column: String::new(),
        message: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| Error::Csv {
        line: 0,
        column: String::new(),
        message: e.to_string(),
    };
    w.write_record(["id", "label", "score"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.id.as_str(), if r.label { "1" } else { "0" }, &r.score.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

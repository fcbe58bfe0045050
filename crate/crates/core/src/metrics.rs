//! Binary classification metrics and the experiment report.
//!
//! The positive class for F1 is fake (label 1); predictions threshold the fake
//! probability at 0.5.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::repmem::BlockStats;

pub const POSITIVE_CLASS: u8 = 1;
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn count(predictions: &[u8], labels: &[u8], positive: u8) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p == positive, y == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }
}

/// `2PR/(P+R)` for `positive`; zero whenever precision or recall is undefined.
pub fn f1_score(predictions: &[u8], labels: &[u8], positive: u8) -> f64 {
    let c = Confusion::count(predictions, labels, positive);
    if c.tp + c.fp == 0 || c.tp + c.fn_ == 0 {
        return 0.0;
    }
    let precision = c.tp as f64 / (c.tp + c.fp) as f64;
    let recall = c.tp as f64 / (c.tp + c.fn_) as f64;
    if precision + recall == 0.0 {
        return 0.0;
    }
    2.0 * precision * recall / (precision + recall)
}

pub fn accuracy(predictions: &[u8], labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Probability that a random positive outscores a random negative, ties counted
/// as one half. Computed exactly through mid-ranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&y| y == POSITIVE_CLASS).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric("AUROC needs both classes present".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based mid-rank of the tie group i..=j
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        let tied_positives = order[i..=j].iter().filter(|&&k| labels[k] == POSITIVE_CLASS).count();
        positive_rank_sum += mid_rank * tied_positives as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Hard predictions from fake-class probabilities.
pub fn predict(fake_probs: &[f64]) -> Vec<u8> {
    fake_probs.iter().map(|&p| u8::from(p > DECISION_THRESHOLD)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub f1: f64,
    pub auroc: f64,
    pub accuracy: f64,
}

impl TaskMetrics {
    pub fn evaluate(task: impl Into<String>, fake_probs: &[f64], labels: &[u8]) -> Result<Self> {
        let preds = predict(fake_probs);
        Ok(Self {
            task: task.into(),
            f1: f1_score(&preds, labels, POSITIVE_CLASS),
            auroc: auroc(fake_probs, labels)?,
            accuracy: accuracy(&preds, labels),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub strategy: String,
    pub config_hash: String,
    pub task_sequence: Vec<String>,
    pub positive_class: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: String,
    pub epoch: usize,
    /// Mean training loss terms over the epoch's minibatches.
    pub train: LossBreakdown,
    pub val_loss: f64,
    pub val_f1: f64,
    pub val_auroc: f64,
    /// Memory built over the validation split at epoch end, when the strategy uses it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<Vec<BlockStats>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub teacher_hash: String,
    /// Test metrics on every task seen so far, in sequence order.
    pub test: Vec<TaskMetrics>,
}

impl TaskResult {
    pub fn mean_f1(&self) -> f64 {
        self.test.iter().map(|m| m.f1).sum::<f64>() / self.test.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub meta: RunMeta,
    pub epochs: Vec<EpochRecord>,
    pub tasks: Vec<TaskResult>,
}

/// Serializable summary written next to the JSON Lines epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub meta: RunMeta,
    pub epochs_file: String,
    pub tasks: Vec<TaskResult>,
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub epochs: PathBuf,
    pub summary: PathBuf,
}

impl ReportPaths {
    pub fn for_stem(dir: &Path, stem: &str) -> Self {
        Self { epochs: dir.join(format!("{stem}.epochs.jsonl")), summary: dir.join(format!("{stem}.summary.json")) }
    }
}

/// Appends epoch records to a JSON Lines file, flushing after every line.
pub struct EpochLog {
    out: BufWriter<File>,
}

impl EpochLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Writes `<stem>.epochs.jsonl` and `<stem>.summary.json` under `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path, stem: &str) -> Result<ReportPaths> {
    let paths = ReportPaths::for_stem(dir, stem);
    let mut log = EpochLog::create(&paths.epochs)?;
    for e in &report.epochs {
        log.append(e)?;
    }
    let summary = ReportSummary {
        meta: report.meta.clone(),
        epochs_file: format!("{stem}.epochs.jsonl"),
        tasks: report.tasks.clone(),
    };
    let mut f = BufWriter::new(File::create(&paths.summary)?);
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(paths)
}

/// Reads back a report written by [`emit_report`].
pub fn read_report(dir: &Path, stem: &str) -> Result<ExperimentReport> {
    let paths = ReportPaths::for_stem(dir, stem);
    let summary: ReportSummary = serde_json::from_slice(&std::fs::read(&paths.summary)?)?;
    let epochs = std::fs::read_to_string(&paths.epochs)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
    Ok(ExperimentReport { meta: summary.meta, epochs, tasks: summary.tasks })
}

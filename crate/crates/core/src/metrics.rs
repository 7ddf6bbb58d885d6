//! Temporal IoU, mean IoU and Recall@1.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{MatrError, Result};
use crate::heads::Segment;

/// IoU threshold for Recall@1 (inclusive).
pub const RECALL_IOU: f64 = 0.5;

/// `|a ∩ b| / |a ∪ b|`, zero when the union is empty.
pub fn temporal_iou(a: &Segment, b: &Segment) -> f64 {
    let inter = (a.end_sec.min(b.end_sec) - a.start_sec.max(b.start_sec)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Identifies one (target, query) evaluation pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairId {
    pub target_id: String,
    pub query_id: String,
}

impl PairId {
    pub fn new(target_id: impl Into<String>, query_id: impl Into<String>) -> Self {
        PairId {
            target_id: target_id.into(),
            query_id: query_id.into(),
        }
    }
}

impl std::fmt::Display for PairId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.target_id, self.query_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub target_id: String,
    pub query_id: String,
    pub ground_truth: Segment,
    pub predicted: Option<Segment>,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub recall_at_1: f64,
    pub pairs: Vec<PairRecord>,
}

impl EvalReport {
    /// Plain-text summary table.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>8}", "metric", "value");
        let _ = writeln!(s, "{:<12} {:>8}", "pairs", self.pairs.len());
        let _ = writeln!(s, "{:<12} {:>8.4}", "mIoU", self.miou);
        let _ = writeln!(s, "{:<12} {:>8.4}", "R@1 IoU=0.5", self.recall_at_1);
        s
    }
}

/// Scores top-1 predictions against ground truth. Every ground-truth pair is
/// scored; a pair without a prediction gets IoU 0. Predictions for unknown
/// pairs are an error. Zero-length ground truth is rejected.
pub fn evaluate(
    predictions: &BTreeMap<PairId, Segment>,
    ground_truth: &BTreeMap<PairId, Segment>,
) -> Result<EvalReport> {
    let unknown: Vec<String> = predictions
        .keys()
        .filter(|k| !ground_truth.contains_key(*k))
        .map(ToString::to_string)
        .collect();
    if !unknown.is_empty() {
        return Err(MatrError::UnknownIds(unknown));
    }
    if let Some((id, _)) = ground_truth.iter().find(|(_, g)| !(g.length() > 0.0)) {
        return Err(MatrError::InvalidArgument(format!(
            "ground truth for {id} has zero length"
        )));
    }
    let mut pairs = Vec::with_capacity(ground_truth.len());
    for (id, gt) in ground_truth {
        let predicted = predictions.get(id).copied();
        let iou = predicted.map_or(0.0, |p| temporal_iou(&p, gt));
        pairs.push(PairRecord {
            target_id: id.target_id.clone(),
            query_id: id.query_id.clone(),
            ground_truth: *gt,
            predicted,
            iou,
        });
    }
    let n = pairs.len().max(1) as f64;
    let miou = pairs.iter().map(|p| p.iou).sum::<f64>() / n;
    let hits = pairs.iter().filter(|p| p.iou >= RECALL_IOU).count();
    Ok(EvalReport {
        miou,
        recall_at_1: hits as f64 / n,
        pairs,
    })
}

/// Distinct ids in a report, for sanity checks.
pub fn report_ids(report: &EvalReport) -> HashSet<PairId> {
    report
        .pairs
        .iter()
        .map(|p| PairId::new(p.target_id.clone(), p.query_id.clone()))
        .collect()
}

//! Temporal IoU and recall-at-rank evaluation.
//!
//! The headline metric is "R@n, IoU=m": the fraction of samples whose top n
//! ranked predictions include at least one interval with temporal IoU
//! strictly greater than m against the ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localize::TimeInterval;

/// Intersection over union of two intervals on the real line.
pub fn temporal_iou(a: &TimeInterval, b: &TimeInterval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.span() + b.span() - inter;
    inter / union
}

/// 1 if any of the top `min(n, len)` predictions overlaps `gt` with IoU
/// strictly above `m`, else 0.
pub fn recall_at(predictions: &[TimeInterval], gt: &TimeInterval, n: usize, m: f64) -> u32 {
    let top = predictions.len().min(n);
    for p in &predictions[..top] {
        if temporal_iou(p, gt) > m {
            return 1;
        }
    }
    0
}

/// Recall table over a dataset plus per-sample diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_values: Vec<usize>,
    pub m_values: Vec<f64>,
    /// recall[i][j] = mean recall at n_values[i], m_values[j].
    pub recall: Vec<Vec<f64>>,
    pub sample_count: usize,
    /// (sample_id, IoU of the top-ranked prediction).
    pub per_sample_top_iou: Vec<(String, f64)>,
}

impl EvalReport {
    /// Recall for one (n, m) cell.
    pub fn cell(&self, n: usize, m: f64) -> Option<f64> {
        let i = self.n_values.iter().position(|&v| v == n)?;
        let j = self.m_values.iter().position(|&v| (v - m).abs() < 1e-12)?;
        Some(self.recall[i][j])
    }

    /// Fixed-width text table, rows = n, columns = m.
    pub fn to_table_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:>8}", "R@n\\IoU"));
        for m in &self.m_values {
            out.push_str(&format!("{:>10.2}", m));
        }
        out.push('\n');
        for (i, n) in self.n_values.iter().enumerate() {
            out.push_str(&format!("{:>8}", format!("R@{n}")));
            for v in &self.recall[i] {
                out.push_str(&format!("{:>10.4}", v));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluate ranked predictions against ground truths, matched by sample id.
///
/// Every ground-truth sample must have a prediction entry and vice versa;
/// mismatches are reported by id.
pub fn evaluate_dataset(
    predictions: &[(String, Vec<TimeInterval>)],
    ground_truths: &[(String, TimeInterval)],
    n_values: &[usize],
    m_values: &[f64],
) -> Result<EvalReport> {
    if ground_truths.is_empty() {
        return Err(Error::Data("no ground-truth intervals to evaluate against".into()));
    }
    let pred_index: std::collections::HashMap<&str, &Vec<TimeInterval>> =
        predictions.iter().map(|(id, p)| (id.as_str(), p)).collect();
    if pred_index.len() != predictions.len() {
        return Err(Error::Data("duplicate sample id among predictions".into()));
    }
    let mut missing: Vec<&str> = ground_truths
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !pred_index.contains_key(id))
        .collect();
    if !missing.is_empty() {
        missing.truncate(5);
        return Err(Error::Data(format!(
            "samples without predictions: {}",
            missing.join(", ")
        )));
    }
    if predictions.len() != ground_truths.len() {
        return Err(Error::Data(format!(
            "{} predictions but {} ground truths",
            predictions.len(),
            ground_truths.len()
        )));
    }

    let mut recall = vec![vec![0.0; m_values.len()]; n_values.len()];
    let mut per_sample_top_iou = Vec::with_capacity(ground_truths.len());
    for (id, gt) in ground_truths {
        let preds = pred_index[id.as_str()];
        for (i, &n) in n_values.iter().enumerate() {
            for (j, &m) in m_values.iter().enumerate() {
                recall[i][j] += recall_at(preds, gt, n, m) as f64;
            }
        }
        let top_iou = preds.first().map(|p| temporal_iou(p, gt)).unwrap_or(0.0);
        per_sample_top_iou.push((id.clone(), top_iou));
    }
    let count = ground_truths.len() as f64;
    for row in &mut recall {
        for v in row.iter_mut() {
            *v /= count;
        }
    }
    Ok(EvalReport {
        n_values: n_values.to_vec(),
        m_values: m_values.to_vec(),
        recall,
        sample_count: ground_truths.len(),
        per_sample_top_iou,
    })
}

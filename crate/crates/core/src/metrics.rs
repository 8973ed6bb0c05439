//! Evaluation metrics: Jaccard score, F1, balanced accuracy and recall
//! grouped by last compression type and by compression count.
//!
//! Scores are percentages in [0, 100]. Corpus-level numbers concatenate the
//! frames of all windows before scoring (recorded in the report header);
//! per-window averaging is deliberately not offered.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::CompressionSpec;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label vectors differ in length: {truth} vs {prediction}")]
    LengthMismatch { truth: usize, prediction: usize },
}

/// A percentage score plus a degeneracy flag for conventions that kick in
/// when a quantity is undefined (empty index sets, absent classes,
/// zero-denominator precision/recall).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    fn exact(value: f64) -> Self {
        Score {
            value,
            degenerate: false,
        }
    }

    fn degenerate(value: f64) -> Self {
        Score {
            value,
            degenerate: true,
        }
    }
}

fn check_len(y: &[u8], y_hat: &[u8]) -> Result<(), MetricsError> {
    if y.len() != y_hat.len() {
        return Err(MetricsError::LengthMismatch {
            truth: y.len(),
            prediction: y_hat.len(),
        });
    }
    Ok(())
}

/// Confusion counts with class 1 (multiply compressed) as positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(y: &[u8], y_hat: &[u8]) -> Result<Self, MetricsError> {
        check_len(y, y_hat)?;
        let mut c = Confusion::default();
        for (&t, &p) in y.iter().zip(y_hat) {
            match (t != 0, p != 0) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Jaccard score over the index sets of one-entries, x100. When both sets
/// are empty the prediction agrees perfectly with the truth; that case
/// returns 100 with the degeneracy flag set.
pub fn jaccard(y: &[u8], y_hat: &[u8]) -> Result<Score, MetricsError> {
    let c = Confusion::from_labels(y, y_hat)?;
    let union = c.tp + c.fp + c.fn_;
    if union == 0 {
        return Ok(Score::degenerate(100.0));
    }
    Ok(Score::exact(100.0 * c.tp as f64 / union as f64))
}

/// F1 score (harmonic mean of precision and recall), class 1 positive, x100.
/// Zero-denominator cases return 0 with the degeneracy flag.
pub fn f1(y: &[u8], y_hat: &[u8]) -> Result<Score, MetricsError> {
    let c = Confusion::from_labels(y, y_hat)?;
    if c.tp + c.fp == 0 || c.tp + c.fn_ == 0 {
        return Ok(Score::degenerate(0.0));
    }
    let precision = c.tp as f64 / (c.tp + c.fp) as f64;
    let recall = c.tp as f64 / (c.tp + c.fn_) as f64;
    if precision + recall == 0.0 {
        return Ok(Score::degenerate(0.0));
    }
    Ok(Score::exact(
        100.0 * 2.0 * precision * recall / (precision + recall),
    ))
}

/// Balanced accuracy (mean of the two class recalls), x100. If the truth
/// holds only one class, returns the plain accuracy of that class with the
/// degeneracy flag.
pub fn balanced_accuracy(y: &[u8], y_hat: &[u8]) -> Result<Score, MetricsError> {
    let c = Confusion::from_labels(y, y_hat)?;
    let pos = c.tp + c.fn_;
    let neg = c.tn + c.fp;
    if pos == 0 && neg == 0 {
        return Ok(Score::degenerate(0.0));
    }
    if pos == 0 {
        return Ok(Score::degenerate(100.0 * c.tn as f64 / neg as f64));
    }
    if neg == 0 {
        return Ok(Score::degenerate(100.0 * c.tp as f64 / pos as f64));
    }
    let tpr = c.tp as f64 / pos as f64;
    let tnr = c.tn as f64 / neg as f64;
    Ok(Score::exact(100.0 * (tpr + tnr) / 2.0))
}

/// Metadata of one evaluated frame, carried from the forge manifest.
#[derive(Debug, Clone, Copy)]
pub struct FrameMeta {
    /// Ground-truth label: true = multiply compressed.
    pub multi: bool,
    /// Final compression applied to the frame's segment.
    pub last_type: CompressionSpec,
    /// Number of compressions the frame went through (1..=3).
    pub n_compressions: usize,
}

/// Recall tables grouped by last compression type and by compression count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupedRecall {
    /// Recall of class 1 among multiply-compressed frames, keyed by the
    /// segment's final compression type label (C64, V3, ...).
    pub by_last_type: BTreeMap<String, f64>,
    /// Recall per compression count: the single row reports recall of class
    /// 0, double/triple report recall of class 1, overall covers all
    /// multiply-compressed frames.
    pub single: Option<f64>,
    pub double: Option<f64>,
    pub triple: Option<f64>,
    pub overall_multi: Option<f64>,
    /// Groups skipped because no frame fell into them.
    pub empty_groups: Vec<String>,
}

/// Compute the recall tables from per-frame metadata and predictions.
pub fn grouped_recall(frames: &[FrameMeta], y_hat: &[u8]) -> Result<GroupedRecall, MetricsError> {
    if frames.len() != y_hat.len() {
        return Err(MetricsError::LengthMismatch {
            truth: frames.len(),
            prediction: y_hat.len(),
        });
    }

    struct Tally {
        correct: usize,
        total: usize,
    }
    let mut by_type: BTreeMap<String, Tally> = BTreeMap::new();
    let mut by_count = [(0usize, 0usize); 3]; // (correct, total) for n = 1, 2, 3
    let mut multi = (0usize, 0usize);

    for (meta, &pred) in frames.iter().zip(y_hat) {
        let pred_multi = pred != 0;
        if meta.multi {
            let t = by_type.entry(meta.last_type.type_label()).or_insert(Tally {
                correct: 0,
                total: 0,
            });
            t.total += 1;
            t.correct += usize::from(pred_multi);
            multi.1 += 1;
            multi.0 += usize::from(pred_multi);
        }
        let idx = meta.n_compressions.clamp(1, 3) - 1;
        by_count[idx].1 += 1;
        // Correct means matching the ground truth for the group's class.
        let correct = if meta.multi { pred_multi } else { !pred_multi };
        by_count[idx].0 += usize::from(correct);
    }

    let ratio = |(c, t): (usize, usize)| {
        if t == 0 {
            None
        } else {
            Some(100.0 * c as f64 / t as f64)
        }
    };
    let mut empty_groups = Vec::new();
    for (n, name) in [(0, "single"), (1, "double"), (2, "triple")] {
        if by_count[n].1 == 0 {
            empty_groups.push(name.to_string());
        }
    }
    Ok(GroupedRecall {
        by_last_type: by_type
            .into_iter()
            .map(|(k, t)| (k, 100.0 * t.correct as f64 / t.total as f64))
            .collect(),
        single: ratio(by_count[0]),
        double: ratio(by_count[1]),
        triple: ratio(by_count[2]),
        overall_multi: ratio(multi),
        empty_groups,
    })
}

/// Full evaluation report: the three headline metrics plus recall tables
/// and the underlying confusion counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Aggregation convention: all windows concatenated before scoring.
    pub aggregation: String,
    pub jaccard: Score,
    pub f1: Score,
    pub balanced_accuracy: Score,
    pub confusion: Confusion,
    pub recall: Option<GroupedRecall>,
}

impl EvalReport {
    pub fn from_labels(
        y: &[u8],
        y_hat: &[u8],
        frames: Option<&[FrameMeta]>,
    ) -> Result<Self, MetricsError> {
        let recall = frames.map(|f| grouped_recall(f, y_hat)).transpose()?;
        Ok(EvalReport {
            aggregation: "concatenated-frames".to_string(),
            jaccard: jaccard(y, y_hat)?,
            f1: f1(y, y_hat)?,
            balanced_accuracy: balanced_accuracy(y, y_hat)?,
            confusion: Confusion::from_labels(y, y_hat)?,
            recall,
        })
    }

    /// Plain-text tables in the layout of the reference report: one row of
    /// headline metrics, recall vs last compression type, recall vs number
    /// of compressions.
    pub fn render_tables(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "Performance metrics (aggregation: {})", self.aggregation).unwrap();
        writeln!(out, "{:<14} {:>10} {:>10}", "Jaccard Score", "F1-score", "Bal. Acc.").unwrap();
        writeln!(
            out,
            "{:<14.2} {:>10.2} {:>10.2}",
            self.jaccard.value, self.f1.value, self.balanced_accuracy.value
        )
        .unwrap();
        if let Some(recall) = &self.recall {
            writeln!(out).unwrap();
            writeln!(out, "Recall vs last MP3 compression type").unwrap();
            let mut header = String::new();
            let mut row = String::new();
            for (k, v) in &recall.by_last_type {
                write!(header, "{k:>8}").unwrap();
                write!(row, "{v:>8.2}").unwrap();
            }
            writeln!(out, "{header}").unwrap();
            writeln!(out, "{row}").unwrap();
            writeln!(out).unwrap();
            writeln!(out, "Recall vs number of MP3 compressions").unwrap();
            writeln!(
                out,
                "{:>8} {:>8} {:>8} {:>8}",
                "Single", "Double", "Triple", "Overall"
            )
            .unwrap();
            let cell = |v: Option<f64>| match v {
                Some(v) => format!("{v:>8.2}"),
                None => format!("{:>8}", "-"),
            };
            writeln!(
                out,
                "{} {} {} {}",
                cell(recall.single),
                cell(recall.double),
                cell(recall.triple),
                cell(recall.overall_multi)
            )
            .unwrap();
        }
        out
    }
}

//! External clustering evaluation against ground-truth labels.
//!
//! Pair-counting metrics treat every unordered sample pair as a binary
//! decision: TP pairs share a cluster in both labelings, FP only in the
//! prediction, FN only in the truth, TN in neither. NMI normalizes mutual
//! information by the geometric mean of the two entropies (natural logs).

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// All six scores, each in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmi: f64,
    #[serde(rename = "ri")]
    pub rand_index: f64,
    pub purity: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Scores a predicted labeling against the ground truth.
///
/// Degenerate cases are defined rather than rejected: a labeling with a
/// single cluster has zero entropy, so NMI is 0; when no pair is predicted
/// positive, precision is 1 if there was nothing to find (FN = 0) and 0
/// otherwise, and symmetrically for recall.
pub fn evaluate(pred: &[usize], truth: &[usize]) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            context: "evaluate",
            expected: format!("{} labels", truth.len()),
            found: format!("{}", pred.len()),
        });
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::InvalidArgument {
            name: "pred",
            reason: format!("need at least 2 samples, got {n}"),
        });
    }

    let mut joint: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut by_pred: BTreeMap<usize, u64> = BTreeMap::new();
    let mut by_truth: BTreeMap<usize, u64> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *joint.entry((p, t)).or_insert(0) += 1;
        *by_pred.entry(p).or_insert(0) += 1;
        *by_truth.entry(t).or_insert(0) += 1;
    }

    let total = pairs(n as u64);
    let tp: u64 = joint.values().map(|&c| pairs(c)).sum();
    let pred_pairs: u64 = by_pred.values().map(|&c| pairs(c)).sum();
    let truth_pairs: u64 = by_truth.values().map(|&c| pairs(c)).sum();
    let fp = pred_pairs - tp;
    let fn_ = truth_pairs - tp;
    let tn = total - tp - fp - fn_;

    let rand_index = (tp + tn) as f64 / total as f64;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else if fn_ == 0 {
        1.0
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else if fp == 0 {
        1.0
    } else {
        0.0
    };
    let f_score = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };

    // Purity: each predicted cluster votes for its dominant truth class.
    let mut purity_hits: u64 = 0;
    for (&p, _) in &by_pred {
        let best = joint
            .iter()
            .filter(|((jp, _), _)| *jp == p)
            .map(|(_, &c)| c)
            .max()
            .unwrap_or(0);
        purity_hits += best;
    }
    let purity = purity_hits as f64 / n as f64;

    let nf = n as f64;
    let entropy = |counts: &BTreeMap<usize, u64>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let q = c as f64 / nf;
                -q * q.ln()
            })
            .sum()
    };
    let h_pred = entropy(&by_pred);
    let h_truth = entropy(&by_truth);
    let nmi = if h_pred <= 0.0 || h_truth <= 0.0 {
        0.0
    } else {
        let mut mi = 0.0;
        for (&(p, t), &c) in &joint {
            let pj = c as f64 / nf;
            let pp = by_pred[&p] as f64 / nf;
            let pt = by_truth[&t] as f64 / nf;
            mi += pj * (pj / (pp * pt)).ln();
        }
        (mi / (h_pred * h_truth).sqrt()).clamp(0.0, 1.0)
    };

    Ok(MetricsReport {
        nmi,
        rand_index,
        purity,
        precision,
        recall,
        f_score,
    })
}

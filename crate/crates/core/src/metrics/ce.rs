use serde::{Deserialize, Serialize};

use super::labeler::FindingLabels;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged precision/recall/F1 over every (report, finding) cell.
/// Degenerate ratios (0/0) are reported as 0.
pub fn ce_metrics(refs: &[FindingLabels], hyps: &[FindingLabels]) -> Result<CeScores> {
    if refs.len() != hyps.len() {
        return Err(Error::Metric(format!(
            "{} reference label sets vs {} hypothesis label sets",
            refs.len(),
            hyps.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (r, h) in refs.iter().zip(hyps) {
        for (&rv, &hv) in r.0.iter().zip(&h.0) {
            match (rv, hv) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(CeScores {
        precision,
        recall,
        f1,
    })
}

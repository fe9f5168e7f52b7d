//! Text-generation and clinical-efficacy metrics.

mod bleu;
mod ce;
mod cider;
mod corpus;
pub mod labeler;
mod meteor;
mod rouge;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu, bleu_with, BleuConfig};
pub use ce::{ce_metrics, CeScores};
pub use cider::{cider, cider_with, CiderConfig};
pub use corpus::{Corpus, Pair};
pub use labeler::{label_findings, Finding, FindingLabels, NUM_FINDINGS};
pub use meteor::{crude_stem, meteor_lite, meteor_lite_pair};
pub use rouge::{rouge_l, rouge_l_pair};

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricConfig {
    pub bleu: BleuConfig,
    pub cider: CiderConfig,
}

/// One row of scores for a generated-vs-reference corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    /// Absent for corpora with fewer than two pairs.
    pub cider: Option<f64>,
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
}

impl EvalReport {
    pub const HEADER: [&'static str; 10] = [
        "BLEU-1",
        "BLEU-2",
        "BLEU-3",
        "BLEU-4",
        "CIDEr",
        "ROUGE-L",
        "METEOR",
        "Precision",
        "Recall",
        "F1",
    ];

    pub fn table(&self) -> String {
        let cider = self
            .cider
            .map_or_else(|| "-".to_string(), |c| format!("{c:.3}"));
        let values = [
            format!("{:.3}", self.bleu_1),
            format!("{:.3}", self.bleu_2),
            format!("{:.3}", self.bleu_3),
            format!("{:.3}", self.bleu_4),
            cider,
            format!("{:.3}", self.rouge_l),
            format!("{:.3}", self.meteor_lite),
            format!("{:.3}", self.ce_precision),
            format!("{:.3}", self.ce_recall),
            format!("{:.3}", self.ce_f1),
        ];
        let header: Vec<String> = Self::HEADER.iter().map(|h| format!("{h:>9}")).collect();
        let row: Vec<String> = values.iter().map(|v| format!("{v:>9}")).collect();
        format!("{}\n{}", header.join(" "), row.join(" "))
    }
}

/// Computes every metric on `corpus`.
pub fn evaluate_corpus(corpus: &Corpus, cfg: &MetricConfig) -> Result<EvalReport> {
    let b = |n| bleu_with(corpus, n, cfg.bleu);
    let refs: Vec<FindingLabels> = corpus
        .pairs()
        .iter()
        .map(|p| label_findings(&p.reference))
        .collect();
    let hyps: Vec<FindingLabels> = corpus
        .pairs()
        .iter()
        .map(|p| label_findings(&p.hypothesis))
        .collect();
    let ce = ce_metrics(&refs, &hyps)?;
    Ok(EvalReport {
        samples: corpus.len(),
        bleu_1: b(1)?,
        bleu_2: b(2)?,
        bleu_3: b(3)?,
        bleu_4: b(4)?,
        cider: if corpus.len() >= 2 {
            Some(cider_with(corpus, cfg.cider)?)
        } else {
            None
        },
        rouge_l: rouge_l(corpus),
        meteor_lite: meteor_lite(corpus),
        ce_precision: ce.precision,
        ce_recall: ce.recall,
        ce_f1: ce.f1,
    })
}

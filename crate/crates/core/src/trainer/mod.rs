//! Pre-training and fine-tuning loops, checkpoints, decoding and evaluation.

mod checkpoint;
mod config;
mod dataset;
mod decode;
mod session;

use std::path::Path;

use serde::Serialize;

pub use checkpoint::{Checkpoint, TensorMap};
pub use config::{DecodeConfig, DecodeStrategy, Preset, RunConfig, Stage};
pub use dataset::{Dataset, Example};
pub use decode::{Evaluation, Generator};
pub use session::{
    finetune_loss, train, EpochRecord, NllRecord, Outcome, Session, Start, StepRecord,
};

use crate::metrics::EvalReport;
use crate::{Error, Result};

/// Evaluation record as written next to the printed table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRecord<'a> {
    pub split: &'a str,
    #[serde(flatten)]
    pub scores: &'a EvalReport,
}

/// Writes the flat JSON record of an evaluation.
pub fn write_report(path: &Path, split: &str, eval: &Evaluation) -> Result<()> {
    let rec = ReportRecord {
        split,
        scores: &eval.report,
    };
    let text = serde_json::to_string_pretty(&rec)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

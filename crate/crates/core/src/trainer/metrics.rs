use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{MsvedError, Result};
use crate::objectives::{Mode, ObjectiveTerms};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub mode: Mode,
    pub batch: String,
    pub labeled_examples: usize,
    pub unlabeled_examples: usize,
    pub terms: ObjectiveTerms,
    pub lambda: f64,
    pub tau: f64,
    pub alpha: f64,
    pub grad_norm: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub steps: u64,
    pub mean_objective: f64,
    pub dev_accuracy: f64,
    pub best_dev_accuracy: f64,
    pub improved: bool,
    pub finished: bool,
    pub seed: u64,
}

/// One JSON object per line, tagged with `"record"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step(Box<StepRecord>),
    Epoch(EpochRecord),
}

pub fn write_record(out: &mut dyn Write, record: &MetricsRecord) -> Result<()> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    out.write_all(&line).map_err(|e| MsvedError::io("writing metrics", e))
}

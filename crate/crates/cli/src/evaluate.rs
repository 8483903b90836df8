use serde::{Deserialize, Serialize};

use tabgen_core::corpus::Vocab;
use tabgen_core::decoding::{decode_table, DecodingConfig, TraceEntry};
use tabgen_core::metrics::{score_corpus, AlignmentMode, CorpusScore};
use tabgen_core::model::{Cell, Model};
use tabgen_core::training::{evaluation_loss, prepare_example, TrainingConfig};
use tabgen_core::DatasetRecord;

use crate::error::CliResult;

/// Per-record decoding diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordTrace {
    pub id: String,
    pub predicted_count: Option<f64>,
    pub outer_iterations: usize,
    pub truncated: Vec<Cell>,
    pub commits: Vec<TraceEntry>,
}

/// Decodes every record under its own headers.
pub fn decode_records(
    model: &Model,
    vocab: &Vocab,
    records: &[DatasetRecord],
    cfg: &DecodingConfig,
) -> CliResult<(Vec<DatasetRecord>, Vec<RecordTrace>)> {
    let mut preds = Vec::with_capacity(records.len());
    let mut traces = Vec::with_capacity(records.len());
    for r in records {
        let out = decode_table(model, vocab, &r.text, &r.table.headers, cfg)?;
        traces.push(RecordTrace {
            id: r.id.clone(),
            predicted_count: out.predicted_count,
            outer_iterations: out.outer_iterations,
            truncated: out.truncated,
            commits: out.trace,
        });
        preds.push(DatasetRecord {
            id: r.id.clone(),
            text: r.text.clone(),
            table: out.table,
        });
    }
    Ok((preds, traces))
}

/// One metrics-log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLine {
    pub step: u64,
    pub nll: f64,
    pub mse: f64,
    pub cell_f1: f64,
    pub count_accuracy: f64,
}

/// Held-out loss plus decoded-table scores.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    records: &[DatasetRecord],
    training: &TrainingConfig,
    decoding: &DecodingConfig,
    mode: &AlignmentMode,
    step: u64,
) -> CliResult<(EvalLine, CorpusScore)> {
    let examples = records
        .iter()
        .map(|r| prepare_example(r, vocab, model, training.semi_templated))
        .collect::<Result<Vec<_>, _>>()?;
    let (nll, mse) = evaluation_loss(model, &examples, training)?;
    let (preds, _) = decode_records(model, vocab, records, decoding)?;
    let score = score_corpus(&preds, records, mode)?;
    let line = EvalLine {
        step,
        nll,
        mse,
        cell_f1: score.f1,
        count_accuracy: score.count_accuracy,
    };
    Ok((line, score))
}

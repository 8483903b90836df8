use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tabgen_core::corpus::read_jsonl;
use tabgen_core::fsutil::{atomic_write, file_sha256};
use tabgen_core::metrics::{score_corpus, AlignmentMode, CorpusScore};

use crate::decode::{meta_path, PredictionMeta};
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: AlignmentMode,
    pub pred_sha256: String,
    pub gold_sha256: String,
    pub run_config_hash: Option<String>,
    #[serde(flatten)]
    pub score: CorpusScore,
}

#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub pred: PathBuf,
    pub gold: PathBuf,
    pub mode: AlignmentMode,
    pub out: Option<PathBuf>,
    pub force: bool,
}

/// `assignment` or `keyed:<column>`.
pub fn parse_mode(s: &str) -> CliResult<AlignmentMode> {
    match s.split_once(':') {
        None if s == "assignment" => Ok(AlignmentMode::Assignment),
        Some(("keyed", col)) if !col.is_empty() => Ok(AlignmentMode::Keyed(col.to_string())),
        _ => Err(CliError::Usage(format!(
            "unknown alignment mode {s:?}; expected `assignment` or `keyed:<column>`"
        ))),
    }
}

fn read_meta(pred: &Path) -> CliResult<Option<PredictionMeta>> {
    let path = meta_path(pred);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn run(args: &EvalArgs) -> CliResult<EvalReport> {
    let gold_sha256 = file_sha256(&args.gold)?;
    let meta = read_meta(&args.pred)?;
    if let Some(m) = &meta {
        if m.corpus_hash != gold_sha256 && !args.force {
            return Err(CliError::Data(format!(
                "{} were decoded from a corpus with hash {}, but {} has hash {}; pass --force to score anyway",
                args.pred.display(),
                m.corpus_hash,
                args.gold.display(),
                gold_sha256
            )));
        }
    }
    let pred = read_jsonl(&args.pred)?;
    let gold = read_jsonl(&args.gold)?;
    let score = score_corpus(&pred, &gold, &args.mode)?;
    let report = EvalReport {
        mode: args.mode.clone(),
        pred_sha256: file_sha256(&args.pred)?,
        gold_sha256,
        run_config_hash: meta.and_then(|m| m.run_config_hash),
        score,
    };
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        atomic_write(out, json.as_bytes())?;
    }
    Ok(report)
}

/// Aligned text rendering of a corpus score.
pub fn render(score: &CorpusScore) -> String {
    let width = score.per_column.keys().map(|k| k.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>6}  {:>6}  {:>6}  {:>8}  {:>9}  {:>6}",
        "column", "P", "R", "F1", "correct", "predicted", "gold"
    );
    let mut row = |name: &str, p: f64, r: f64, f: f64, c: &tabgen_core::metrics::Counts| {
        let _ = writeln!(
            s,
            "{name:<width$}  {:>6.2}  {:>6.2}  {:>6.2}  {:>8}  {:>9}  {:>6}",
            100.0 * p,
            100.0 * r,
            100.0 * f,
            c.correct,
            c.predicted,
            c.gold
        );
    };
    for (name, c) in &score.per_column {
        row(name, c.precision, c.recall, c.f1, &c.counts);
    }
    row("all", score.precision, score.recall, score.f1, &score.counts);
    let _ = writeln!(
        s,
        "tables {}  row-count accuracy {:.2}",
        score.n_tables,
        100.0 * score.count_accuracy
    );
    s
}

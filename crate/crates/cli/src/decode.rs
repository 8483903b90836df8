use std::ffi::OsString;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tabgen_core::corpus::{read_jsonl, write_jsonl};
use tabgen_core::decoding::DecodingConfig;
use tabgen_core::fsutil::{atomic_write, file_sha256};
use tabgen_core::model::Checkpoint;

use crate::config::{effective_decoding, read_text};
use crate::error::{CliError, CliResult};
use crate::evaluate::decode_records;
use crate::train::checkpoint_run_config;

/// Provenance written next to every predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub run_config_hash: Option<String>,
    pub checkpoint_sha256: String,
    pub corpus_hash: String,
    pub decoding: DecodingConfig,
    pub n_records: usize,
    pub outer_iterations: usize,
}

#[derive(Clone, Debug, Default)]
pub struct DecodeArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    /// Decoding TOML replacing the settings stored with the checkpoint.
    pub config: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub k: Option<usize>,
}

/// `<path>.<suffix>`, keeping the original extension.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn meta_path(predictions: &Path) -> PathBuf {
    sidecar(predictions, "meta.json")
}

pub fn run(args: &DecodeArgs) -> CliResult<PredictionMeta> {
    let ck = Checkpoint::load(&args.checkpoint)
        .map_err(|e| CliError::Model(format!("{}: {e}", args.checkpoint.display())))?;
    let run_config = checkpoint_run_config(&ck);
    let base = match &args.config {
        Some(p) => toml::from_str::<DecodingConfig>(&read_text(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => run_config.as_ref().map(|c| c.decoding.clone()).unwrap_or_default(),
    };
    let mut decoding = base;
    if let Some(k) = args.k {
        decoding.k = k;
    }
    let training = run_config.as_ref().map(|c| c.training.clone()).unwrap_or_default();
    let decoding = effective_decoding(&decoding, &training);
    decoding.validate()?;

    let records = read_jsonl(&args.dataset)?;
    let (preds, traces) = decode_records(&ck.model, &ck.vocab, &records, &decoding)?;
    write_jsonl(&preds, &args.out)?;
    if let Some(path) = &args.trace {
        let mut buf = String::new();
        for t in &traces {
            buf.push_str(&serde_json::to_string(t).expect("trace serializes"));
            buf.push('\n');
        }
        atomic_write(path, buf.as_bytes())?;
    }
    let meta = PredictionMeta {
        run_config_hash: run_config.as_ref().map(|c| c.hash()),
        checkpoint_sha256: file_sha256(&args.checkpoint)?,
        corpus_hash: file_sha256(&args.dataset)?,
        decoding,
        n_records: preds.len(),
        outer_iterations: traces.iter().map(|t| t.outer_iterations).sum(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    atomic_write(&meta_path(&args.out), json.as_bytes())?;
    Ok(meta)
}

use std::path::Path;

use tabgen_core::corpus::{generate, write_jsonl, CorpusSpec};

use crate::config::{read_text, seed_override};
use crate::error::CliResult;

/// Generates the corpus described by the spec file; returns the record count.
pub fn run(spec_path: &Path, out: &Path) -> CliResult<usize> {
    let mut spec = CorpusSpec::from_toml(&read_text(spec_path)?)?;
    if let Some(seed) = seed_override()? {
        spec.seed = seed;
    }
    let records: Vec<_> = generate(&spec)?.collect();
    write_jsonl(&records, out)?;
    Ok(records.len())
}

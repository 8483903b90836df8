//! Synthetic text→table datasets, the word-level vocabulary and JSONL I/O.

mod generate;
mod jsonl;
mod spec;
mod vocab;

pub use generate::{generate, generate_record, ORDINALS};
pub use jsonl::{read_jsonl, write_jsonl};
pub use spec::{ColumnSpec, CorpusSpec, Task, ValueGen};
pub use vocab::{build_vocab, tokenize, TokenId, Vocab, BOS, EOC, NULL, PAD};

pub use crate::table::{DatasetRecord, Table};

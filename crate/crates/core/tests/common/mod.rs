//! Small fixtures shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use tabgen_core::corpus::{build_vocab, DatasetRecord, Table, Vocab};
use tabgen_core::model::{Model, ModelConfig};
use tabgen_core::numerics::Tensor;
use tabgen_core::seed;

pub fn record(id: &str, text: &str, headers: &[&str], rows: &[&[Option<&str>]]) -> DatasetRecord {
    DatasetRecord {
        id: id.to_string(),
        text: text.to_string(),
        table: Table::new(
            headers.iter().map(|h| h.to_string()).collect(),
            rows.iter()
                .map(|r| r.iter().map(|c| c.map(str::to_string)).collect())
                .collect(),
        ),
    }
}

/// A 2×2 record: two items with a name and a quantity.
pub fn two_by_two() -> DatasetRecord {
    record(
        "toy-2x2",
        "first item : name pear , qty 3 . second item : name fig , qty 5 .",
        &["name", "qty"],
        &[&[Some("pear"), Some("3")], &[Some("fig"), Some("5")]],
    )
}

pub fn two_by_one() -> DatasetRecord {
    record(
        "toy-2x1",
        "first item : name pear . second item : name fig .",
        &["name"],
        &[&[Some("pear")], &[Some("fig")]],
    )
}

pub fn tiny_config(vocab: &Vocab, max_rows: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(vocab.len());
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.max_rows = max_rows;
    cfg.max_cols = 4;
    cfg.rel_buckets = 8;
    cfg.rel_max_distance = 32;
    cfg.dropout = 0.0;
    cfg
}

/// A frozen model whose every parameter is perturbed off its initialisation.
pub fn frozen_model(records: &[DatasetRecord], max_rows: usize, seed_value: u64) -> (Model, Vocab) {
    let vocab = build_vocab(records, max_rows);
    let mut model = Model::new(tiny_config(&vocab, max_rows), seed_value).unwrap();
    let mut rng = seed::rng(&[seed_value, 99]);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for x in model.store.value_mut(id).data_mut() {
            *x += noise.sample(&mut rng);
        }
    }
    (model, vocab)
}

pub fn memory(model: &Model, vocab: &Vocab, text: &str) -> Arc<Tensor> {
    model.memory(&model.source_ids(vocab, text).unwrap()).unwrap()
}

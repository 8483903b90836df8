use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::seed;
use crate::table::{DatasetRecord, Table};

use super::spec::{ColumnSpec, CorpusSpec, Task, ValueGen};

pub const ORDINALS: &[&str] = &[
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth", "eleventh",
    "twelfth",
];

const DISTRACTORS: &[&str] = &[
    "thank you for your order .",
    "all sales are final .",
    "please keep this note .",
    "delivery is free today .",
    "see you again soon .",
    "questions go to the front desk .",
];

/// Validates `spec` and yields its records lazily. Each record is drawn from
/// its own stream keyed by (seed, index), so any slice can be regenerated.
pub fn generate(spec: &CorpusSpec) -> Result<impl Iterator<Item = DatasetRecord> + '_> {
    spec.validate()?;
    Ok((0..spec.n_examples).map(move |i| generate_record(spec, i)))
}

/// Record `index` of a validated spec.
pub fn generate_record(spec: &CorpusSpec, index: usize) -> DatasetRecord {
    let mut rng = seed::rng(&[spec.seed, index as u64]);
    let (lo, hi) = spec.row_range();
    let n_rows = rng.random_range(lo..=hi);
    let cols = spec.value_columns();
    let (table, text) = match spec.task {
        Task::Keyvalue => keyvalue(spec, &cols, &mut rng),
        Task::Lineitems => lineitems(spec, &cols, n_rows, &mut rng),
        Task::Dependent => dependent(spec, &cols, n_rows, &mut rng),
    };
    DatasetRecord {
        id: format!("{}-{}-{index:06}", spec.task.as_str(), spec.seed),
        text,
        table,
    }
}

fn draw(values: &ValueGen, rng: &mut ChaCha8Rng) -> String {
    match values {
        ValueGen::Int { min, max } => rng.random_range(*min..=*max).to_string(),
        ValueGen::Word { pool } => pool.choose(rng).expect("validated").clone(),
        ValueGen::Phrase {
            pool,
            min_words,
            max_words,
        } => {
            let n = rng.random_range(*min_words..=*max_words);
            (0..n)
                .map(|_| pool.choose(rng).expect("validated").as_str())
                .collect::<Vec<_>>()
                .join(" ")
        }
    }
}

fn draw_cell(spec: &CorpusSpec, col: &ColumnSpec, rng: &mut ChaCha8Rng) -> Option<String> {
    if col.optional && rng.random_bool(spec.null_rate) {
        None
    } else {
        Some(draw(&col.values, rng))
    }
}

/// Joins sentences, inserting a distractor at each boundary with `noise_rate`.
fn with_noise(spec: &CorpusSpec, sentences: Vec<String>, rng: &mut ChaCha8Rng) -> String {
    let mut out: Vec<String> = Vec::new();
    for s in sentences {
        if rng.random_bool(spec.noise_rate) {
            out.push(DISTRACTORS.choose(rng).expect("non-empty").to_string());
        }
        out.push(s);
    }
    if rng.random_bool(spec.noise_rate) {
        out.push(DISTRACTORS.choose(rng).expect("non-empty").to_string());
    }
    out.join(" ")
}

fn keyvalue(spec: &CorpusSpec, cols: &[ColumnSpec], rng: &mut ChaCha8Rng) -> (Table, String) {
    let row: Vec<Option<String>> = cols.iter().map(|c| draw_cell(spec, c, rng)).collect();
    let mut sentences: Vec<String> = cols
        .iter()
        .zip(&row)
        .filter_map(|(c, v)| v.as_ref().map(|v| format!("the {} is {v} .", c.name)))
        .collect();
    sentences.shuffle(rng);
    let headers = cols.iter().map(|c| c.name.clone()).collect();
    (Table::new(headers, vec![row]), with_noise(spec, sentences, rng))
}

fn row_sentence(r: usize, cols: &[ColumnSpec], row: &[Option<String>]) -> String {
    let parts: Vec<String> = cols
        .iter()
        .zip(row)
        .filter_map(|(c, v)| v.as_ref().map(|v| format!("{} {v}", c.name)))
        .collect();
    format!("{} item : {} .", ORDINALS[r], parts.join(" , "))
}

fn lineitems(spec: &CorpusSpec, cols: &[ColumnSpec], n_rows: usize, rng: &mut ChaCha8Rng) -> (Table, String) {
    let rows: Vec<Vec<Option<String>>> = (0..n_rows)
        .map(|_| cols.iter().map(|c| draw_cell(spec, c, rng)).collect())
        .collect();
    let sentences = rows
        .iter()
        .enumerate()
        .map(|(r, row)| row_sentence(r, cols, row))
        .collect();
    let headers = cols.iter().map(|c| c.name.clone()).collect();
    (Table::new(headers, rows), with_noise(spec, sentences, rng))
}

fn dependent(spec: &CorpusSpec, cols: &[ColumnSpec], n_rows: usize, rng: &mut ChaCha8Rng) -> (Table, String) {
    let dep = spec.dependency_rule().expect("dependent task");
    let key = cols.iter().position(|c| c.name == dep.key).expect("validated");
    let factors: Vec<usize> = dep
        .factors
        .iter()
        .map(|f| cols.iter().position(|c| &c.name == f).expect("validated"))
        .collect();
    let ValueGen::Word { pool } = &cols[key].values else {
        unreachable!("validated")
    };
    let names: Vec<&String> = pool.choose_multiple(rng, n_rows).collect();

    let mut rows = Vec::with_capacity(n_rows);
    for name in &names {
        let mut row: Vec<Option<String>> = cols
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == key {
                    Some((*name).clone())
                } else {
                    draw_cell(spec, c, rng)
                }
            })
            .collect();
        let total: u64 = factors
            .iter()
            .map(|&f| row[f].as_ref().expect("required").parse::<u64>().expect("digits"))
            .product();
        row.insert(0, Some(total.to_string()));
        rows.push(row);
    }

    let mut sentences: Vec<String> = rows
        .iter()
        .enumerate()
        .map(|(r, row)| row_sentence(r, cols, &row[1..]))
        .collect();
    let mut cues: Vec<String> = rows
        .iter()
        .map(|row| {
            format!(
                "the {} line comes to {} .",
                row[key + 1].as_ref().expect("key"),
                row[0].as_ref().expect("total")
            )
        })
        .collect();
    cues.shuffle(rng);
    sentences.extend(cues);
    let mut headers = vec![dep.target.clone()];
    headers.extend(cols.iter().map(|c| c.name.clone()));
    (Table::new(headers, rows), with_noise(spec, sentences, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let mut spec = CorpusSpec::new(Task::Keyvalue, 5, 7);
        spec.columns.clear();
        let a: Vec<_> = generate(&spec).unwrap().collect();
        let b: Vec<_> = generate(&spec).unwrap().collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.table.n_rows() == 1));
    }

    #[test]
    fn dependent_target_is_product() {
        let mut spec = CorpusSpec::new(Task::Dependent, 50, 11);
        spec.min_rows = 2;
        for rec in generate(&spec).unwrap() {
            assert_eq!(rec.table.headers, ["total", "name", "qty", "price"]);
            for row in &rec.table.rows {
                let n = |i: usize| row[i].as_ref().unwrap().parse::<u64>().unwrap();
                assert_eq!(n(0), n(2) * n(3));
            }
        }
    }

    #[test]
    fn row_count_mean_matches_uniform() {
        let spec = CorpusSpec::new(Task::Lineitems, 10_000, 5);
        let total: usize = generate(&spec).unwrap().map(|r| r.table.n_rows()).sum();
        let mean = total as f64 / 10_000.0;
        assert!((mean - 3.0).abs() < 0.05, "{mean}");
    }
}

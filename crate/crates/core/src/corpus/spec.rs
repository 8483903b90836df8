use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::generate::ORDINALS;
use super::vocab::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// One row of `the <header> is <value> .` sentences in random order.
    Keyvalue,
    /// One sentence per row listing its attributes.
    Lineitems,
    /// Line items plus a product column whose cue sentences all come after
    /// the last row, keyed by the row's name.
    Dependent,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Keyvalue => "keyvalue",
            Task::Lineitems => "lineitems",
            Task::Dependent => "dependent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ValueGen {
    /// Uniform integer rendered as digits.
    Int { min: u32, max: u32 },
    /// One word from the pool.
    Word { pool: Vec<String> },
    /// `min_words..=max_words` words from the pool joined by spaces.
    Phrase {
        pool: Vec<String>,
        min_words: usize,
        max_words: usize,
    },
}

impl ValueGen {
    fn max_tokens(&self) -> usize {
        match self {
            ValueGen::Int { .. } | ValueGen::Word { .. } => 1,
            ValueGen::Phrase { max_words, .. } => *max_words,
        }
    }

    fn pool(&self) -> &[String] {
        match self {
            ValueGen::Int { .. } => &[],
            ValueGen::Word { pool } | ValueGen::Phrase { pool, .. } => pool,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub values: ValueGen,
    /// Optional columns are NULL with probability `null_rate`.
    #[serde(default)]
    pub optional: bool,
}

impl ColumnSpec {
    pub fn new(name: &str, values: ValueGen, optional: bool) -> Self {
        ColumnSpec {
            name: name.to_string(),
            values,
            optional,
        }
    }
}

/// `target = product of factors`, cued by `the <key> line comes to <target> .`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DependencySpec {
    pub target: String,
    pub key: String,
    pub factors: Vec<String>,
}

impl Default for DependencySpec {
    fn default() -> Self {
        DependencySpec {
            target: "total".into(),
            key: "name".into(),
            factors: vec!["qty".into(), "price".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub task: Task,
    pub n_examples: usize,
    pub seed: u64,
    /// Row counts are uniform over `min_rows..=max_rows` (ignored for keyvalue).
    #[serde(default = "defaults::min_rows")]
    pub min_rows: usize,
    #[serde(default = "defaults::max_rows")]
    pub max_rows: usize,
    #[serde(default = "defaults::null_rate")]
    pub null_rate: f64,
    /// Probability of a distractor sentence at each sentence boundary.
    #[serde(default = "defaults::noise_rate")]
    pub noise_rate: f64,
    /// Cell slot length l; cell content is at most l−1 tokens.
    #[serde(default = "defaults::max_cell_len")]
    pub max_cell_len: usize,
    #[serde(default = "defaults::table_max_rows")]
    pub table_max_rows: usize,
    #[serde(default = "defaults::table_max_cols")]
    pub table_max_cols: usize,
    /// Empty means the task's built-in schema.
    #[serde(default)]
    pub columns: Vec<ColumnSpec>,
    #[serde(default)]
    pub dependency: Option<DependencySpec>,
}

mod defaults {
    pub fn min_rows() -> usize {
        1
    }
    pub fn max_rows() -> usize {
        5
    }
    pub fn null_rate() -> f64 {
        0.2
    }
    pub fn noise_rate() -> f64 {
        0.2
    }
    pub fn max_cell_len() -> usize {
        2
    }
    pub fn table_max_rows() -> usize {
        8
    }
    pub fn table_max_cols() -> usize {
        8
    }
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

pub(crate) const ITEM_NAMES: &[&str] = &[
    "apple", "banana", "cherry", "grape", "lemon", "mango", "melon", "orange", "peach", "pear", "plum", "kiwi", "lime",
    "fig", "date", "olive",
];
const COLORS: &[&str] = &["red", "green", "blue", "yellow", "black", "white", "purple", "brown"];
const VENDORS: &[&str] = &["acme", "globex", "initech", "umbrella", "hooli", "vandelay", "stark"];
const CITIES: &[&str] = &["paris", "berlin", "madrid", "rome", "vienna", "oslo", "lisbon"];
const CURRENCIES: &[&str] = &["usd", "eur", "gbp", "chf"];

impl CorpusSpec {
    pub fn new(task: Task, n_examples: usize, seed: u64) -> Self {
        CorpusSpec {
            task,
            n_examples,
            seed,
            min_rows: if task == Task::Dependent {
                2
            } else {
                defaults::min_rows()
            },
            max_rows: defaults::max_rows(),
            null_rate: defaults::null_rate(),
            noise_rate: defaults::noise_rate(),
            max_cell_len: defaults::max_cell_len(),
            table_max_rows: defaults::table_max_rows(),
            table_max_cols: defaults::table_max_cols(),
            columns: Vec::new(),
            dependency: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("corpus spec: {e}")))
    }

    /// The value columns, before a dependency target is added.
    pub fn value_columns(&self) -> Vec<ColumnSpec> {
        if !self.columns.is_empty() {
            return self.columns.clone();
        }
        let int = |min, max| ValueGen::Int { min, max };
        let word = |ws: &[&str]| ValueGen::Word { pool: words(ws) };
        match self.task {
            Task::Keyvalue => vec![
                ColumnSpec::new("vendor", word(VENDORS), false),
                ColumnSpec::new("city", word(CITIES), false),
                ColumnSpec::new("amount", int(1, 99), false),
                ColumnSpec::new("currency", word(CURRENCIES), true),
            ],
            Task::Lineitems => vec![
                ColumnSpec::new("name", word(ITEM_NAMES), false),
                ColumnSpec::new("qty", int(1, 9), false),
                ColumnSpec::new("price", int(1, 20), false),
                ColumnSpec::new("color", word(COLORS), true),
            ],
            Task::Dependent => vec![
                ColumnSpec::new("name", word(ITEM_NAMES), false),
                ColumnSpec::new("qty", int(1, 9), false),
                ColumnSpec::new("price", int(1, 9), false),
            ],
        }
    }

    pub fn dependency_rule(&self) -> Option<DependencySpec> {
        match self.task {
            Task::Dependent => Some(self.dependency.clone().unwrap_or_default()),
            _ => None,
        }
    }

    /// Table headers: the dependency target (if any) first, then value columns.
    pub fn headers(&self) -> Vec<String> {
        let mut h: Vec<String> = self.dependency_rule().map(|d| d.target).into_iter().collect();
        h.extend(self.value_columns().into_iter().map(|c| c.name));
        h
    }

    pub fn row_range(&self) -> (usize, usize) {
        match self.task {
            Task::Keyvalue => (1, 1),
            _ => (self.min_rows, self.max_rows),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (lo, hi) = self.row_range();
        if lo > hi {
            return bad(format!("min_rows {lo} exceeds max_rows {hi}"));
        }
        if hi > ORDINALS.len() {
            return bad(format!("at most {} rows are supported", ORDINALS.len()));
        }
        if hi > self.table_max_rows {
            return bad(format!("max_rows {hi} exceeds the table limit {}", self.table_max_rows));
        }
        if !(0.0..=1.0).contains(&self.null_rate) || !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("null_rate and noise_rate must lie in [0, 1]".into());
        }
        if self.max_cell_len < 2 {
            return bad("max_cell_len must be at least 2".into());
        }
        if self.task == Task::Dependent && lo < 2 {
            return bad("the dependent task needs min_rows >= 2".into());
        }
        if self.task == Task::Keyvalue && self.dependency.is_some() {
            return bad("dependency rules only apply to the dependent task".into());
        }
        let headers = self.headers();
        if headers.len() > self.table_max_cols {
            return bad(format!(
                "{} columns exceed the table limit {}",
                headers.len(),
                self.table_max_cols
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for h in &headers {
            if tokenize(h) != [h.as_str()] {
                return bad(format!("header `{h}` must be a single word"));
            }
            if !seen.insert(h) {
                return bad(format!("duplicate column `{h}`"));
            }
        }
        let cols = self.value_columns();
        for c in &cols {
            match &c.values {
                ValueGen::Int { min, max } if min > max => {
                    return bad(format!("column `{}`: empty integer range", c.name))
                }
                ValueGen::Phrase {
                    min_words, max_words, ..
                } if *min_words == 0 || min_words > max_words => {
                    return bad(format!("column `{}`: bad phrase length range", c.name))
                }
                ValueGen::Word { pool } | ValueGen::Phrase { pool, .. } if pool.is_empty() => {
                    return bad(format!("column `{}`: empty word pool", c.name))
                }
                _ => {}
            }
            for w in c.values.pool() {
                if tokenize(w) != [w.as_str()] || w.starts_with('<') {
                    return bad(format!("column `{}`: pool entry `{w}` is not a plain word", c.name));
                }
            }
            if c.values.max_tokens() > self.max_cell_len - 1 {
                return Err(Error::CellTooLong {
                    column: c.name.clone(),
                    len: c.values.max_tokens(),
                    limit: self.max_cell_len - 1,
                });
            }
        }
        if let Some(dep) = self.dependency_rule() {
            let find = |name: &str| cols.iter().find(|c| c.name == name);
            match find(&dep.key) {
                Some(ColumnSpec {
                    values: ValueGen::Word { pool },
                    optional: false,
                    ..
                }) if pool.len() >= hi => {}
                _ => {
                    return bad(format!(
                        "dependency key `{}` must be a required word column with at least {hi} distinct values",
                        dep.key
                    ))
                }
            }
            if dep.factors.is_empty() {
                return bad("dependency needs at least one factor".into());
            }
            for f in &dep.factors {
                if !matches!(
                    find(f),
                    Some(ColumnSpec {
                        values: ValueGen::Int { .. },
                        optional: false,
                        ..
                    })
                ) {
                    return bad(format!("dependency factor `{f}` must be a required integer column"));
                }
            }
        }
        Ok(())
    }
}

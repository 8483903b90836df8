//! Exact-match cell precision/recall/F1 over non-header, non-NULL cells,
//! with keyed or optimal-assignment row alignment.

mod assignment;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{DatasetRecord, Table};

pub use assignment::max_weight_assignment;

/// How predicted rows are paired with gold rows.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "column")]
pub enum AlignmentMode {
    /// Rows pair up by exact match of this column's cell.
    Keyed(String),
    /// One-to-one pairing maximizing the number of matching cells.
    #[default]
    Assignment,
}

/// Raw counts; ratios are derived so that corpora micro-average exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    /// With nothing predicted: 1 if nothing was expected either, else 0.
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted, self.gold == 0)
    }

    /// With nothing expected: 1 if nothing was predicted either, else 0.
    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold, self.predicted == 0)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    pub fn add(&mut self, o: &Counts) {
        self.correct += o.correct;
        self.predicted += o.predicted;
        self.gold += o.gold;
    }
}

fn ratio(num: usize, den: usize, vacuous: bool) -> f64 {
    if den > 0 {
        num as f64 / den as f64
    } else if vacuous {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

impl From<Counts> for ColumnScore {
    fn from(counts: Counts) -> Self {
        ColumnScore {
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub row_count_exact: bool,
    pub counts: Counts,
    pub per_column: BTreeMap<String, ColumnScore>,
}

/// Corpus report: micro-averaged over all cells of all tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub count_accuracy: f64,
    pub n_tables: usize,
    pub counts: Counts,
    pub per_column: BTreeMap<String, ColumnScore>,
}

fn norm(cell: &Option<String>) -> Option<&str> {
    cell.as_deref().map(str::trim)
}

fn cells_match(a: &Option<String>, b: &Option<String>) -> bool {
    matches!((norm(a), norm(b)), (Some(x), Some(y)) if x == y)
}

/// Gold column index for each predicted column.
fn column_map(pred: &Table, gold: &Table) -> Result<Vec<usize>> {
    let p: BTreeSet<&String> = pred.headers.iter().collect();
    let g: BTreeSet<&String> = gold.headers.iter().collect();
    if p != g || p.len() != pred.headers.len() || g.len() != gold.headers.len() {
        let diff = p.symmetric_difference(&g).map(|s| s.to_string()).collect();
        return Err(Error::HeaderMismatch(diff));
    }
    Ok(pred
        .headers
        .iter()
        .map(|h| gold.column_index(h).expect("same header set"))
        .collect())
}

fn row_matches(pred: &[Option<String>], gold: &[Option<String>], cols: &[usize]) -> i64 {
    cols.iter()
        .enumerate()
        .filter(|&(pc, &gc)| cells_match(&pred[pc], &gold[gc]))
        .count() as i64
}

/// Gold row paired with each predicted row.
pub fn align_rows(pred: &Table, gold: &Table, mode: &AlignmentMode) -> Result<Vec<Option<usize>>> {
    let cols = column_map(pred, gold)?;
    match mode {
        AlignmentMode::Assignment => {
            let w: Vec<Vec<i64>> = pred
                .rows
                .iter()
                .map(|pr| gold.rows.iter().map(|gr| row_matches(pr, gr, &cols)).collect())
                .collect();
            Ok(max_weight_assignment(&w))
        }
        AlignmentMode::Keyed(key) => {
            let (Some(pk), Some(gk)) = (pred.column_index(key), gold.column_index(key)) else {
                return Err(Error::Config(format!("key column {key:?} is missing")));
            };
            let mut used = vec![false; gold.rows.len()];
            Ok(pred
                .rows
                .iter()
                .map(|pr| {
                    let j = (0..gold.rows.len()).find(|&j| !used[j] && cells_match(&pr[pk], &gold.rows[j][gk]))?;
                    used[j] = true;
                    Some(j)
                })
                .collect())
        }
    }
}

/// Scores one predicted table against its gold table.
pub fn score_tables(pred: &Table, gold: &Table, mode: &AlignmentMode) -> Result<TableScore> {
    let cols = column_map(pred, gold)?;
    let pairs = align_rows(pred, gold, mode)?;
    let mut per: Vec<Counts> = vec![Counts::default(); gold.headers.len()];
    for row in &gold.rows {
        for (gc, cell) in row.iter().enumerate() {
            if cell.is_some() {
                per[gc].gold += 1;
            }
        }
    }
    for (pr, g) in pred.rows.iter().zip(&pairs) {
        for (pc, &gc) in cols.iter().enumerate() {
            if pr[pc].is_none() {
                continue;
            }
            per[gc].predicted += 1;
            if g.is_some_and(|g| cells_match(&pr[pc], &gold.rows[g][gc])) {
                per[gc].correct += 1;
            }
        }
    }
    let mut total = Counts::default();
    per.iter().for_each(|c| total.add(c));
    Ok(TableScore {
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
        row_count_exact: pred.n_rows() == gold.n_rows(),
        counts: total,
        per_column: gold
            .headers
            .iter()
            .cloned()
            .zip(per.into_iter().map(ColumnScore::from))
            .collect(),
    })
}

/// Micro-averaged score over records paired by position; ids must agree.
pub fn score_corpus(pred: &[DatasetRecord], gold: &[DatasetRecord], mode: &AlignmentMode) -> Result<CorpusScore> {
    if pred.len() != gold.len() {
        return Err(Error::Record {
            id: String::new(),
            msg: format!("{} predictions for {} gold records", pred.len(), gold.len()),
        });
    }
    let mut total = Counts::default();
    let mut per: BTreeMap<String, Counts> = BTreeMap::new();
    let mut exact = 0;
    for (p, g) in pred.iter().zip(gold) {
        if p.id != g.id {
            return Err(Error::Record {
                id: p.id.clone(),
                msg: format!("prediction does not match gold record {}", g.id),
            });
        }
        let s = score_tables(&p.table, &g.table, mode).map_err(|e| Error::Record {
            id: p.id.clone(),
            msg: e.to_string(),
        })?;
        total.add(&s.counts);
        for (name, c) in &s.per_column {
            per.entry(name.clone()).or_default().add(&c.counts);
        }
        exact += s.row_count_exact as usize;
    }
    Ok(CorpusScore {
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
        count_accuracy: if gold.is_empty() {
            0.0
        } else {
            exact as f64 / gold.len() as f64
        },
        n_tables: gold.len(),
        counts: total,
        per_column: per.into_iter().map(|(k, c)| (k, c.into())).collect(),
    })
}

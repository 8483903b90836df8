use std::collections::HashSet;

use serde::{Deserialize, Serialize};

/// A table with named columns; `None` cells are NULL.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Option<String>>>,
}

impl Table {
    pub fn new(headers: Vec<String>, rows: Vec<Vec<Option<String>>>) -> Self {
        Table { headers, rows }
    }

    pub fn empty(headers: Vec<String>) -> Self {
        Table {
            headers,
            rows: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.headers.len()
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&str> {
        self.rows[row][col].as_deref()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    /// Unique headers and rows as wide as the header list.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = HashSet::new();
        for h in &self.headers {
            if !seen.insert(h.as_str()) {
                return Err(format!("duplicate header `{h}`"));
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.headers.len() {
                return Err(format!(
                    "row {i} has {} cells, expected {}",
                    row.len(),
                    self.headers.len()
                ));
            }
        }
        Ok(())
    }

    /// The same table with an extra all-NULL row appended.
    pub fn with_null_row(&self) -> Table {
        let mut t = self.clone();
        t.rows.push(vec![None; self.headers.len()]);
        t
    }
}

/// One text/table pair of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub text: String,
    pub table: Table,
}

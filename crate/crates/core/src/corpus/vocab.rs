use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::table::DatasetRecord;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const NULL: TokenId = 2;
pub const EOC: TokenId = 3;
const ROW_BASE: TokenId = 4;

/// Splits on whitespace; every ASCII punctuation character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Word-level vocabulary. Ids `0..n_reserved()` are structural:
/// PAD, BOS, NULL, END_OF_CELL, one row marker per row index, UNK.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    max_rows: usize,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn reserved_surface(max_rows: usize) -> Vec<String> {
        let mut v = vec![
            "<pad>".to_string(),
            "<bos>".to_string(),
            "<null>".to_string(),
            "</cell>".to_string(),
        ];
        v.extend((1..=max_rows).map(|r| format!("<row{r}>")));
        v.push("<unk>".to_string());
        v
    }

    /// Reserved ids first, then `words` in the given order.
    pub fn from_words(max_rows: usize, words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens = Self::reserved_surface(max_rows);
        tokens.extend(words);
        let mut v = Vocab {
            max_rows,
            tokens,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    /// Restores the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_rows(&self) -> usize {
        self.max_rows
    }

    pub fn n_reserved(&self) -> usize {
        ROW_BASE + self.max_rows + 1
    }

    pub fn unk(&self) -> TokenId {
        ROW_BASE + self.max_rows
    }

    /// Marker token for 1-based row `row`.
    pub fn row_marker(&self, row: usize) -> TokenId {
        assert!(row >= 1 && row <= self.max_rows, "row {row} out of range");
        ROW_BASE + row - 1
    }

    pub fn is_structural(&self, id: TokenId) -> bool {
        id < self.n_reserved()
    }

    pub fn is_reserved_surface(&self, s: &str) -> bool {
        self.index.get(s).is_some_and(|&id| self.is_structural(id))
    }

    pub fn id(&self, token: &str) -> TokenId {
        match self.index.get(token) {
            Some(&id) if !self.is_structural(id) => id,
            _ => self.unk(),
        }
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Cell content (without end-of-cell) back to its string; `[NULL]` is `None`.
    pub fn decode_cell(&self, content: &[TokenId]) -> Option<String> {
        if content == [NULL] {
            return None;
        }
        Some(content.iter().map(|&t| self.token(t)).collect::<Vec<_>>().join(" "))
    }

    pub fn words(&self) -> &[String] {
        &self.tokens[self.n_reserved()..]
    }
}

/// Counts every token of texts, headers and cells, then orders regular
/// tokens by descending frequency with lexicographic ties.
pub fn build_vocab(records: &[DatasetRecord], max_rows: usize) -> Vocab {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut bump = |s: &str| {
        for t in tokenize(s) {
            *counts.entry(t).or_default() += 1;
        }
    };
    for r in records {
        bump(&r.text);
        for h in &r.table.headers {
            bump(h);
        }
        for row in &r.table.rows {
            for cell in row.iter().flatten() {
                bump(cell);
            }
        }
    }
    let reserved = Vocab::reserved_surface(max_rows);
    let mut words: Vec<(String, u64)> = counts.into_iter().filter(|(w, _)| !reserved.contains(w)).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_words(max_rows, words.into_iter().map(|(w, _)| w))
}

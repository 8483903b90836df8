use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a candidate's token log-probabilities aggregate into a cell score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerCriterion {
    Min,
    #[default]
    Max,
    Mean,
}

impl InnerCriterion {
    /// `None` for an empty candidate.
    pub fn aggregate(self, logprobs: &[f64]) -> Option<f64> {
        if logprobs.is_empty() {
            return None;
        }
        Some(match self {
            InnerCriterion::Min => logprobs.iter().copied().fold(f64::INFINITY, f64::min),
            InnerCriterion::Max => logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            InnerCriterion::Mean => logprobs.iter().sum::<f64>() / logprobs.len() as f64,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterCriterion {
    #[default]
    MaxFirst,
    MinFirst,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Constraint {
    #[default]
    None,
    ColumnByColumn,
    RowByRow,
    LeftRightTopBottom,
    NoDistantRows,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stopping {
    #[default]
    PredictedCount,
    SemiTemplated,
}

/// Order among equal scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// Smaller (row, column) first.
    #[default]
    RowMajor,
    /// Smaller (column, row) first.
    ColumnMajor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub inner_criterion: InnerCriterion,
    #[serde(default)]
    pub outer_criterion: OuterCriterion,
    #[serde(default)]
    pub constraint: Constraint,
    #[serde(default)]
    pub stopping: Stopping,
    #[serde(default)]
    pub tie_break: TieBreak,
    /// Fixed row count instead of the count head.
    #[serde(default)]
    pub max_rows_override: Option<usize>,
    /// Committed cells see only cells committed before them, matching a
    /// model trained with the fixed causal order.
    #[serde(default)]
    pub causal_context: bool,
}

fn default_k() -> usize {
    1
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            k: 1,
            inner_criterion: InnerCriterion::default(),
            outer_criterion: OuterCriterion::default(),
            constraint: Constraint::default(),
            stopping: Stopping::default(),
            tie_break: TieBreak::default(),
            max_rows_override: None,
            causal_context: false,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

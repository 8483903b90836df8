use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tabgen_core::decoding::{Constraint, DecodingConfig};
use tabgen_core::fsutil::sha256_hex;
use tabgen_core::metrics::AlignmentMode;
use tabgen_core::model::ModelConfig;
use tabgen_core::training::{CellOrder, TrainingConfig};

use crate::error::{CliError, CliResult};

/// Environment variable that replaces every configured seed.
pub const SEED_ENV: &str = "STABLE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    /// Held-out data for periodic evaluation; the training data otherwise.
    #[serde(default)]
    pub eval_dataset: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default)]
    pub mode: AlignmentMode,
    /// Records decoded per periodic evaluation.
    #[serde(default = "default_eval_limit")]
    pub eval_limit: usize,
}

fn default_eval_limit() -> usize {
    100
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            mode: AlignmentMode::default(),
            eval_limit: default_eval_limit(),
        }
    }
}

fn default_model() -> ModelConfig {
    ModelConfig::new(0)
}

/// Everything a run depends on. Stored inside every checkpoint and report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub decoding: DecodingConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl RunConfig {
    /// Parses a config file; relative paths resolve against its directory
    /// and `STABLE_SEED` overrides the seed.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read_text(path)?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.resolve(seed_override()?);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [&mut p.dataset, &mut p.checkpoint_dir, &mut p.report_dir] {
            *path = join(base, path);
        }
        if let Some(e) = &mut p.eval_dataset {
            *e = join(base, e);
        }
    }

    /// Propagates the run seed and checkpoint directory into the sections.
    pub fn resolve(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.training.seed = self.seed;
        self.training.checkpoint_dir = Some(self.paths.checkpoint_dir.clone());
    }

    /// Decoding settings matching how the model was trained: a fixed-order
    /// model decodes in that order with the same causal context.
    pub fn effective_decoding(&self) -> DecodingConfig {
        effective_decoding(&self.decoding, &self.training)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.training.validate()?;
        self.decoding.validate()?;
        if self.metrics.eval_limit == 0 {
            return Err(CliError::Usage("metrics.eval_limit must be positive".into()));
        }
        Ok(())
    }
}

pub fn effective_decoding(decoding: &DecodingConfig, training: &TrainingConfig) -> DecodingConfig {
    let mut d = decoding.clone();
    if training.order == CellOrder::FixedCausal {
        d.causal_context = true;
        d.constraint = Constraint::LeftRightTopBottom;
        d.k = 1;
    }
    d
}

fn join(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// The `STABLE_SEED` value, if set.
pub fn seed_override() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

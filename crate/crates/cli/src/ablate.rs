use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tabgen_core::corpus::read_jsonl;
use tabgen_core::decoding::{Constraint, InnerCriterion, OuterCriterion, Stopping};
use tabgen_core::fsutil::atomic_write;
use tabgen_core::model::Checkpoint;
use tabgen_core::seed;
use tabgen_core::training::CellOrder;

use crate::config::{read_text, RunConfig};
use crate::error::{CliError, CliResult};
use crate::evaluate::decode_records;
use crate::train;

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    Permuted,
    FixedCausal,
    SemiTemplated,
}

impl TrainingMode {
    fn name(self) -> &'static str {
        match self {
            TrainingMode::Permuted => "permuted",
            TrainingMode::FixedCausal => "fixed-causal",
            TrainingMode::SemiTemplated => "semi-templated",
        }
    }

    fn apply(self, cfg: &mut RunConfig) {
        cfg.training.order = match self {
            TrainingMode::FixedCausal => CellOrder::FixedCausal,
            _ => CellOrder::Permutation,
        };
        cfg.training.semi_templated = self == TrainingMode::SemiTemplated;
    }
}

/// Values swept per axis; an empty axis keeps the base configuration's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axes {
    #[serde(default)]
    pub training: Vec<TrainingMode>,
    #[serde(default)]
    pub constraint: Vec<Constraint>,
    #[serde(default)]
    pub inner_criterion: Vec<InnerCriterion>,
    #[serde(default)]
    pub outer_criterion: Vec<OuterCriterion>,
    #[serde(default)]
    pub k: Vec<usize>,
    #[serde(default)]
    pub stopping: Vec<Stopping>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    /// Run configuration every grid point starts from.
    pub base: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub axes: Axes,
}

fn default_seeds() -> usize {
    3
}

impl AblationGrid {
    /// Parses a grid file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut g: AblationGrid =
            toml::from_str(&read_text(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut g.base, &mut g.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if g.seeds == 0 {
            return Err(CliError::Usage("seeds must be positive".into()));
        }
        Ok(g)
    }
}

/// One cell of the cartesian product, excluding the seed.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPoint {
    pub training: TrainingMode,
    pub constraint: Constraint,
    pub inner_criterion: InnerCriterion,
    pub outer_criterion: OuterCriterion,
    pub k: usize,
    pub stopping: Stopping,
}

impl GridPoint {
    fn key(&self) -> String {
        serde_json::to_string(self).expect("grid point serializes")
    }
}

fn or_base<T: Copy>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

/// Cartesian product of the axes. Without an explicit stopping axis the
/// stopping rule follows the training mode; with one, combinations pairing
/// semi-templated stopping with a model not trained for it are dropped.
pub fn expand(axes: &Axes, base: &RunConfig) -> Vec<GridPoint> {
    let base_mode = match (base.training.order, base.training.semi_templated) {
        (CellOrder::FixedCausal, _) => TrainingMode::FixedCausal,
        (_, true) => TrainingMode::SemiTemplated,
        _ => TrainingMode::Permuted,
    };
    let d = &base.decoding;
    let mut out = Vec::new();
    for &training in &or_base(&axes.training, base_mode) {
        let natural = if training == TrainingMode::SemiTemplated {
            Stopping::SemiTemplated
        } else {
            Stopping::PredictedCount
        };
        for &constraint in &or_base(&axes.constraint, d.constraint) {
            for &inner_criterion in &or_base(&axes.inner_criterion, d.inner_criterion) {
                for &outer_criterion in &or_base(&axes.outer_criterion, d.outer_criterion) {
                    for &k in &or_base(&axes.k, d.k) {
                        for &stopping in &or_base(&axes.stopping, natural) {
                            if stopping != natural && stopping == Stopping::SemiTemplated {
                                continue;
                            }
                            out.push(GridPoint {
                                training,
                                constraint,
                                inner_criterion,
                                outer_criterion,
                                k,
                                stopping,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Seed of the `i`-th repetition.
pub fn run_seed(base_seed: u64, i: usize) -> u64 {
    seed::mix(&[base_seed, i as u64])
}

/// Configuration of one grid point at one seed.
pub fn run_config(base: &RunConfig, point: &GridPoint, seed_index: usize, model_dir: &Path) -> RunConfig {
    let mut cfg = base.clone();
    point.training.apply(&mut cfg);
    cfg.decoding.constraint = point.constraint;
    cfg.decoding.inner_criterion = point.inner_criterion;
    cfg.decoding.outer_criterion = point.outer_criterion;
    cfg.decoding.k = point.k;
    cfg.decoding.stopping = point.stopping;
    cfg.paths.checkpoint_dir = model_dir.join("checkpoints");
    cfg.paths.report_dir = model_dir.to_path_buf();
    cfg.resolve(Some(run_seed(base.seed, seed_index)));
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub point: GridPoint,
    pub seed_index: usize,
    pub seed: u64,
    pub run_config_hash: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub count_accuracy: f64,
    pub column_f1: BTreeMap<String, f64>,
}

impl LedgerEntry {
    fn id(&self) -> (String, usize) {
        (self.point.key(), self.seed_index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub point: GridPoint,
    pub runs: usize,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
    pub count_accuracy: Stat,
    pub column_f1: BTreeMap<String, Stat>,
}

/// Groups ledger entries by grid point, in grid order.
pub fn summarize(points: &[GridPoint], entries: &[LedgerEntry]) -> Vec<SummaryRow> {
    points
        .iter()
        .filter_map(|p| {
            let runs: Vec<_> = entries.iter().filter(|e| &e.point == p).collect();
            if runs.is_empty() {
                return None;
            }
            let stat = |f: fn(&LedgerEntry) -> f64| Stat::of(&runs.iter().map(|e| f(e)).collect::<Vec<_>>());
            let columns: BTreeMap<String, Stat> = runs[0]
                .column_f1
                .keys()
                .map(|c| {
                    let xs: Vec<f64> = runs.iter().filter_map(|e| e.column_f1.get(c).copied()).collect();
                    (c.clone(), Stat::of(&xs))
                })
                .collect();
            Some(SummaryRow {
                point: p.clone(),
                runs: runs.len(),
                precision: stat(|e| e.precision),
                recall: stat(|e| e.recall),
                f1: stat(|e| e.f1),
                count_accuracy: stat(|e| e.count_accuracy),
                column_f1: columns,
            })
        })
        .collect()
}

fn read_ledger(path: &Path) -> Vec<LedgerEntry> {
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> CliResult<()> {
    let mut buf = String::new();
    for it in items {
        buf.push_str(&serde_json::to_string(it).expect("ledger serializes"));
        buf.push('\n');
    }
    Ok(atomic_write(path, buf.as_bytes())?)
}

/// Runs every unfinished (grid point, seed) pair and writes the summary.
/// Models are trained once per (training mode, seed) and shared by the
/// decoding variants of that mode.
pub fn run(grid: &AblationGrid) -> CliResult<Vec<SummaryRow>> {
    let base = RunConfig::load(&grid.base)?;
    base.validate()?;
    let points = expand(&grid.axes, &base);
    let ledger_path = grid.out_dir.join(LEDGER_FILE);
    let mut entries = read_ledger(&ledger_path);
    let done: HashSet<_> = entries.iter().map(LedgerEntry::id).collect();
    let eval_path = base
        .paths
        .eval_dataset
        .clone()
        .unwrap_or_else(|| base.paths.dataset.clone());
    let mut eval_records = read_jsonl(&eval_path)?;
    eval_records.truncate(base.metrics.eval_limit);

    let mut models: BTreeMap<(TrainingMode, usize), Checkpoint> = BTreeMap::new();
    for point in &points {
        for i in 0..grid.seeds {
            if done.contains(&(point.key(), i)) {
                continue;
            }
            let model_dir = grid
                .out_dir
                .join("models")
                .join(format!("{}-{i}", point.training.name()));
            let cfg = run_config(&base, point, i, &model_dir);
            if !models.contains_key(&(point.training, i)) {
                eprintln!("training {} seed {i}", point.training.name());
                let outcome = train::run(&cfg, true)?;
                let ck = Checkpoint::load(&outcome.checkpoint)
                    .map_err(|e| CliError::Model(format!("{}: {e}", outcome.checkpoint.display())))?;
                models.insert((point.training, i), ck);
            }
            let ck = &models[&(point.training, i)];
            let decoding = cfg.effective_decoding();
            let (preds, _) = decode_records(&ck.model, &ck.vocab, &eval_records, &decoding)?;
            let score = tabgen_core::metrics::score_corpus(&preds, &eval_records, &base.metrics.mode)?;
            let entry = LedgerEntry {
                point: point.clone(),
                seed_index: i,
                seed: cfg.seed,
                run_config_hash: cfg.hash(),
                precision: score.precision,
                recall: score.recall,
                f1: score.f1,
                count_accuracy: score.count_accuracy,
                column_f1: score.per_column.iter().map(|(k, v)| (k.clone(), v.f1)).collect(),
            };
            eprintln!("{} seed {i}: f1 {:.4}", point.key(), entry.f1);
            entries.push(entry);
            write_lines(&ledger_path, &entries)?;
        }
    }
    let summary = summarize(&points, &entries);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    atomic_write(&grid.out_dir.join(SUMMARY_FILE), json.as_bytes())?;
    Ok(summary)
}

fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Aligned text rendering of the summary, one row per grid point.
pub fn render(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<15} {:<21} {:<6} {:<10} {:>3} {:<16} {:>4}  {:>15}  {:>15}",
        "training", "constraint", "inner", "outer", "k", "stopping", "runs", "F1", "count acc"
    );
    for r in rows {
        let p = &r.point;
        let _ = writeln!(
            s,
            "{:<15} {:<21} {:<6} {:<10} {:>3} {:<16} {:>4}  {:>7.2} ± {:<5.2}  {:>7.2} ± {:<5.2}",
            p.training.name(),
            label(&p.constraint),
            label(&p.inner_criterion),
            label(&p.outer_criterion),
            p.k,
            label(&p.stopping),
            r.runs,
            100.0 * r.f1.mean,
            100.0 * r.f1.std,
            100.0 * r.count_accuracy.mean,
            100.0 * r.count_accuracy.std,
        );
    }
    s
}

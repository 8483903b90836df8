use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use tabgen_core::corpus::{build_vocab, read_jsonl};
use tabgen_core::fsutil::{atomic_write, file_sha256};
use tabgen_core::model::{Checkpoint, Model};
use tabgen_core::training::{prepare_example, StepStats, Trainer, TrainingConfig};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::evaluate::{evaluate, EvalLine};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "run_config.json";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub step: u64,
    pub resumed_from: Option<u64>,
    pub last: Option<StepStats>,
    pub evals: Vec<EvalLine>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.json"))
}

/// The checkpoint with the highest step in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<(u64, PathBuf)> {
    let entries = fs::read_dir(dir).ok()?;
    entries
        .filter_map(|e| {
            let path = e.ok()?.path();
            let name = path.file_name()?.to_str()?;
            let step = name.strip_prefix("step-")?.strip_suffix(".json")?.parse().ok()?;
            Some((step, path))
        })
        .max()
}

fn model_err(path: &Path, e: tabgen_core::Error) -> CliError {
    CliError::Model(format!("{}: {e}", path.display()))
}

/// Training settings that must agree between a checkpoint and a resumed run.
fn continuation_key(t: &TrainingConfig) -> TrainingConfig {
    TrainingConfig {
        steps: 0,
        eval_every: 0,
        checkpoint_every: 0,
        ..t.clone()
    }
}

/// Reads the run configuration embedded in a checkpoint.
pub fn checkpoint_run_config(ck: &Checkpoint) -> Option<RunConfig> {
    serde_json::from_value(ck.meta.get("run_config")?.clone()).ok()
}

fn check_resumable(cfg: &RunConfig, ck: &Checkpoint, corpus_hash: &str, path: &Path) -> CliResult<()> {
    let refuse = |why: &str| Err(CliError::Model(format!("cannot resume from {}: {why}", path.display())));
    let Some(saved) = checkpoint_run_config(ck) else {
        return refuse("no run configuration recorded");
    };
    let mut model = cfg.model.clone();
    model.vocab_size = ck.model.config.vocab_size;
    if model != ck.model.config {
        return refuse("model configuration differs");
    }
    if continuation_key(&saved.training) != continuation_key(&cfg.training) || saved.seed != cfg.seed {
        return refuse("training configuration differs");
    }
    if ck.meta.get("corpus_hash").and_then(|h| h.as_str()) != Some(corpus_hash) {
        return refuse("training data differs");
    }
    if ck.optimizer.is_none() {
        return refuse("no optimizer state");
    }
    Ok(())
}

fn read_metrics(path: &Path, up_to: u64) -> Vec<EvalLine> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .filter_map(|l| serde_json::from_str::<EvalLine>(l).ok())
        .filter(|l| l.step <= up_to)
        .collect()
}

fn write_metrics(path: &Path, lines: &[EvalLine]) -> CliResult<()> {
    let mut buf = String::new();
    for l in lines {
        buf.push_str(&serde_json::to_string(l).expect("metrics serialize"));
        buf.push('\n');
    }
    Ok(atomic_write(path, buf.as_bytes())?)
}

/// Trains (or continues training) the run described by `cfg`.
pub fn run(cfg: &RunConfig, resume: bool) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let dataset = &cfg.paths.dataset;
    let records = read_jsonl(dataset)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{}: no records", dataset.display())));
    }
    let corpus_hash = file_sha256(dataset)?;
    let eval_records = match &cfg.paths.eval_dataset {
        Some(p) => read_jsonl(p)?,
        None => records.clone(),
    };
    let eval_records = &eval_records[..eval_records.len().min(cfg.metrics.eval_limit)];
    let ckpt_dir = &cfg.paths.checkpoint_dir;
    let metrics_path = cfg.paths.report_dir.join(METRICS_FILE);

    let latest = if resume { latest_checkpoint(ckpt_dir) } else { None };
    let (mut trainer, vocab, resumed_from) = match latest {
        Some((step, path)) => {
            let ck = Checkpoint::load(&path).map_err(|e| model_err(&path, e))?;
            check_resumable(cfg, &ck, &corpus_hash, &path)?;
            let opt = ck.optimizer.expect("checked");
            let trainer = Trainer::resume(ck.model, opt, cfg.training.clone())?;
            (trainer, ck.vocab, Some(step))
        }
        None => {
            let vocab = build_vocab(&records, cfg.model.max_rows);
            let mut mcfg = cfg.model.clone();
            if mcfg.vocab_size == 0 {
                mcfg.vocab_size = vocab.len();
            } else if mcfg.vocab_size != vocab.len() {
                return Err(CliError::Usage(format!(
                    "model.vocab_size {} does not match the corpus vocabulary of {}",
                    mcfg.vocab_size,
                    vocab.len()
                )));
            }
            let model = Model::new(mcfg, cfg.seed)?;
            (Trainer::new(model, cfg.training.clone())?, vocab, None)
        }
    };
    let mut evals = read_metrics(&metrics_path, trainer.step());
    let examples = records
        .iter()
        .map(|r| prepare_example(r, &vocab, &trainer.model, cfg.training.semi_templated))
        .collect::<Result<Vec<_>, _>>()?;
    let decoding = cfg.effective_decoding();
    let meta = |step: u64| {
        json!({
            "run_config": cfg,
            "run_config_hash": cfg.hash(),
            "corpus_hash": corpus_hash,
            "step": step,
        })
    };
    let save = |trainer: &Trainer| -> CliResult<PathBuf> {
        let path = checkpoint_path(ckpt_dir, trainer.step());
        let ck = Checkpoint {
            model: trainer.model.clone(),
            vocab: vocab.clone(),
            optimizer: Some(trainer.optimizer.clone()),
            meta: meta(trainer.step()),
        };
        ck.save(&path)?;
        Ok(path)
    };
    atomic_write(
        &cfg.paths.report_dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(cfg).expect("config serializes").as_bytes(),
    )?;

    let steps = cfg.training.steps;
    let log_every = (steps / 10).max(1);
    let mut last = None;
    let mut checkpoint = latest_checkpoint(ckpt_dir)
        .filter(|(s, _)| *s == trainer.step())
        .map(|(_, p)| p);
    while trainer.step() < steps {
        let stats = trainer.train_step(&examples)?;
        let step = stats.step;
        if step % log_every == 0 || step == steps {
            eprintln!(
                "step {step}/{steps} loss {:.4} nll {:.4} mse {:.4} grad_norm {:.3}",
                stats.loss, stats.nll, stats.mse, stats.grad_norm
            );
        }
        last = Some(stats);
        if cfg.training.eval_every > 0 && step % cfg.training.eval_every == 0 {
            let (line, _) = evaluate(
                &trainer.model,
                &vocab,
                eval_records,
                &cfg.training,
                &decoding,
                &cfg.metrics.mode,
                step,
            )?;
            evals.push(line);
            write_metrics(&metrics_path, &evals)?;
        }
        let every = cfg.training.checkpoint_every;
        if step == steps || (every > 0 && step % every == 0) {
            checkpoint = Some(save(&trainer)?);
        }
    }
    let checkpoint = match checkpoint {
        Some(p) => p,
        None => save(&trainer)?,
    };
    if !metrics_path.exists() {
        write_metrics(&metrics_path, &evals)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        step: trainer.step(),
        resumed_from,
        last,
        evals,
    })
}

use std::path::PathBuf;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{adamw_step, AdamWConfig, GradBuffer, OptimizerState};
use crate::seed;

use super::pass::{build_fixed_causal_pass, build_training_pass, cell_nlls, pass_loss, TrainingExample};
use super::plan::sample_permutation;

/// Which cell orders the decoder is trained on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellOrder {
    /// Random orderings with a random cut; filled cells see each other.
    #[default]
    Permutation,
    /// Row-major order under a strict prefix mask.
    FixedCausal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::steps")]
    pub steps: u64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::label_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "defaults::count_loss_weight")]
    pub count_loss_weight: f64,
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    /// Steps between evaluations; 0 disables them.
    #[serde(default)]
    pub eval_every: u64,
    /// Steps between checkpoints; 0 means only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub order: CellOrder,
    /// Train with an appended all-NULL row for sentinel-based stopping.
    #[serde(default)]
    pub semi_templated: bool,
}

mod defaults {
    pub fn steps() -> u64 {
        1000
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn weight_decay() -> f64 {
        1e-5
    }
    pub fn label_smoothing() -> f64 {
        0.1
    }
    pub fn count_loss_weight() -> f64 {
        1.0
    }
    pub fn clip_norm() -> f64 {
        1.0
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            seed: 0,
            steps: defaults::steps(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            weight_decay: defaults::weight_decay(),
            label_smoothing: defaults::label_smoothing(),
            count_loss_weight: defaults::count_loss_weight(),
            clip_norm: defaults::clip_norm(),
            eval_every: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            order: CellOrder::Permutation,
            semi_templated: false,
        }
    }
}

impl TrainingConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return bad("lr and clip_norm must be positive, weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if self.count_loss_weight < 0.0 {
            return bad("count_loss_weight must be non-negative");
        }
        Ok(())
    }
}

/// Per-step scalars; `nll` is the batch mean of per-example pass losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub nll: f64,
    pub mse: f64,
    pub grad_norm: f64,
}

const BATCH_STREAM: u64 = 1;
const EXAMPLE_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

/// Batch indices for `step`, drawn with replacement from a stream that
/// depends only on (seed, step), so resumed runs see the same batches.
pub fn sample_batch(n_examples: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut rng = seed::rng(&[seed, BATCH_STREAM, step]);
    (0..batch_size).map(|_| rng.random_range(0..n_examples)).collect()
}

struct ExampleResult {
    grads: GradBuffer,
    nll: Option<f64>,
    mse: f64,
}

fn example_grads(
    model: &Model,
    ex: &TrainingExample,
    cfg: &TrainingConfig,
    step: u64,
    slot: usize,
    n_dec: usize,
    batch: usize,
) -> Result<ExampleResult> {
    let mut rng = seed::rng(&[cfg.seed, EXAMPLE_STREAM, step, slot as u64]);
    let mut g = model.graph(true);
    let memory = model.encode(&mut g, &ex.source, Some(&mut rng))?;
    let count = model.count_head(&mut g, memory)?;
    let mse = g.mse(count, &[ex.n_groups as f64])?;
    let mse_value = g.value(mse).item();
    let mut root = g.scale(mse, cfg.count_loss_weight / batch as f64);
    let mut nll_value = None;
    if ex.gold.is_some() {
        let pass = match cfg.order {
            CellOrder::Permutation => {
                let plan = sample_permutation(ex.n_rows(), ex.n_cols(), &mut rng);
                build_training_pass(ex, &plan, &model.config)?
            }
            CellOrder::FixedCausal => build_fixed_causal_pass(ex, &model.config)?,
        };
        let nll = pass_loss(model, &mut g, memory, &pass, cfg.label_smoothing, Some(&mut rng))?;
        nll_value = Some(g.value(nll).item());
        let scaled = g.scale(nll, 1.0 / n_dec as f64);
        root = g.add(root, scaled)?;
    }
    let mut grads = GradBuffer::empty(model.store.len());
    g.backward(root, &mut grads)?;
    Ok(ExampleResult {
        grads,
        nll: nll_value,
        mse: mse_value,
    })
}

/// One optimisation step on `batch`: per-example graphs run in parallel,
/// gradients are summed in batch order, clipped to `clip_norm` and applied
/// with AdamW. Non-finite losses abort before any parameter changes.
pub fn training_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &[&TrainingExample],
    cfg: &TrainingConfig,
) -> Result<StepStats> {
    let step = opt.step;
    let n_dec = batch.iter().filter(|e| e.gold.is_some()).count();
    let results: Vec<ExampleResult> = {
        let m: &Model = model;
        batch
            .par_iter()
            .enumerate()
            .map(|(i, ex)| example_grads(m, ex, cfg, step, i, n_dec, batch.len()))
            .collect::<Result<_>>()?
    };
    let nll = if n_dec == 0 {
        0.0
    } else {
        results.iter().filter_map(|r| r.nll).sum::<f64>() / n_dec as f64
    };
    let mse = results.iter().map(|r| r.mse).sum::<f64>() / batch.len() as f64;
    let loss = nll + cfg.count_loss_weight * mse;
    let ids = || batch.iter().map(|e| e.id.clone()).collect();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            example_ids: ids(),
            nll,
            mse,
        });
    }
    model.store.zero_grad();
    for r in &results {
        model.store.grads_mut().add_assign(&r.grads);
    }
    let grad_norm = model.store.grads().global_norm();
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            example_ids: ids(),
            nll,
            mse,
        });
    }
    if grad_norm > cfg.clip_norm {
        model.store.grads_mut().scale(cfg.clip_norm / grad_norm);
    }
    adamw_step(&mut model.store, opt)?;
    Ok(StepStats {
        step: opt.step,
        loss,
        nll,
        mse,
        grad_norm,
    })
}

/// Held-out (nll, mse) in eval mode without smoothing: the mean cell NLL
/// under one deterministic order draw per example, and the count-head MSE,
/// each averaged over examples.
pub fn evaluation_loss(model: &Model, examples: &[TrainingExample], cfg: &TrainingConfig) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let per: Vec<(Option<f64>, f64)> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let memory = model.memory(&ex.source)?;
            let err = model.predict_count(&memory)? - ex.n_groups as f64;
            if ex.gold.is_none() {
                return Ok((None, err * err));
            }
            let pass = match cfg.order {
                CellOrder::Permutation => {
                    let mut rng = seed::rng(&[cfg.seed, EVAL_STREAM, i as u64]);
                    let plan = sample_permutation(ex.n_rows(), ex.n_cols(), &mut rng);
                    build_training_pass(ex, &plan, &model.config)?
                }
                CellOrder::FixedCausal => build_fixed_causal_pass(ex, &model.config)?,
            };
            let nlls = cell_nlls(model, &memory, &pass)?;
            let mean = nlls.iter().map(|(_, x)| x).sum::<f64>() / nlls.len() as f64;
            Ok((Some(mean), err * err))
        })
        .collect::<Result<_>>()?;
    let dec: Vec<f64> = per.iter().filter_map(|p| p.0).collect();
    let nll = if dec.is_empty() {
        0.0
    } else {
        dec.iter().sum::<f64>() / dec.len() as f64
    };
    let mse = per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64;
    Ok((nll, mse))
}

/// Owns the model and optimizer state of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub config: TrainingConfig,
}

impl Trainer {
    pub fn new(model: Model, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(config.adamw(), &model.store);
        Ok(Trainer {
            model,
            optimizer,
            config,
        })
    }

    pub fn resume(model: Model, optimizer: OptimizerState, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        if !optimizer.matches(&model.store) {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        Ok(Trainer {
            model,
            optimizer,
            config,
        })
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Samples the next batch from `examples` and takes one step.
    pub fn train_step(&mut self, examples: &[TrainingExample]) -> Result<StepStats> {
        if examples.is_empty() {
            return Err(Error::Config("no training examples".into()));
        }
        let idx = sample_batch(examples.len(), self.config.batch_size, self.config.seed, self.step());
        let batch: Vec<&TrainingExample> = idx.iter().map(|&i| &examples[i]).collect();
        training_step(&mut self.model, &mut self.optimizer, &batch, &self.config)
    }
}

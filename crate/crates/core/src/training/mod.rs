//! Loss assembly, language-balanced batching, Adam with per-group
//! learning rates, and the training loop.

mod batch;
mod loss;
mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, BatchSampler};
pub use loss::{batch_loss, compute_loss, LossBreakdown, LossNodes, Objective, Predictions, Targets};
pub use optim::Adam;

use crate::autodiff::{Graph, ParamGroup};
use crate::error::{Error, Result};
use crate::features::{Corpus, Utterance};
use crate::model::{save_checkpoint, Checkpoint, Model};

/// Name of the loss log written into the output directory.
pub const LOG_FILE: &str = "metrics.csv";
/// Name of the final checkpoint written into the output directory.
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the speaker loss.
    pub lambda: f64,
    pub batch_size: usize,
    pub base_lr: f64,
    /// The learning rate halves every this many steps.
    pub halving_interval: usize,
    /// Learning-rate multiplier for the prosody parameter group.
    pub prosody_lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Stop after the first step whose pre-update `loss_rec` is below this value.
    pub stop_at_loss_rec: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.05,
            batch_size: 50,
            base_lr: 1e-3,
            halving_interval: 15000,
            prosody_lr_factor: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: 20000,
            seed: 0,
            log_every: 100,
            checkpoint_every: 5000,
            grad_clip: None,
            stop_at_loss_rec: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0) || !(self.prosody_lr_factor > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.halving_interval == 0 || self.log_every == 0 {
            return bad("halving_interval and log_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam hyperparameters out of range".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Base-group learning rate at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.base_lr * 0.5f64.powi((step / self.halving_interval) as i32)
    }

    pub fn lr_for(&self, step: usize, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Shared => self.lr_at(step),
            ParamGroup::Prosody => self.lr_at(step) * self.prosody_lr_factor,
        }
    }
}

/// `(step, lr, prosody lr)` for steps `0..steps`.
pub fn schedule_table(cfg: &TrainConfig, steps: usize) -> Vec<(usize, f64, f64)> {
    (0..steps)
        .map(|s| (s, cfg.lr_for(s, ParamGroup::Shared), cfg.lr_for(s, ParamGroup::Prosody)))
        .collect()
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub lr_prosody: f64,
    pub mse_mcep: f64,
    pub mse_energy: f64,
    pub mse_logf0: f64,
    pub bce_vuv: f64,
    pub bce_stop: f64,
    pub loss_rec: f64,
    pub loss_spk: f64,
    pub loss_total: f64,
}

impl LogRow {
    pub fn new(step: usize, cfg: &TrainConfig, l: &LossBreakdown) -> Self {
        LogRow {
            step,
            lr: cfg.lr_for(step, ParamGroup::Shared),
            lr_prosody: cfg.lr_for(step, ParamGroup::Prosody),
            mse_mcep: l.mse_mcep,
            mse_energy: l.mse_energy,
            mse_logf0: l.mse_logf0,
            bce_vuv: l.bce_vuv,
            bce_stop: l.bce_stop,
            loss_rec: l.loss_rec,
            loss_spk: l.loss_spk,
            loss_total: l.loss_total,
        }
    }
}

/// Read a loss log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{other:?}"),
        },
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Optimizer updates applied.
    pub steps: usize,
    pub log: Vec<LogRow>,
    /// Loss of the last evaluated batch.
    pub last: LossBreakdown,
    /// True when `stop_at_loss_rec` ended the run.
    pub reached_target: bool,
    pub checkpoints: Vec<PathBuf>,
}

/// One forward/backward pass and optimizer update on `batch` at `step`.
/// Returns the pre-update losses.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    cfg: &TrainConfig,
    batch: &[&Utterance],
    step: usize,
) -> Result<LossBreakdown> {
    // The graph rejects non-finite values as soon as they appear, so a
    // NaN loss surfaces as a NonFinite error before it can be logged.
    let diverged = |e: Error| match e {
        Error::NonFinite { .. } => Error::Diverged { step },
        e => e,
    };
    let (loss, grads) = {
        let mut g = Graph::new(&model.params);
        let nodes = batch_loss(&mut g, model, batch, cfg.lambda, Objective::GradientReversal, 0)
            .map_err(diverged)?;
        let loss = nodes.breakdown(&g, cfg.lambda);
        if loss.loss_total.is_nan() {
            return Err(Error::Diverged { step });
        }
        (loss, g.backward(nodes.objective).map_err(diverged)?)
    };
    let mut grads = grads;
    if let Some(c) = cfg.grad_clip {
        let n = grads.global_norm();
        if n > c {
            grads.scale(c / n);
        }
    }
    adam.step(&mut model.params, &grads, |grp| cfg.lr_for(step, grp));
    Ok(loss)
}

/// Train `model` on the training split of `corpus`. With `out`, the loss
/// log, intermediate checkpoints and the final checkpoint are written
/// there; existing files are overwritten only with `force`.
pub fn train(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    out: Option<&Path>,
    force: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.check_frontend(&corpus.frontend)?;
    if model.config.num_speakers != corpus.num_speakers() {
        return Err(Error::Config(format!(
            "model has {} speakers, corpus has {}",
            model.config.num_speakers,
            corpus.num_speakers()
        )));
    }
    let mut sampler = BatchSampler::for_corpus(corpus, cfg.batch_size, cfg.seed)?;
    let mut adam = Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.eps);
    let mut writer = match out {
        Some(dir) => {
            let path = dir.join(LOG_FILE);
            if path.exists() && !force {
                return Err(Error::Exists(path));
            }
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some((csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?, path))
        }
        None => None,
    };
    let meta = Checkpoint {
        model: model.config.clone(),
        frontend: corpus.frontend.clone(),
        speakers: corpus.speakers.clone(),
        stats: corpus.stats.clone(),
        step: 0,
    };
    let mut outcome = TrainOutcome {
        steps: 0,
        log: Vec::new(),
        last: LossBreakdown::default(),
        reached_target: false,
        checkpoints: Vec::new(),
    };
    for step in 0..cfg.max_steps {
        let idx = sampler.next_batch();
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &corpus.utterances[i]).collect();
        let loss = train_step(model, &mut adam, cfg, &batch, step)?;
        outcome.last = loss;
        outcome.steps = step + 1;
        let reached = cfg.stop_at_loss_rec.is_some_and(|t| loss.loss_rec < t);
        let last_step = step + 1 == cfg.max_steps || reached;
        if step % cfg.log_every == 0 || last_step {
            let row = LogRow::new(step, cfg, &loss);
            log::info!(
                "step {step} loss_rec {:.5} loss_spk {:.5} loss_total {:.5}",
                row.loss_rec,
                row.loss_spk,
                row.loss_total
            );
            if let Some((w, path)) = writer.as_mut() {
                w.serialize(row).map_err(|e| csv_error(path, e))?;
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            outcome.log.push(row);
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join("checkpoints").join(format!("step_{:06}.ckpt", step + 1));
                save_checkpoint(&path, model, &Checkpoint { step: step + 1, ..meta.clone() }, force)?;
                outcome.checkpoints.push(path);
            }
        }
        if reached {
            outcome.reached_target = true;
            break;
        }
    }
    if let Some(dir) = out {
        let path = dir.join(FINAL_CHECKPOINT);
        save_checkpoint(&path, model, &Checkpoint { step: outcome.steps, ..meta }, force)?;
        outcome.checkpoints.push(path);
    }
    Ok(outcome)
}

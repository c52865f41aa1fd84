//! Supervised training: masked cross-entropy, AdamW with step decay,
//! early stopping on a monitored metric, resumable state and a random
//! search tuner.

mod optim;
mod tuner;

pub use optim::{clip_global_norm, global_norm, AdamW, AdamWConfig, StepLr};
pub use tuner::{sample_trials, tune, Range, TrialOutcome, TrialRecord, TuneResult, TunerConfig};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use floodfuse_autograd::{Float, Graph, Var};
use ndarray::{ArrayD, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TileSample;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionAccumulator, Evaluator, MetricReport, IGNORE_LABEL};
use crate::model::{argmax_classes, stack_batch, Model};
use crate::nn::{Ctx, Mode};
use crate::params::{CheckpointMeta, ParameterStore};

/// Quantity watched for early stopping and best-checkpoint selection.
/// Higher is better for all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValMiou,
    ValMdice,
    /// mIoU of the training set re-evaluated in inference mode after each
    /// epoch.
    TrainMiou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub monitor: Monitor,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop as soon as the monitor reaches this value.
    pub stop_at: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            step_size: 20,
            gamma: 0.5,
            batch_size: 8,
            max_epochs: 100,
            early_stop_patience: 20,
            seed: 42,
            monitor: Monitor::ValMiou,
            clip_norm: Some(1.0),
            stop_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr must be > 0 (got {})", self.lr));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            bad.push(format!("gamma must lie in (0, 1] (got {})", self.gamma));
        }
        if self.early_stop_patience < 1 {
            bad.push("early_stop_patience must be >= 1".into());
        }
        if self.batch_size < 1 {
            bad.push("batch_size must be >= 1".into());
        }
        if self.step_size < 1 {
            bad.push("step_size must be >= 1".into());
        }
        if self.max_epochs < 1 {
            bad.push("max_epochs must be >= 1".into());
        }
        if self.weight_decay < 0.0 {
            bad.push("weight_decay must be >= 0".into());
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            bad.push("clip_norm must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("training: {}", bad.join("; "))))
        }
    }

    pub fn schedule(&self) -> StepLr {
        StepLr {
            base_lr: self.lr,
            step_size: self.step_size,
            gamma: self.gamma,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Mean cross-entropy over the non-ignored pixels of a batch.
pub struct LossOutput<'g, F: Float> {
    pub loss: Var<'g, F>,
    pub counted: usize,
    /// Every pixel carried the ignore label; `loss` is then 0.
    pub all_ignored: bool,
}

/// `logits` is `[N, K, H, W]`, `masks` the `[N, H, W]` labels flattened
/// row-major.
pub fn segmentation_loss<'g, F: Float>(logits: Var<'g, F>, masks: &[i64]) -> LossOutput<'g, F> {
    let ce = logits.cross_entropy(masks, IGNORE_LABEL);
    let all_ignored = ce.counted == 0;
    if all_ignored {
        log::warn!("every pixel in the batch is ignored; loss defined as 0");
    }
    LossOutput {
        loss: ce.loss,
        counted: ce.counted,
        all_ignored,
    }
}

/// Loss of a single `[K, H, W]` prediction against an `[H, W]` mask.
/// Returns the value and whether every pixel was ignored.
pub fn loss_value(logits: ArrayView3<f64>, mask: ArrayView2<i64>) -> Result<(f64, bool)> {
    let (_, h, w) = logits.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!("logits {h}x{w} vs mask {:?}", mask.dim())));
    }
    let g = Graph::<f64>::new();
    let x = g.constant(logits.insert_axis(Axis(0)).to_owned().into_dyn());
    let targets: Vec<i64> = mask.iter().copied().collect();
    let out = segmentation_loss(x, &targets);
    Ok((out.loss.item(), out.all_ignored))
}

/// Patience-based stopping on a higher-is-better metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    /// One-based epoch of the best value.
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records the metric of `epoch`; true when it is a new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        let improved = match self.best {
            None => !value.is_nan(),
            Some(b) => value > b,
        };
        if improved {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// From the training-mode predictions made during the epoch.
    pub train_miou: f64,
    pub train_eval_miou: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_miou: Option<f64>,
    pub val_mdice: Option<f64>,
    pub monitor: f64,
    pub improved: bool,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    Threshold,
}

/// Everything needed to continue a run after the last finished epoch.
#[derive(Debug, Clone)]
pub struct TrainState<F: Float> {
    pub epochs_done: usize,
    pub store: ParameterStore<F>,
    pub best: ParameterStore<F>,
    pub optimizer: AdamW<F>,
    pub stopper: EarlyStopping,
    pub history: Vec<EpochRecord>,
    pub finished: Option<StopReason>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    epochs_done: usize,
    stopper: EarlyStopping,
    history: Vec<EpochRecord>,
    finished: Option<StopReason>,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
const OPTIMIZER_CHECKPOINT: &str = "optimizer.ckpt";
const STATE_FILE: &str = "train_state.json";

impl<F: Float> TrainState<F> {
    pub fn new(store: ParameterStore<F>, cfg: &TrainConfig) -> Self {
        Self {
            epochs_done: 0,
            best: store.clone(),
            store,
            optimizer: AdamW::new(cfg.adamw()),
            stopper: EarlyStopping::new(cfg.early_stop_patience),
            history: Vec::new(),
            finished: None,
        }
    }

    /// Writes `last.ckpt`, `best.ckpt`, the optimizer moments and a JSON
    /// state file into `dir`.
    pub fn save(&self, dir: &Path, config: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = |epoch: usize| CheckpointMeta {
            step: self.optimizer.steps(),
            config: config.clone(),
            extra: serde_json::json!({ "epoch": epoch }),
        };
        self.store.save(&dir.join(LAST_CHECKPOINT), &meta(self.epochs_done))?;
        self.best.save(&dir.join(BEST_CHECKPOINT), &meta(self.stopper.best_epoch))?;
        self.optimizer.save(&dir.join(OPTIMIZER_CHECKPOINT))?;
        let file = StateFile {
            epochs_done: self.epochs_done,
            stopper: self.stopper.clone(),
            history: self.history.clone(),
            finished: self.finished,
        };
        let path = dir.join(STATE_FILE);
        let text = serde_json::to_string_pretty(&file).expect("state serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: StateFile = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let (store, _) = ParameterStore::load(&dir.join(LAST_CHECKPOINT))?;
        let (best, _) = ParameterStore::load(&dir.join(BEST_CHECKPOINT))?;
        let optimizer = AdamW::load(&dir.join(OPTIMIZER_CHECKPOINT))?;
        Ok(Self {
            epochs_done: file.epochs_done,
            store,
            best,
            optimizer,
            stopper: file.stopper,
            history: file.history,
            finished: file.finished,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F: Float> {
    /// Weights of the best-monitor epoch.
    pub best: ParameterStore<F>,
    pub best_epoch: usize,
    pub last: ParameterStore<F>,
    pub history: Vec<EpochRecord>,
    pub reason: StopReason,
}

/// Result of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub counted: usize,
    pub grad_norm: f64,
    /// Parameters the optimizer wrote.
    pub updated: Vec<String>,
    /// Training-mode class predictions `[B, H, W]`.
    pub predictions: ndarray::Array3<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub loss: f64,
}

fn masks_of(samples: &[&TileSample]) -> Vec<i64> {
    samples.iter().flat_map(|s| s.mask.iter().copied()).collect()
}

fn batch_of<F: Float>(samples: &[&TileSample]) -> ndarray::Array4<F> {
    let imgs: Vec<ndarray::Array3<F>> = samples.iter().map(|s| s.image.mapv(|v| F::of(v as f64))).collect();
    stack_batch(&imgs.iter().collect::<Vec<_>>())
}

/// Inference-mode metrics and mean loss (pixel weighted) over `samples`.
pub fn evaluate<F: Float>(model: &Model, store: &ParameterStore<F>, samples: &[TileSample], batch_size: usize) -> Result<Evaluation> {
    let mut ev = Evaluator::new(model.cfg.decoder.classes);
    let (mut loss_sum, mut pixels) = (0.0, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TileSample> = chunk.iter().collect();
        let g = Graph::<F>::new();
        let ctx = Ctx::inference(&g, store);
        let out = model.forward(&ctx, batch_of::<F>(&refs).view())?;
        let ce = segmentation_loss(out.logits, &masks_of(&refs));
        loss_sum += ce.loss.item().as_f64() * ce.counted as f64;
        pixels += ce.counted;
        let pred = argmax_classes(&out.logits.to_array());
        for (i, s) in chunk.iter().enumerate() {
            ev.add_image(&s.id, pred.index_axis(Axis(0), i), s.mask.view())?;
        }
    }
    Ok(Evaluation {
        report: ev.finish()?,
        loss: if pixels > 0 { loss_sum / pixels as f64 } else { 0.0 },
    })
}

/// Drives epochs over a fixed model structure.
pub struct Trainer<'m> {
    model: &'m Model,
    cfg: TrainConfig,
    snapshot_dir: Option<PathBuf>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            cfg,
            snapshot_dir: None,
        })
    }

    /// Where the weights are dumped if the loss turns non-finite.
    pub fn with_snapshot_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.snapshot_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Sample order of a zero-based epoch; depends only on seed and epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Forward, backward, clip and one AdamW update on `samples`.
    pub fn train_step<F: Float>(
        &self,
        store: &mut ParameterStore<F>,
        optimizer: &mut AdamW<F>,
        samples: &[&TileSample],
        lr: f64,
    ) -> Result<StepStats> {
        let masks = masks_of(samples);
        let batch = batch_of::<F>(samples);
        let (loss, counted, mut grads, buffers, predictions) = {
            let g = Graph::<F>::new();
            let ctx = Ctx::new(&g, store, Mode::Train);
            let out = self.model.forward(&ctx, batch.view())?;
            let ce = segmentation_loss(out.logits, &masks);
            let loss = ce.loss.item().as_f64();
            let predictions = argmax_classes(&out.logits.to_array());
            let mut grads_all = g.backward(ce.loss);
            let mut grads = BTreeMap::new();
            for (name, leaf) in ctx.leaves() {
                if store.get(&name).is_some_and(|e| e.trainable) {
                    let gr = grads_all
                        .take(leaf)
                        .unwrap_or_else(|| ArrayD::zeros(leaf.value().raw_dim()));
                    grads.insert(name, gr);
                }
            }
            (loss, ce.counted, grads, ctx.take_buffer_updates(), predictions)
        };
        if !loss.is_finite() {
            return Ok(StepStats {
                loss,
                counted,
                grad_norm: f64::NAN,
                updated: Vec::new(),
                predictions,
            });
        }
        let grad_norm = match self.cfg.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        let updated = optimizer.step(store, &grads, lr)?;
        for (name, value) in buffers {
            store.set_buffer(&name, value);
        }
        Ok(StepStats {
            loss,
            counted,
            grad_norm,
            updated,
            predictions,
        })
    }

    fn diverged<F: Float>(&self, store: &ParameterStore<F>, epoch: usize, batch: usize, loss: f64) -> Error {
        if let Some(dir) = &self.snapshot_dir {
            let meta = CheckpointMeta {
                step: 0,
                config: serde_json::to_value(&self.cfg).unwrap_or_default(),
                extra: serde_json::json!({ "epoch": epoch, "batch": batch, "loss": loss.to_string() }),
            };
            let path = dir.join("diverged.ckpt");
            match fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).and_then(|_| store.save(&path, &meta)) {
                Ok(()) => log::error!("non-finite loss; weights saved to {}", path.display()),
                Err(e) => log::error!("non-finite loss; snapshot failed: {e}"),
            }
        }
        Error::NonFiniteLoss { epoch, batch, loss }
    }

    /// Runs epochs from `state` until a stop condition holds. `on_epoch` is
    /// called after every epoch (e.g. to checkpoint the state).
    pub fn run<F: Float>(
        &self,
        mut state: TrainState<F>,
        train: &[TileSample],
        val: &[TileSample],
        mut on_epoch: impl FnMut(&TrainState<F>) -> Result<()>,
    ) -> Result<TrainOutcome<F>> {
        let cfg = &self.cfg;
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if val.is_empty() && matches!(cfg.monitor, Monitor::ValMiou | Monitor::ValMdice) {
            return Err(Error::Config("monitor needs a validation set but it is empty".into()));
        }
        if state.store.trainable_names().is_empty() {
            return Err(Error::Config("model has no trainable parameters".into()));
        }
        let classes = self.model.cfg.decoder.classes;
        let schedule = cfg.schedule();

        while state.finished.is_none() {
            let epoch0 = state.epochs_done;
            let epoch = epoch0 + 1;
            let lr = schedule.lr_at(epoch0);
            let started = Instant::now();
            let order = self.epoch_order(train.len(), epoch0);
            let mut acc = ConfusionAccumulator::new(classes);
            let (mut loss_sum, mut pixels, mut norm_sum, mut steps) = (0.0, 0usize, 0.0, 0usize);
            for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
                let samples: Vec<&TileSample> = idx.iter().map(|&i| &train[i]).collect();
                let stats = self.train_step(&mut state.store, &mut state.optimizer, &samples, lr)?;
                if !stats.loss.is_finite() {
                    return Err(self.diverged(&state.store, epoch, b + 1, stats.loss));
                }
                loss_sum += stats.loss * stats.counted as f64;
                pixels += stats.counted;
                norm_sum += stats.grad_norm;
                steps += 1;
                for (i, s) in samples.iter().enumerate() {
                    acc.update(stats.predictions.index_axis(Axis(0), i), s.mask.view())?;
                }
            }
            let train_miou = acc.compute()?.miou;
            let (val_loss, val_miou, val_mdice) = if val.is_empty() {
                (None, None, None)
            } else {
                let e = evaluate(self.model, &state.store, val, cfg.batch_size)?;
                (Some(e.loss), Some(e.report.miou), Some(e.report.mdice))
            };
            let train_eval_miou = if cfg.monitor == Monitor::TrainMiou {
                Some(evaluate(self.model, &state.store, train, cfg.batch_size)?.report.miou)
            } else {
                None
            };
            let monitor = match cfg.monitor {
                Monitor::ValMiou => val_miou.unwrap_or(f64::NAN),
                Monitor::ValMdice => val_mdice.unwrap_or(f64::NAN),
                Monitor::TrainMiou => train_eval_miou.unwrap_or(f64::NAN),
            };
            let improved = state.stopper.observe(epoch, monitor);
            if improved {
                state.best = state.store.clone();
            }
            let record = EpochRecord {
                epoch,
                lr,
                train_loss: if pixels > 0 { loss_sum / pixels as f64 } else { 0.0 },
                train_miou,
                train_eval_miou,
                val_loss,
                val_miou,
                val_mdice,
                monitor,
                improved,
                grad_norm: norm_sum / steps.max(1) as f64,
                seconds: started.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {epoch}: loss {:.5} train mIoU {:.4} monitor {:.4} lr {:.2e}",
                record.train_loss,
                record.train_miou,
                monitor,
                lr
            );
            state.history.push(record);
            state.epochs_done = epoch;
            state.finished = if cfg.stop_at.is_some_and(|t| monitor >= t) {
                Some(StopReason::Threshold)
            } else if state.stopper.should_stop() {
                Some(StopReason::EarlyStop)
            } else if epoch >= cfg.max_epochs {
                Some(StopReason::MaxEpochs)
            } else {
                None
            };
            on_epoch(&state)?;
        }
        Ok(TrainOutcome {
            best: state.best,
            best_epoch: state.stopper.best_epoch,
            last: state.store,
            history: state.history,
            reason: state.finished.expect("loop exits only when finished"),
        })
    }
}

/// Trains from `init` with no per-epoch callback.
pub fn train<F: Float>(
    model: &Model,
    init: ParameterStore<F>,
    train_set: &[TileSample],
    val_set: &[TileSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    let trainer = Trainer::new(model, cfg.clone())?;
    trainer.run(TrainState::new(init, cfg), train_set, val_set, |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn patience_returns_best_epoch() {
        let mut s = EarlyStopping::new(2);
        let mut stopped_at = None;
        for (i, v) in [0.5, 0.6, 0.59, 0.58, 0.7].into_iter().enumerate() {
            s.observe(i + 1, v);
            if s.should_stop() {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(4));
        assert_eq!(s.best_epoch, 2);
        assert_eq!(s.best, Some(0.6));
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let (l, ignored) = loss_value(Array3::zeros((2, 3, 3)).view(), ndarray::Array2::ones((3, 3)).view()).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(!ignored);
    }

    #[test]
    fn confident_logits_cost_nothing() {
        let logits = array![[[-50.0, 50.0]], [[50.0, -50.0]]];
        let (l, _) = loss_value(logits.view(), array![[1, 0]].view()).unwrap();
        assert!(l < 1e-30);
    }

    #[test]
    fn hand_computed_two_by_two() {
        let logits = array![[[1.0, -0.5], [0.2, 2.0]], [[0.0, 0.5], [-1.0, 1.0]]];
        let mask = array![[0, 1], [IGNORE_LABEL, 0]];
        let nll = |a: f64, b: f64, t: usize| {
            let lse = (a.exp() + b.exp()).ln();
            lse - if t == 0 { a } else { b }
        };
        let expect = (nll(1.0, 0.0, 0) + nll(-0.5, 0.5, 1) + nll(2.0, 1.0, 0)) / 3.0;
        let (l, _) = loss_value(logits.view(), mask.view()).unwrap();
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_zero_and_flagged() {
        let mask = ndarray::Array2::from_elem((2, 2), IGNORE_LABEL);
        let (l, ignored) = loss_value(Array3::ones((2, 2, 2)).view(), mask.view()).unwrap();
        assert_eq!(l, 0.0);
        assert!(ignored);
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { gamma: 0.0, ..Default::default() },
            TrainConfig { gamma: 1.5, ..Default::default() },
            TrainConfig { early_stop_patience: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().unwrap_err().is_config());
        }
    }
}

//! Random search over learning rate, weight decay and the step schedule.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};

/// Inclusive `[lo, hi]` bounds.
pub type Range<T> = [T; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TunerConfig {
    pub n_trials: usize,
    pub trial_epochs: usize,
    pub trial_patience: usize,
    /// Log-uniform.
    pub lr: Range<f64>,
    /// Log-uniform.
    pub weight_decay: Range<f64>,
    /// Uniform over integers.
    pub step_size: Range<usize>,
    /// Uniform.
    pub gamma: Range<f64>,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            n_trials: 20,
            trial_epochs: 60,
            trial_patience: 10,
            lr: [1e-5, 1e-3],
            weight_decay: [1e-6, 1e-2],
            step_size: [5, 30],
            gamma: [0.1, 0.9],
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_trials < 1 {
            bad.push("n_trials must be >= 1".to_string());
        }
        if self.trial_epochs < 1 || self.trial_patience < 1 {
            bad.push("trial_epochs and trial_patience must be >= 1".into());
        }
        for (name, [lo, hi]) in [("lr", self.lr), ("weight_decay", self.weight_decay)] {
            if !(lo > 0.0 && lo <= hi) {
                bad.push(format!("{name} bounds must satisfy 0 < lo <= hi (got [{lo}, {hi}])"));
            }
        }
        if !(self.step_size[0] >= 1 && self.step_size[0] <= self.step_size[1]) {
            bad.push(format!("step_size bounds must satisfy 1 <= lo <= hi (got {:?})", self.step_size));
        }
        let [glo, ghi] = self.gamma;
        if !(glo > 0.0 && glo <= ghi && ghi <= 1.0) {
            bad.push(format!("gamma bounds must satisfy 0 < lo <= hi <= 1 (got [{glo}, {ghi}])"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("tuner: {}", bad.join("; "))))
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, [lo, hi]: Range<f64>) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.random_range(lo.ln()..=hi.ln()).exp()
}

/// The `n_trials` configurations a search with `seed` will try, in order.
pub fn sample_trials(base: &TrainConfig, cfg: &TunerConfig, seed: u64) -> Result<Vec<TrainConfig>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..cfg.n_trials)
        .map(|_| {
            let lr = log_uniform(&mut rng, cfg.lr);
            let weight_decay = log_uniform(&mut rng, cfg.weight_decay);
            let step_size = rng.random_range(cfg.step_size[0]..=cfg.step_size[1]);
            let gamma = rng.random_range(cfg.gamma[0]..=cfg.gamma[1]);
            TrainConfig {
                lr,
                weight_decay,
                step_size,
                gamma,
                max_epochs: cfg.trial_epochs,
                early_stop_patience: cfg.trial_patience,
                ..base.clone()
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub outcome: TrialOutcome,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub best_trial: usize,
    pub best_config: TrainConfig,
    pub trials: Vec<TrialRecord>,
}

impl TuneResult {
    pub fn table(&self) -> String {
        render_table(&self.trials)
    }
}

fn render_table(rows: &[TrialRecord]) -> String {
    let mut s = String::from("trial        lr   weight_decay  step  gamma  outcome    val\n");
    for r in rows {
        let val = r.val_metric.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            s,
            "{:>5}  {:>8.2e}  {:>13.2e}  {:>4}  {:>5.3}  {:<9}  {val}",
            r.trial,
            r.lr,
            r.weight_decay,
            r.step_size,
            r.gamma,
            format!("{:?}", r.outcome).to_lowercase(),
        );
    }
    s
}

/// Runs every sampled trial through `run_trial`, which returns the final
/// validation monitor. A non-finite-loss error or a NaN metric marks the
/// trial diverged; other errors abort the search.
pub fn tune(
    base: &TrainConfig,
    cfg: &TunerConfig,
    seed: u64,
    mut run_trial: impl FnMut(usize, &TrainConfig) -> Result<f64>,
) -> Result<TuneResult> {
    let configs = sample_trials(base, cfg, seed)?;
    let mut trials = Vec::with_capacity(configs.len());
    for (i, c) in configs.iter().enumerate() {
        let metric = match run_trial(i, c) {
            Ok(v) if v.is_finite() => Some(v),
            Ok(_) | Err(Error::NonFiniteLoss { .. }) => None,
            Err(e) => return Err(e),
        };
        log::info!("trial {i}: lr {:.2e} -> {:?}", c.lr, metric);
        trials.push(TrialRecord {
            trial: i,
            lr: c.lr,
            weight_decay: c.weight_decay,
            step_size: c.step_size,
            gamma: c.gamma,
            outcome: if metric.is_some() {
                TrialOutcome::Completed
            } else {
                TrialOutcome::Diverged
            },
            val_metric: metric,
        });
    }
    let best = trials
        .iter()
        .filter_map(|t| t.val_metric.map(|v| (t.trial, v)))
        .fold(None::<(usize, f64)>, |acc, (i, v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((i, v)),
        });
    match best {
        Some((i, _)) => Ok(TuneResult {
            best_trial: i,
            best_config: configs[i].clone(),
            trials,
        }),
        None => Err(Error::AllTrialsDiverged {
            trials: trials.len(),
            table: render_table(&trials),
        }),
    }
}

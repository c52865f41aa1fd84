//! One function per subcommand. Each returns the directory it wrote.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use floodfuse_core::data::{kfold_split, write_native_tile, FoldAssignment, TileSample, TEST_SPLIT, TRAIN_SPLIT, VAL_SPLIT};
use floodfuse_core::embed::{export_embedding, EmbeddingStage};
use floodfuse_core::metrics::MetricReport;
use floodfuse_core::model::{AblationRow, Model};
use floodfuse_core::params::{CheckpointMeta, Component, Inventory, ParameterStore};
use floodfuse_core::train::{evaluate, tune, Evaluation, StopReason, TrainOutcome, TrainState, Trainer, TrialRecord};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{self, LoadedData};
use crate::error::{CliError, Result};
use crate::output::{
    line_plot, plot_history, write_csv, write_history, write_per_image, RunDir, CHECKPOINT_DIR, CONFIG_SNAPSHOT,
    METRICS_CSV, PER_IMAGE_CSV, REPORT_JSON,
};

/// Invocation-wide settings.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    /// Output root when the config has no `[output] dir`.
    pub output_root: Option<PathBuf>,
    /// Command line, recorded in run manifests.
    pub args: Vec<String>,
}

impl Settings {
    fn run_dir(&self, cfg: &ExperimentConfig, command: &str) -> Result<RunDir> {
        let dir = RunDir::create(&cfg.output_root(self.output_root.as_deref()), &cfg.output.name, command)?;
        dir.write_header(cfg, command, &self.args)?;
        Ok(dir)
    }
}

/// Final scores of a training run, as written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Split the metrics below were computed on.
    pub split: String,
    pub miou: f64,
    pub mdice: f64,
    pub iou_per_class: Vec<Option<f64>>,
    pub dice_per_class: Vec<Option<f64>>,
    pub pixels: u64,
    pub loss: f64,
    pub val_miou: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    pub trainable_params: usize,
}

pub struct FitOutput {
    pub outcome: TrainOutcome<f32>,
    pub val: Option<Evaluation>,
    pub test: Option<Evaluation>,
    pub trainable_params: usize,
}

impl FitOutput {
    pub fn report(&self) -> RunReport {
        let (split, e) = match (&self.test, &self.val) {
            (Some(t), _) => (TEST_SPLIT, t),
            (None, Some(v)) => (VAL_SPLIT, v),
            (None, None) => ("none", &EMPTY_EVAL),
        };
        RunReport {
            split: split.to_string(),
            miou: e.report.miou,
            mdice: e.report.mdice,
            iou_per_class: e.report.iou_per_class.clone(),
            dice_per_class: e.report.dice_per_class.clone(),
            pixels: e.report.pixels,
            loss: e.loss,
            val_miou: self.val.as_ref().map(|v| v.report.miou),
            best_epoch: self.outcome.best_epoch,
            epochs_run: self.outcome.history.len(),
            stop_reason: self.outcome.reason,
            trainable_params: self.trainable_params,
        }
    }
}

static EMPTY_EVAL: Evaluation = Evaluation {
    report: MetricReport {
        iou_per_class: Vec::new(),
        dice_per_class: Vec::new(),
        miou: f64::NAN,
        mdice: f64::NAN,
        pixels: 0,
        per_image_miou: Vec::new(),
    },
    loss: f64::NAN,
};

/// Trains `cfg`'s model on `train`, picks the best epoch by the monitor and
/// scores it on `val` and `test`. With `dir`, checkpoints, the per-epoch
/// CSV, plots and the report are written there.
pub fn fit(
    cfg: &ExperimentConfig,
    train: &[TileSample],
    val: &[TileSample],
    test: &[TileSample],
    dir: Option<&RunDir>,
    resume: Option<TrainState<f32>>,
) -> Result<FitOutput> {
    let model = Model::build(&cfg.model())?;
    let tc = cfg.training.clone();
    let state = resume.unwrap_or_else(|| TrainState::new(model.init_store(tc.seed), &tc));
    let trainable_params = state.store.num_elements(true);
    let mut trainer = Trainer::new(&model, tc.clone())?;
    if let Some(d) = dir {
        trainer = trainer.with_snapshot_dir(d.join(CHECKPOINT_DIR));
    }
    let cfg_json = serde_json::to_value(cfg).expect("config serializes");
    let every_epoch = cfg.output.checkpoint_every_epoch;
    let outcome = trainer.run(state, train, val, |st| match dir {
        Some(d) if every_epoch => st.save(&d.join(CHECKPOINT_DIR), &cfg_json),
        _ => Ok(()),
    })?;
    let eval = |set: &[TileSample]| -> Result<Option<Evaluation>> {
        if set.is_empty() {
            Ok(None)
        } else {
            Ok(Some(evaluate(&model, &outcome.best, set, tc.batch_size)?))
        }
    };
    let out = FitOutput {
        val: eval(val)?,
        test: eval(test)?,
        outcome: outcome.clone(),
        trainable_params,
    };
    if let Some(d) = dir {
        let meta = CheckpointMeta {
            step: out.outcome.best_epoch as u64,
            config: cfg_json,
            extra: serde_json::json!({ "best_epoch": out.outcome.best_epoch }),
        };
        out.outcome.best.save(&d.join("model.ckpt"), &meta)?;
        write_history(&d.join(METRICS_CSV), &out.outcome.history)?;
        d.write_json(REPORT_JSON, &out.report())?;
        if let Some(e) = out.test.as_ref().or(out.val.as_ref()) {
            write_per_image(&d.join(PER_IMAGE_CSV), &e.report)?;
        }
        if cfg.output.plots {
            plot_history(d, &out.outcome.history)?;
        }
    }
    Ok(out)
}

fn standard_splits(data: &LoadedData) -> (Vec<TileSample>, Vec<TileSample>, Vec<TileSample>) {
    (data.split(TRAIN_SPLIT), data.split(VAL_SPLIT), data.split(TEST_SPLIT))
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub seed: Option<u64>,
    /// Run directory of an interrupted run to continue.
    pub resume: Option<PathBuf>,
}

pub fn cmd_train(config: &Path, opts: &TrainOptions, settings: &Settings) -> Result<PathBuf> {
    let cfg = load_config(config, opts.seed)?;
    let data = dataset::load(&cfg)?;
    let (dir, state) = match &opts.resume {
        Some(run) => {
            let snap_path = run.join(CONFIG_SNAPSHOT);
            let snap = std::fs::read_to_string(&snap_path).map_err(|e| CliError::io(&snap_path, e))?;
            let previous = ExperimentConfig::parse(&snap, &snap_path)?;
            if previous.hash() != cfg.hash() {
                return Err(CliError::config(
                    config,
                    format!("configuration differs from the one recorded in {}", snap_path.display()),
                ));
            }
            let state = TrainState::load(&run.join(CHECKPOINT_DIR))?;
            log::info!("resuming after epoch {}", state.epochs_done);
            (RunDir::at(run)?, Some(state))
        }
        None => (settings.run_dir(&cfg, "train")?, None),
    };
    let (train, val, test) = standard_splits(&data);
    let out = fit(&cfg, &train, &val, &test, Some(&dir), state)?;
    let r = out.report();
    log::info!("{} mIoU {:.4} mDice {:.4} (best epoch {})", r.split, r.miou, r.mdice, r.best_epoch);
    Ok(dir.path)
}

pub fn cmd_evaluate(config: &Path, checkpoint: &Path, split: &str, settings: &Settings) -> Result<PathBuf> {
    let cfg = load_config(config, None)?;
    let data = dataset::load(&cfg)?;
    let set = data.split(split);
    if set.is_empty() {
        return Err(CliError::Usage(format!(
            "split {split:?} is empty or unknown (available: {})",
            data.splits.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    let model = Model::build(&cfg.model())?;
    let (store, _) = ParameterStore::<f32>::load(checkpoint)?;
    check_store_matches(&model, &store, checkpoint)?;
    let e = evaluate(&model, &store, &set, cfg.training.batch_size)?;
    let dir = settings.run_dir(&cfg, "evaluate")?;
    #[derive(Serialize)]
    struct EvalReport<'a> {
        split: &'a str,
        checkpoint: &'a Path,
        miou: f64,
        mdice: f64,
        iou_per_class: &'a [Option<f64>],
        dice_per_class: &'a [Option<f64>],
        pixels: u64,
        loss: f64,
    }
    dir.write_json(
        REPORT_JSON,
        &EvalReport {
            split,
            checkpoint,
            miou: e.report.miou,
            mdice: e.report.mdice,
            iou_per_class: &e.report.iou_per_class,
            dice_per_class: &e.report.dice_per_class,
            pixels: e.report.pixels,
            loss: e.loss,
        },
    )?;
    write_per_image(&dir.join(PER_IMAGE_CSV), &e.report)?;
    Ok(dir.path)
}

fn check_store_matches(model: &Model, store: &ParameterStore<f32>, path: &Path) -> Result<()> {
    for spec in model.registry().params() {
        match store.get(&spec.name) {
            Some(e) if e.value.shape() == spec.shape.as_slice() => {}
            Some(e) => {
                return Err(CliError::config(
                    path,
                    format!("{} has shape {:?}, model expects {:?}", spec.name, e.value.shape(), spec.shape),
                ))
            }
            None => return Err(CliError::config(path, format!("checkpoint lacks {}", spec.name))),
        }
    }
    Ok(())
}

pub fn cmd_tune(config: &Path, settings: &Settings) -> Result<PathBuf> {
    let cfg = load_config(config, None)?;
    let data = dataset::load(&cfg)?;
    let (train, val, _) = standard_splits(&data);
    let dir = settings.run_dir(&cfg, "tune")?;
    let result = tune(&cfg.training, &cfg.tuner, cfg.training.seed, |i, tc| {
        let mut trial = cfg.clone();
        trial.training = tc.clone();
        let out = fit(&trial, &train, &val, &[], None, None).map_err(|e| match e {
            CliError::Core(c) => c,
            other => floodfuse_core::Error::Data(other.to_string()),
        })?;
        let best = out.outcome.history.iter().map(|r| r.monitor).fold(f64::NAN, f64::max);
        log::info!("trial {i} best monitor {best:.4}");
        Ok(best)
    })?;
    write_csv(&dir.join("trials.csv"), &result.trials)?;
    let mut best = cfg.clone();
    best.training = result.best_config.clone();
    dir.write_text("best_config.toml", &best.snapshot())?;
    #[derive(Serialize)]
    struct TuneReport<'a> {
        best_trial: usize,
        best_lr: f64,
        best_weight_decay: f64,
        best_step_size: usize,
        best_gamma: f64,
        trials: &'a [TrialRecord],
    }
    let c = &result.best_config;
    dir.write_json(
        REPORT_JSON,
        &TuneReport {
            best_trial: result.best_trial,
            best_lr: c.lr,
            best_weight_decay: c.weight_decay,
            best_step_size: c.step_size,
            best_gamma: c.gamma,
            trials: &result.trials,
        },
    )?;
    println!("{}", result.table());
    Ok(dir.path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub miou: f64,
    pub mdice: f64,
    pub best_epoch: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfoldReport {
    pub k: usize,
    pub folds: Vec<FoldSummary>,
    pub miou_mean: f64,
    /// Sample standard deviation across folds.
    pub miou_std: f64,
    pub mdice_mean: f64,
    pub mdice_std: f64,
    /// Pooled per-image test mIoU of every fold.
    pub per_image_miou_mean: f64,
    pub per_image_miou_std: f64,
    pub per_image_miou: Vec<(String, f64)>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn cmd_kfold(config: &Path, k: usize, settings: &Settings) -> Result<PathBuf> {
    let cfg = load_config(config, None)?;
    let data = dataset::load(&cfg)?;
    let folds = kfold_split(&data.ids(), k, cfg.dataset.ratios, cfg.dataset.split_seed)?;
    let dir = settings.run_dir(&cfg, "kfold")?;
    dir.write_json("folds.json", &folds)?;
    let mut summaries = Vec::new();
    let mut pool = Vec::new();
    for FoldAssignment { fold, train, val, test } in &folds {
        let sub = RunDir::at(dir.join(&format!("fold_{fold}")))?;
        sub.write_header(&cfg, &format!("kfold/fold_{fold}"), &settings.args)?;
        let out = fit(&cfg, &data.by_ids(train), &data.by_ids(val), &data.by_ids(test), Some(&sub), None)?;
        let r = out.report();
        pool.extend(out.test.as_ref().map(|t| t.report.per_image_miou.clone()).unwrap_or_default());
        log::info!("fold {fold}: test mIoU {:.4}", r.miou);
        summaries.push(FoldSummary {
            fold: *fold,
            miou: r.miou,
            mdice: r.mdice,
            best_epoch: r.best_epoch,
            train: train.len(),
            val: val.len(),
            test: test.len(),
        });
    }
    let (miou_mean, miou_std) = mean_std(&summaries.iter().map(|s| s.miou).collect::<Vec<_>>());
    let (mdice_mean, mdice_std) = mean_std(&summaries.iter().map(|s| s.mdice).collect::<Vec<_>>());
    let (pm, ps) = if pool.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        mean_std(&pool.iter().map(|p| p.1).collect::<Vec<_>>())
    };
    write_csv(&dir.join("kfold.csv"), &summaries)?;
    let report = KfoldReport {
        k,
        folds: summaries,
        miou_mean,
        miou_std,
        mdice_mean,
        mdice_std,
        per_image_miou_mean: pm,
        per_image_miou_std: ps,
        per_image_miou: pool,
    };
    write_per_image(
        &dir.join(PER_IMAGE_CSV),
        &MetricReport {
            per_image_miou: report.per_image_miou.clone(),
            ..EMPTY_EVAL.report.clone()
        },
    )?;
    dir.write_json("aggregate.json", &report)?;
    Ok(dir.path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub beta: f64,
    pub val_miou: f64,
    pub test_miou: f64,
    pub best_epoch: usize,
}

pub const DEFAULT_BETAS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

pub fn cmd_beta_sweep(config: &Path, betas: &[f64], settings: &Settings) -> Result<PathBuf> {
    let cfg = load_config(config, None)?;
    if betas.is_empty() {
        return Err(CliError::Usage("at least one beta is required".into()));
    }
    if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(CliError::config(config, format!("beta {b} outside [0, 1]")));
    }
    if !cfg.ablation.cnn || !cfg.ablation.m2faf {
        return Err(CliError::config(config, "beta sweep needs the CNN branch and attention fusion enabled"));
    }
    let data = dataset::load(&cfg)?;
    let (train, val, test) = standard_splits(&data);
    let dir = settings.run_dir(&cfg, "beta-sweep")?;
    let mut rows = Vec::new();
    for &beta in betas {
        let mut c = cfg.clone();
        c.fusion.beta = beta;
        let out = fit(&c, &train, &val, &test, None, None)?;
        let row = BetaRow {
            beta,
            val_miou: out.val.as_ref().map_or(f64::NAN, |e| e.report.miou),
            test_miou: out.test.as_ref().map_or(f64::NAN, |e| e.report.miou),
            best_epoch: out.outcome.best_epoch,
        };
        log::info!("beta {beta}: val mIoU {:.4}", row.val_miou);
        rows.push(row);
    }
    write_csv(&dir.join("beta_sweep.csv"), &rows)?;
    if cfg.output.plots {
        let series = vec![
            ("val".to_string(), rows.iter().map(|r| (r.beta, r.val_miou)).collect()),
            ("test".to_string(), rows.iter().map(|r| (r.beta, r.test_miou)).collect()),
        ];
        line_plot(&dir.join("beta_sweep.svg"), "Bias factor sweep", "beta", "mIoU", &series)?;
    }
    Ok(dir.path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationTable {
    Modules,
    CnnWidths,
}

impl FromStr for AblationTable {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modules" => Ok(Self::Modules),
            "cnn_widths" | "cnn-widths" => Ok(Self::CnnWidths),
            other => Err(CliError::Usage(format!("unknown ablation table {other:?} (modules, cnn_widths)"))),
        }
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Modules => "modules",
            Self::CnnWidths => "cnn_widths",
        })
    }
}

pub const CNN_WIDTH_ROWS: [[usize; 4]; 4] = [[16, 32, 64, 128], [32, 64, 128, 256], [64, 128, 256, 512], [128, 256, 512, 1024]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: String,
    pub adapters: bool,
    pub residual: bool,
    pub cam: bool,
    pub m2faf: bool,
    pub cnn: bool,
    pub widths: String,
    pub seed: u64,
    pub max_epochs: usize,
    pub trainable_params: usize,
    pub val_miou: f64,
    pub test_miou: f64,
    pub test_mdice: f64,
    pub best_epoch: usize,
}

/// Experiment configurations of an ablation table, with row labels.
pub fn ablation_rows(cfg: &ExperimentConfig, table: AblationTable) -> Vec<(String, ExperimentConfig)> {
    match table {
        AblationTable::Modules => AblationRow::ALL
            .iter()
            .map(|r| {
                let mut c = cfg.clone();
                c.ablation = r.flags();
                (r.name().to_string(), c)
            })
            .collect(),
        AblationTable::CnnWidths => CNN_WIDTH_ROWS
            .iter()
            .map(|w| {
                let mut c = cfg.clone();
                c.cnn.widths = w.to_vec();
                (format!("{w:?}"), c)
            })
            .collect(),
    }
}

pub fn cmd_ablate(config: &Path, table: AblationTable, settings: &Settings) -> Result<PathBuf> {
    let cfg = load_config(config, None)?;
    let data = dataset::load(&cfg)?;
    let (train, val, test) = standard_splits(&data);
    let dir = settings.run_dir(&cfg, &format!("ablate-{table}"))?;
    let mut results = Vec::new();
    for (name, c) in ablation_rows(&cfg, table) {
        log::info!("ablation row {name}");
        let out = fit(&c, &train, &val, &test, None, None)?;
        let f = c.ablation;
        results.push(AblationResult {
            row: name,
            adapters: f.adapters,
            residual: f.residual,
            cam: f.cam,
            m2faf: f.m2faf,
            cnn: f.cnn,
            widths: format!("{:?}", c.cnn.widths),
            seed: c.training.seed,
            max_epochs: c.training.max_epochs,
            trainable_params: out.trainable_params,
            val_miou: out.val.as_ref().map_or(f64::NAN, |e| e.report.miou),
            test_miou: out.test.as_ref().map_or(f64::NAN, |e| e.report.miou),
            test_mdice: out.test.as_ref().map_or(f64::NAN, |e| e.report.mdice),
            best_epoch: out.outcome.best_epoch,
        });
    }
    write_csv(&dir.join(&format!("ablation_{table}.csv")), &results)?;
    Ok(dir.path)
}

/// Writes the configured dataset as native tiles plus `splits.json`.
pub fn cmd_synth_data(config: &Path, out: &Path) -> Result<PathBuf> {
    let cfg = load_config(config, None)?;
    let data = dataset::load(&cfg)?;
    let dir = RunDir::at(out)?;
    for s in &data.samples {
        write_native_tile(&dir.path, &s.id, &s.image, &s.mask)?;
    }
    let named: BTreeMap<&String, Vec<&str>> = data
        .splits
        .iter()
        .map(|(k, idx)| (k, idx.iter().map(|&i| data.samples[i].id.as_str()).collect()))
        .collect();
    dir.write_json("splits.json", &named)?;
    Ok(dir.path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InventoryReport {
    pub components: Vec<InventoryEntry>,
    pub total: usize,
    pub trainable: usize,
    pub adapter_blocks: usize,
    /// Counted from the registered adapter tensors of block 0.
    pub adapter_params_per_block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InventoryEntry {
    pub component: String,
    pub trainable: bool,
    pub tensors: usize,
    pub parameters: usize,
}

pub fn inventory_report(model: &Model) -> InventoryReport {
    let inv: Inventory = model.inventory();
    let per_block = model
        .registry()
        .params()
        .iter()
        .filter(|p| p.component == Component::Adapter && p.name.starts_with("adapter.0."))
        .map(|p| p.numel())
        .sum();
    InventoryReport {
        components: inv
            .rows
            .iter()
            .map(|r| InventoryEntry {
                component: r.component.as_str().to_string(),
                trainable: r.trainable,
                tensors: r.tensors,
                parameters: r.parameters,
            })
            .collect(),
        total: inv.total,
        trainable: inv.trainable,
        adapter_blocks: if model.vit.has_adapters() { model.cfg.backbone.depth } else { 0 },
        adapter_params_per_block: per_block,
    }
}

/// Prints the parameter table; with `out`, also writes `inventory.json`.
pub fn cmd_inventory(config: &Path, out: Option<&Path>) -> Result<InventoryReport> {
    let cfg = load_config(config, None)?;
    let model = Model::build(&cfg.model())?;
    let report = inventory_report(&model);
    println!("{}", model.inventory());
    println!(
        "adapter parameters per block: {} ({} blocks)",
        report.adapter_params_per_block, report.adapter_blocks
    );
    if let Some(o) = out {
        RunDir::at(o)?.write_json("inventory.json", &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct ExportOptions {
    pub checkpoint: Option<PathBuf>,
    /// Sample id; defaults to the first test (else first) tile.
    pub sample: Option<String>,
    pub levels: Vec<usize>,
    pub stages: Vec<EmbeddingStage>,
}

pub fn cmd_export_embeddings(config: &Path, opts: &ExportOptions, settings: &Settings) -> Result<PathBuf> {
    let cfg = load_config(config, None)?;
    let model = Model::build(&cfg.model())?;
    let store = match &opts.checkpoint {
        Some(p) => {
            let (s, _) = ParameterStore::<f32>::load(p)?;
            check_store_matches(&model, &s, p)?;
            s
        }
        None => model.init_store(cfg.training.seed),
    };
    let data = dataset::load(&cfg)?;
    let sample = match &opts.sample {
        Some(id) => data
            .by_ids(std::slice::from_ref(id))
            .pop()
            .ok_or_else(|| CliError::Usage(format!("no sample with id {id:?}")))?,
        None => data
            .split(TEST_SPLIT)
            .into_iter()
            .next()
            .or_else(|| data.samples.first().cloned())
            .ok_or_else(|| CliError::Usage("dataset is empty".into()))?,
    };
    let levels = if opts.levels.is_empty() { vec![1, 2, 3, 4] } else { opts.levels.clone() };
    let stages = if opts.stages.is_empty() {
        EmbeddingStage::ALL
            .into_iter()
            .filter(|s| *s != EmbeddingStage::PreFusionCnn || model.cnn.is_some())
            .collect()
    } else {
        opts.stages.clone()
    };
    let dir = settings.run_dir(&cfg, "embeddings")?;
    #[derive(Serialize)]
    struct Entry {
        sample: String,
        stage: String,
        level: usize,
        shape: [usize; 3],
        features: PathBuf,
        png: PathBuf,
    }
    let mut index = Vec::new();
    for &stage in &stages {
        for &level in &levels {
            let f = export_embedding(&model, &store, &sample.image, level, stage, &dir.path, &sample.id)?;
            index.push(Entry {
                sample: sample.id.clone(),
                stage: stage.to_string(),
                level,
                shape: f.shape,
                features: f.features,
                png: f.png,
            });
        }
    }
    dir.write_json("embeddings.json", &index)?;
    Ok(dir.path)
}

//! Acceptance criteria. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion; the process fails if any criterion fails.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use floodfuse_autograd::check::{central_difference, relative_error};
use floodfuse_autograd::{Graph, Var};
use floodfuse_cli::commands::{cmd_ablate, cmd_beta_sweep, cmd_inventory, cmd_train, fit, AblationTable, Settings, TrainOptions};
use floodfuse_cli::config::ExperimentConfig;
use floodfuse_core::cnn::{Cam, ResidualBlock};
use floodfuse_core::data::{generate_dataset, kfold_split, split_sizes, SplitRatios, TileSample};
use floodfuse_core::fusion::fuse_level;
use floodfuse_core::metrics::{ConfusionAccumulator, IGNORE_LABEL};
use floodfuse_core::model::{AblationRow, Model, ModelConfig};
use floodfuse_core::neck::level_channels;
use floodfuse_core::nn::{Conv2d, Ctx, Mode};
use floodfuse_core::params::{Component, ParameterStore, Registry};
use floodfuse_core::train::{AdamW, Monitor, Trainer};
use floodfuse_core::vit::{AdaptedVit, AdapterWeights, BackboneConfig};
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < budget_s as f64, || {
        format!("took {:.1} s, budget {budget_s} s", elapsed.as_secs_f64())
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(lo..hi))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn toy_config() -> Result<ExperimentConfig, String> {
    ExperimentConfig::load(&configs().join("toy.toml")).map_err(err)
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<PathBuf, String> {
    let p = dir.join("experiment.toml");
    std::fs::write(&p, cfg.snapshot()).map_err(err)?;
    Ok(p)
}

fn read_csv(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>), String> {
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let headers = r.headers().map_err(err)?.clone();
    let rows = r.records().collect::<Result<Vec<_>, _>>().map_err(err)?;
    Ok((headers, rows))
}

fn column(headers: &csv::StringRecord, row: &csv::StringRecord, name: &str) -> Result<String, String> {
    let i = headers.iter().position(|h| h == name).ok_or(format!("no column {name}"))?;
    Ok(row[i].to_string())
}

fn number(headers: &csv::StringRecord, row: &csv::StringRecord, name: &str) -> Result<f64, String> {
    column(headers, row, name)?.parse().map_err(err)
}

fn settings(root: &Path) -> Settings {
    Settings {
        output_root: Some(root.to_path_buf()),
        args: vec!["acceptance".into()],
    }
}

fn zero_init_identity() -> Outcome {
    let start = Instant::now();
    let cfg = BackboneConfig::toy();
    let mut reg = Registry::new();
    let vit = AdaptedVit::new(&mut reg, &cfg, true).map_err(err)?;
    let store: ParameterStore<f32> = reg.init_store(3);
    for a in vit.adapters() {
        for name in [&a.w2, &a.b2] {
            ensure(store.value(name).iter().all(|v| *v == 0.0), || format!("{name} not zero at init"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f32;
    for _ in 0..10 {
        let x = uniform(&[1, cfg.in_channels, 64, 64], -2.0, 2.0, &mut rng).mapv(|v| v as f32);
        let g = Graph::new();
        let ctx = Ctx::inference(&g, &store);
        let (adapted, _) = vit.forward_features_with(&ctx, g.constant(x.clone()), true).map_err(err)?;
        let (bare, _) = vit.forward_features_with(&ctx, g.constant(x), false).map_err(err)?;
        for (a, b) in adapted.iter().zip(&bare) {
            let d = (&a.to_array() - &b.to_array()).iter().fold(0.0f32, |m, v| m.max(v.abs()));
            worst = worst.max(d);
        }
    }
    ensure(worst == 0.0, || format!("max |diff| {worst:e}"))?;
    within(start.elapsed(), 10)?;
    Ok(format!("max |diff| 0 over 10 inputs x 4 taps ({:.1} s)", start.elapsed().as_secs_f64()))
}

fn freeze_contract() -> Outcome {
    let start = Instant::now();
    let cfg = toy_config()?;
    let model = Model::build(&cfg.model()).map_err(err)?;
    let spec = cfg.dataset.synthetic.scene_spec(&cfg.channels);
    let samples = generate_dataset(&spec, 4, "frz").map_err(err)?;
    let batch: Vec<&TileSample> = samples.iter().collect();
    let trainer = Trainer::new(&model, cfg.training.clone()).map_err(err)?;
    let initial: ParameterStore<f32> = model.init_store(42);
    let mut store = initial.clone();
    let mut opt = AdamW::new(cfg.training.adamw());
    for _ in 0..5 {
        trainer.train_step(&mut store, &mut opt, &batch, cfg.training.lr).map_err(err)?;
    }
    let (mut frozen, mut trainable) = (0, 0);
    for (name, entry) in initial.params() {
        let same = store.value(name).as_ref() == entry.value.as_ref();
        if entry.component == Component::Trunk {
            ensure(!entry.trainable, || format!("trunk parameter {name} is trainable"))?;
            ensure(same, || format!("trunk parameter {name} changed"))?;
            frozen += 1;
        } else {
            ensure(!same, || format!("{} parameter {name} unchanged after 5 steps", entry.component))?;
            trainable += 1;
        }
    }
    within(start.elapsed(), 30)?;
    Ok(format!(
        "{frozen} trunk tensors bit-identical, {trainable} trainable tensors changed ({:.1} s)",
        start.elapsed().as_secs_f64()
    ))
}

fn adapter_count() -> Outcome {
    let (d, r) = (1280usize, 32usize);
    let expected = d * r + r + r * d + d;
    ensure(expected == 83_232, || format!("formula gives {expected}"))?;
    let report = cmd_inventory(&configs().join("paper_scale.toml"), None).map_err(err)?;
    ensure(report.adapter_params_per_block == expected, || {
        format!("inventory reports {} per block", report.adapter_params_per_block)
    })?;
    ensure(report.adapter_blocks == 32, || format!("{} adapter blocks", report.adapter_blocks))?;
    Ok(format!(
        "inventory reports {} per block over {} blocks",
        report.adapter_params_per_block, report.adapter_blocks
    ))
}

fn paper_scale_shapes() -> Outcome {
    let start = Instant::now();
    let full = ModelConfig::paper_scale();
    full.check_input(13, 224, 224).map_err(err)?;
    Model::build(&full).map_err(err)?;
    ensure(level_channels(1280) == [160, 320, 640, 1280], || format!("{:?}", level_channels(1280)))?;

    // The feature shapes do not depend on depth; four blocks keep the
    // weights within the memory of a desk machine.
    let mut cfg = full.clone();
    cfg.backbone.depth = 4;
    let model = Model::build(&cfg).map_err(err)?;
    let store: ParameterStore<f32> = model.init_store(0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(&[1, 13, 224, 224], -1.0, 1.0, &mut rng).mapv(|v| v as f32);
    let x: Array4<f32> = x.into_dimensionality().map_err(err)?;
    let g = Graph::new();
    let ctx = Ctx::inference(&g, &store);
    let out = model.forward(&ctx, x.view()).map_err(err)?;
    let expect_levels = vec![[160, 112, 112], [320, 56, 56], [640, 28, 28], [1280, 14, 14]];
    ensure(out.ap.shapes() == expect_levels, || format!("neck levels {:?}", out.ap.shapes()))?;
    ensure(out.fused.shapes() == expect_levels, || format!("fused levels {:?}", out.fused.shapes()))?;
    ensure(out.logits.shape() == vec![1, 2, 224, 224], || format!("logits {:?}", out.logits.shape()))?;
    Ok(format!(
        "levels {:?}, logits 2x224x224 (forward with 4 of 32 blocks, {:.1} s)",
        expect_levels,
        start.elapsed().as_secs_f64()
    ))
}

fn fusion_clamp() -> Outcome {
    let c = 8;
    let mut reg = Registry::new();
    reg.set_component(Component::Fusion);
    let conv = Conv2d::new(&mut reg, "mask", 2 * c, 1, 1, 1, true);
    let mut store: ParameterStore<f64> = reg.init_store(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    store.set_value(&conv.weight, uniform(&[1, 2 * c, 1, 1], -0.5, 0.5, &mut rng)).map_err(err)?;
    let (mut gates, mut beta_one_worst) = (0usize, 0.0f64);
    for _ in 0..1000 {
        let a = uniform(&[1, c, 4, 4], -3.0, 3.0, &mut rng);
        let b = uniform(&[1, c, 4, 4], -3.0, 3.0, &mut rng);
        let g = Graph::new();
        let ctx = Ctx::inference(&g, &store);
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let lvl = fuse_level(&ctx, &conv, va, vb, 0.8).map_err(err)?;
        for &v in lvl.gate.to_array().iter() {
            ensure(v > 0.8 && v < 1.0, || format!("gate {v} outside (0.8, 1)"))?;
            gates += 1;
        }
        let fused = lvl.fused.to_array();
        for ((f, x), y) in fused.iter().zip(&a).zip(&b) {
            // a convex combination may round one ulp past its endpoints
            let tol = 4.0 * f64::EPSILON * x.abs().max(y.abs());
            ensure(*f >= x.min(*y) - tol && *f <= x.max(*y) + tol, || format!("{f} outside [{x}, {y}]"))?;
        }
        let same = fuse_level(&ctx, &conv, va, vb, 1.0).map_err(err)?.fused.to_array();
        beta_one_worst = beta_one_worst.max((&same - &a).iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    ensure(beta_one_worst <= 1e-6, || format!("beta = 1 differs from transformer features by {beta_one_worst:e}"))?;
    Ok(format!(
        "{gates} gate values in (0.8, 1), fused within input bounds, beta = 1 max diff {beta_one_worst:e}"
    ))
}

/// Worst relative error over the input and every trainable parameter of
/// `f`, probing `sum(w * f(x))` with fixed random weights `w`.
fn module_gradcheck<M>(store: &ParameterStore<f64>, x: &ArrayD<f64>, f: M) -> f64
where
    M: for<'g, 's> Fn(&Ctx<'g, 's, f64>, Var<'g, f64>) -> Var<'g, f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let eval = |s: &ParameterStore<f64>, x: &ArrayD<f64>, probe: &ArrayD<f64>| {
        let g = Graph::new();
        let ctx = Ctx::new(&g, s, Mode::Train);
        (&f(&ctx, g.constant(x.clone())).to_array() * probe).sum()
    };
    let shape = {
        let g = Graph::new();
        let ctx = Ctx::new(&g, store, Mode::Train);
        f(&ctx, g.constant(x.clone())).shape()
    };
    let probe = uniform(&shape, -1.0, 1.0, &mut rng);

    let g = Graph::new();
    let ctx = Ctx::new(&g, store, Mode::Train);
    let xv = g.variable(x.clone());
    let loss = f(&ctx, xv).mul(g.constant(probe.clone())).sum_all();
    let grads = g.backward(loss);

    let numeric_x = central_difference(|xi| eval(store, xi, &probe), x, 1e-6);
    let mut worst = relative_error(&grads.get_or_zeros(xv), &numeric_x);
    for (name, leaf) in ctx.leaves() {
        if !store.get(&name).is_some_and(|e| e.trainable) {
            continue;
        }
        let value = store.value(&name).as_ref().clone();
        let numeric = central_difference(
            |p| {
                let mut s = store.clone();
                s.set_value(&name, p.clone()).expect("same shape");
                eval(&s, x, &probe)
            },
            &value,
            1e-6,
        );
        worst = worst.max(relative_error(&grads.get_or_zeros(leaf), &numeric));
    }
    worst
}

/// Replaces every trainable value with random numbers so no weight sits at
/// its (possibly degenerate) initial value.
fn randomize(store: &mut ParameterStore<f64>, rng: &mut ChaCha8Rng) {
    for name in store.trainable_names() {
        let shape = store.value(&name).shape().to_vec();
        store.set_value(&name, uniform(&shape, -0.8, 0.8, rng)).unwrap();
    }
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut reg = Registry::new();
    reg.set_component(Component::Adapter);
    let adapter = AdapterWeights::new(&mut reg, "adapter", 8, 4);
    reg.set_component(Component::Cnn);
    let down = ResidualBlock::new(&mut reg, "down", 4, 8, 2, true);
    let same = ResidualBlock::new(&mut reg, "same", 8, 8, 1, true);
    let cam = Cam::new(&mut reg, "cam", 8, 2, 3);
    reg.set_component(Component::Fusion);
    let mask = Conv2d::new(&mut reg, "mask", 8, 1, 1, 1, true);
    let mut store: ParameterStore<f64> = reg.init_store(6);
    randomize(&mut store, &mut rng);

    let mut errors = Vec::new();
    let tokens = uniform(&[2, 3, 8], -1.0, 1.0, &mut rng);
    errors.push(("adapter", module_gradcheck(&store, &tokens, |ctx, x| x.add(adapter.forward(ctx, x).unwrap()))));
    let img4 = uniform(&[2, 4, 6, 6], -1.0, 1.0, &mut rng);
    errors.push(("residual (projection)", module_gradcheck(&store, &img4, |ctx, x| down.forward(ctx, x).unwrap())));
    let img8 = uniform(&[2, 8, 4, 4], -1.0, 1.0, &mut rng);
    errors.push(("residual (identity)", module_gradcheck(&store, &img8, |ctx, x| same.forward(ctx, x).unwrap())));
    let img8b = uniform(&[2, 8, 5, 5], -1.0, 1.0, &mut rng);
    errors.push(("cam", module_gradcheck(&store, &img8b, |ctx, x| cam.forward(ctx, x))));
    let pair = uniform(&[2, 8, 3, 3], -1.0, 1.0, &mut rng);
    errors.push((
        "fuse_level",
        module_gradcheck(&store, &pair, |ctx, x| {
            fuse_level(ctx, &mask, x.narrow(1, 0, 4), x.narrow(1, 4, 4), 0.8).unwrap().fused
        }),
    ));
    for (name, e) in &errors {
        ensure(*e < 1e-4, || format!("{name}: relative error {e:e}"))?;
    }
    within(start.elapsed(), 120)?;
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(format!(
        "adapter, residual blocks, CAM, fuse_level: worst relative error {worst:.1e} ({:.1} s)",
        start.elapsed().as_secs_f64()
    ))
}

/// IoU and Dice per class from pixel sets; `None` when a class appears in
/// neither mask.
fn oracle(pred: &Array2<i64>, gt: &Array2<i64>, k: usize) -> Vec<Option<(f64, f64)>> {
    (0..k as i64)
        .map(|c| {
            let set = |m: &Array2<i64>| -> HashSet<(usize, usize)> {
                m.indexed_iter()
                    .filter(|((i, j), v)| **v == c && gt[[*i, *j]] != IGNORE_LABEL)
                    .map(|(ix, _)| ix)
                    .collect()
            };
            let (p, g) = (set(pred), set(gt));
            let inter = p.intersection(&g).count();
            let union = p.union(&g).count();
            (union > 0).then(|| (inter as f64 / union as f64, 2.0 * inter as f64 / (p.len() + g.len()) as f64))
        })
        .collect()
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ignored = 0;
    for n in 0..100 {
        let k = 2 + n % 2;
        let gt = Array2::from_shape_fn((16, 16), |_| {
            if rng.random_bool(0.1) {
                IGNORE_LABEL
            } else {
                rng.random_range(0..k as i64)
            }
        });
        let pred = Array2::from_shape_fn((16, 16), |_| rng.random_range(0..k as i64));
        ignored += gt.iter().filter(|v| **v == IGNORE_LABEL).count();
        let mut acc = ConfusionAccumulator::with_ignore(k, IGNORE_LABEL);
        acc.update(pred.view(), gt.view()).map_err(err)?;
        let report = acc.compute().map_err(err)?;
        let truth = oracle(&pred, &gt, k);
        let mut ious = Vec::new();
        let mut dices = Vec::new();
        for c in 0..k {
            match (truth[c], report.iou_per_class[c], report.dice_per_class[c]) {
                (None, None, None) => {}
                (Some((iou, dice)), Some(ri), Some(rd)) => {
                    ensure(iou == ri && dice == rd, || format!("pair {n} class {c}: ({ri}, {rd}) vs ({iou}, {dice})"))?;
                    let identity = 2.0 * ri / (1.0 + ri);
                    ensure((identity - rd).abs() <= 1e-12, || format!("pair {n} class {c}: Dice {rd} vs {identity}"))?;
                    ious.push(iou);
                    dices.push(dice);
                }
                other => return Err(format!("pair {n} class {c}: defined-ness differs {other:?}")),
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        ensure(report.miou == mean(&ious) && report.mdice == mean(&dices), || {
            format!("pair {n}: mIoU {} vs {}", report.miou, mean(&ious))
        })?;
        let counted = gt.iter().filter(|v| **v != IGNORE_LABEL).count() as u64;
        ensure(report.pixels == counted, || format!("pair {n}: {} pixels vs {counted}", report.pixels))?;
    }
    Ok(format!("100 mask pairs exact, {ignored} ignore pixels excluded"))
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let mut cfg = toy_config()?;
    cfg.training.monitor = Monitor::TrainMiou;
    cfg.training.stop_at = Some(0.95);
    cfg.training.max_epochs = 200;
    cfg.training.early_stop_patience = 200;
    let spec = cfg.dataset.synthetic.scene_spec(&cfg.channels);
    let train = generate_dataset(&spec, 16, "fit").map_err(err)?;
    let out = fit(&cfg, &train, &[], &[], None, None).map_err(err)?;
    let best = out
        .outcome
        .history
        .iter()
        .filter_map(|r| r.train_eval_miou)
        .fold(f64::NEG_INFINITY, f64::max);
    let epochs = out.outcome.history.len();
    ensure(best >= 0.95, || format!("train mIoU peaked at {best:.4} after {epochs} epochs"))?;
    within(start.elapsed(), 600)?;
    Ok(format!(
        "train mIoU {best:.4} after {epochs} epochs on 16 samples ({:.0} s)",
        start.elapsed().as_secs_f64()
    ))
}

fn fusion_necessity() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(err)?;
    let dir = cmd_beta_sweep(&configs().join("cnn_only_signal.toml"), &[0.5, 0.99], &settings(tmp.path())).map_err(err)?;
    let (h, rows) = read_csv(&dir.join("beta_sweep.csv"))?;
    ensure(rows.len() == 2, || format!("{} rows", rows.len()))?;
    let at = |beta: f64| -> Result<f64, String> {
        for r in &rows {
            if (number(&h, r, "beta")? - beta).abs() < 1e-12 {
                return number(&h, r, "val_miou");
            }
        }
        Err(format!("no row for beta {beta}"))
    };
    let (half, high) = (at(0.5)?, at(0.99)?);
    ensure(half - high >= 0.05, || format!("val mIoU {high:.4} at 0.99 vs {half:.4} at 0.5"))?;
    Ok(format!(
        "val mIoU {high:.4} at beta 0.99 vs {half:.4} at beta 0.5, margin {:.4} ({:.0} s)",
        half - high,
        start.elapsed().as_secs_f64()
    ))
}

fn kfold_contract() -> Outcome {
    let mut cfg = toy_config()?;
    cfg.dataset.synthetic.size = 16;
    let spec = cfg.dataset.synthetic.scene_spec(&cfg.channels);
    let ids: Vec<String> = generate_dataset(&spec, 298, "syn").map_err(err)?.into_iter().map(|s| s.id).collect();
    let ratios = SplitRatios {
        train: 0.70,
        val: 0.10,
        test: 0.20,
    };
    let folds = kfold_split(&ids, 4, ratios, 42).map_err(err)?;
    ensure(folds == kfold_split(&ids, 4, ratios, 42).map_err(err)?, || "not deterministic under seed 42".into())?;
    ensure(folds.len() == 4, || format!("{} folds", folds.len()))?;
    let (t_train, t_val, t_test) = (298.0 * 0.7, 298.0 * 0.1, 298.0 * 0.2);
    let mut seen_test = HashSet::new();
    for (i, f) in folds.iter().enumerate() {
        for (name, len, target) in [("train", f.train.len(), t_train), ("val", f.val.len(), t_val), ("test", f.test.len(), t_test)] {
            ensure((len as f64 - target).abs() <= 1.0, || format!("fold {i} {name} has {len}, target {target}"))?;
        }
        let all: HashSet<&String> = f.train.iter().chain(&f.val).chain(&f.test).collect();
        ensure(all.len() == 298, || format!("fold {i} covers {} ids", all.len()))?;
        for id in &f.test {
            ensure(seen_test.insert(id.clone()), || format!("{id} is in two test sets"))?;
        }
    }
    let (a, b, c) = split_sizes(298, ratios);
    Ok(format!("4 disjoint test sets, sizes {a}/{b}/{c} per fold, deterministic"))
}

fn ablation_harness() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut cfg = toy_config()?;
    cfg.dataset.synthetic.count = 12;
    cfg.training.max_epochs = 1;
    cfg.training.batch_size = 4;
    cfg.output.plots = false;
    let path = write_config(tmp.path(), &cfg)?;
    let dir = cmd_ablate(&path, AblationTable::Modules, &settings(tmp.path())).map_err(err)?;
    let (h, rows) = read_csv(&dir.join("ablation_modules.csv"))?;
    ensure(rows.len() == AblationRow::ALL.len(), || format!("{} rows", rows.len()))?;
    for (row, expected) in rows.iter().zip(AblationRow::ALL) {
        ensure(column(&h, row, "row")? == expected.name(), || format!("row {:?}", row))?;
        let f = expected.flags();
        for (key, flag) in [("adapters", f.adapters), ("residual", f.residual), ("cam", f.cam), ("m2faf", f.m2faf), ("cnn", f.cnn)] {
            ensure(column(&h, row, key)? == flag.to_string(), || format!("{}: {key} column", expected.name()))?;
        }
        ensure(column(&h, row, "seed")? == "42" && column(&h, row, "max_epochs")? == "1", || {
            format!("{}: seed/budget differ", expected.name())
        })?;
        ensure(number(&h, row, "test_miou")?.is_finite(), || format!("{}: no test mIoU", expected.name()))?;
    }
    Ok(format!(
        "{} rows with identical seed and budget ({:.0} s)",
        rows.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut cfg = toy_config()?;
    cfg.training.max_epochs = 1;
    let path = write_config(tmp.path(), &cfg)?;
    let opts = TrainOptions {
        seed: Some(42),
        resume: None,
    };
    let mut losses = Vec::new();
    for _ in 0..2 {
        let dir = cmd_train(&path, &opts, &settings(tmp.path())).map_err(err)?;
        let (h, rows) = read_csv(&dir.join("metrics.csv"))?;
        losses.push(number(&h, rows.first().ok_or("empty metrics.csv")?, "train_loss")?);
    }
    ensure(losses[0] == losses[1], || format!("epoch-1 losses {} vs {}", losses[0], losses[1]))?;
    Ok(format!("epoch-1 loss {} in both runs (bit-identical)", losses[0]))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("zero-init identity", zero_init_identity),
        ("freeze contract", freeze_contract),
        ("adapter parameter count", adapter_count),
        ("paper-scale shapes", paper_scale_shapes),
        ("fusion clamp and endpoints", fusion_clamp),
        ("gradient checks", gradient_checks),
        ("metric oracle", metric_oracle),
        ("overfit sanity", overfit),
        ("fusion necessity", fusion_necessity),
        ("k-fold contract", kfold_contract),
        ("ablation harness", ablation_harness),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(msg) => println!("PASS {n:>2} {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

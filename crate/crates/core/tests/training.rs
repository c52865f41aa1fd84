use std::collections::BTreeMap;

use floodfuse_core::data::{generate_dataset, SyntheticSceneSpec, TileSample};
use floodfuse_core::model::{stack_batch, Model, ModelConfig};
use floodfuse_core::params::{Component, ParameterStore};
use floodfuse_core::train::{evaluate, AdamW, EpochRecord, Monitor, TrainConfig, TrainState, Trainer};
use floodfuse_core::Error;
use ndarray::{ArrayD, Axis};

fn scenes(n: usize, seed: u64) -> Vec<TileSample> {
    let cfg = ModelConfig::toy();
    let spec = SyntheticSceneSpec {
        height: 64,
        width: 64,
        channels: cfg.channels.total_channels,
        seed,
        blob_count: (1, 3),
        noise: 0.1,
        signal_channels: (0..cfg.channels.total_channels).collect(),
        strength: 1.5,
    };
    generate_dataset(&spec, n, "t").unwrap()
}

fn short(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        batch_size: 4,
        max_epochs: epochs,
        early_stop_patience: epochs,
        ..TrainConfig::default()
    }
}

#[test]
fn eval_forward_is_per_image() {
    let model = Model::build(&ModelConfig::toy()).unwrap();
    let store: ParameterStore<f32> = model.init_store(1);
    let data = scenes(3, 2);
    let images: Vec<_> = data.iter().map(|s| &s.image).collect();
    let batched = model.predict(&store, stack_batch(&images).view()).unwrap();
    for (i, img) in images.iter().enumerate() {
        let single = model.predict(&store, stack_batch(&[img]).view()).unwrap();
        let diff = (&batched.index_axis(Axis(0), i) - &single.index_axis(Axis(0), 0))
            .iter()
            .fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(diff < 1e-5, "image {i}: {diff}");
    }
}

#[test]
fn best_weights_score_the_best_epoch() {
    let model = Model::build(&ModelConfig::toy()).unwrap();
    let (train, val) = (scenes(8, 3), scenes(4, 4));
    let cfg = short(4);
    let trainer = Trainer::new(&model, cfg.clone()).unwrap();
    let out = trainer
        .run(TrainState::new(model.init_store::<f32>(42), &cfg), &train, &val, |_| Ok(()))
        .unwrap();
    let best = out.history[out.best_epoch - 1].val_miou.unwrap();
    assert!(out.history.iter().all(|r| r.val_miou.unwrap() <= best));
    let rescored = evaluate(&model, &out.best, &val, cfg.batch_size).unwrap().report.miou;
    assert_eq!(rescored, best);
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let model = Model::build(&ModelConfig::toy()).unwrap();
    let train = scenes(8, 5);
    let cfg = TrainConfig {
        monitor: Monitor::TrainMiou,
        ..short(3)
    };
    let trainer = Trainer::new(&model, cfg.clone()).unwrap();
    let init: ParameterStore<f32> = model.init_store(9);
    let straight = trainer.run(TrainState::new(init.clone(), &cfg), &train, &[], |_| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let interrupted = trainer.run(TrainState::new(init, &cfg), &train, &[], |st| {
        st.save(dir.path(), &serde_json::Value::Null)?;
        if st.epochs_done == 1 {
            return Err(Error::Data("interrupted".into()));
        }
        Ok(())
    });
    assert!(interrupted.is_err());
    let state = TrainState::<f32>::load(dir.path()).unwrap();
    assert_eq!(state.epochs_done, 1);
    let resumed = trainer.run(state, &train, &[], |_| Ok(())).unwrap();

    assert!(resumed.last.changed_params(&straight.last).is_empty());
    let losses = |h: &[EpochRecord]| h.iter().map(|r| r.train_loss).collect::<Vec<_>>();
    assert_eq!(losses(&resumed.history), losses(&straight.history));
}

#[test]
fn optimizer_refuses_frozen_and_unknown_names() {
    let model = Model::build(&ModelConfig::toy()).unwrap();
    let mut store: ParameterStore<f32> = model.init_store(0);
    let mut opt = AdamW::new(TrainConfig::default().adamw());
    let frozen = store
        .params()
        .find(|(_, e)| e.component == Component::Trunk)
        .map(|(n, _)| n.clone())
        .unwrap();
    let shape = store.value(&frozen).raw_dim();
    let grads = BTreeMap::from([(frozen.clone(), ArrayD::<f32>::ones(shape))]);
    let before = store.value(&frozen).clone();
    assert!(opt.step(&mut store, &grads, 1e-3).is_err());
    assert_eq!(store.value(&frozen), &before);

    let unknown = BTreeMap::from([("nope".to_string(), ArrayD::<f32>::ones(ndarray::IxDyn(&[1])))]);
    assert!(opt.step(&mut store, &unknown, 1e-3).is_err());
}

#[test]
fn trainable_count_excludes_trunk() {
    let model = Model::build(&ModelConfig::toy()).unwrap();
    let inv = model.inventory();
    let store: ParameterStore<f32> = model.init_store(0);
    assert_eq!(store.num_elements(true), inv.trainable);
    assert_eq!(inv.total - inv.trainable, inv.count(Component::Trunk));
}

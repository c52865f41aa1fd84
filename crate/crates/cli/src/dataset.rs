//! Materializes the `[dataset]` section into tiles and named splits.

use std::collections::BTreeMap;

use floodfuse_core::data::{
    generate_dataset, kfold_split, DatasetLayout, DatasetManifest, TileSample, TEST_SPLIT, TRAIN_SPLIT, VAL_SPLIT,
};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, Result};

/// All tiles in memory plus split membership by index.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub samples: Vec<TileSample>,
    pub splits: BTreeMap<String, Vec<usize>>,
}

impl LoadedData {
    pub fn split(&self, name: &str) -> Vec<TileSample> {
        self.splits
            .get(name)
            .map(|idx| idx.iter().map(|&i| self.samples[i].clone()).collect())
            .unwrap_or_default()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn by_ids(&self, ids: &[String]) -> Vec<TileSample> {
        let pos: BTreeMap<&str, usize> = self.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
        ids.iter().filter_map(|id| pos.get(id.as_str())).map(|&i| self.samples[i].clone()).collect()
    }
}

fn assign_default_splits(cfg: &ExperimentConfig, ids: &[String]) -> Result<BTreeMap<String, Vec<String>>> {
    let fold = kfold_split(ids, 1, cfg.dataset.ratios, cfg.dataset.split_seed)?.remove(0);
    Ok(BTreeMap::from([
        (TRAIN_SPLIT.to_string(), fold.train),
        (VAL_SPLIT.to_string(), fold.val),
        (TEST_SPLIT.to_string(), fold.test),
    ]))
}

fn index_splits(samples: &[TileSample], named: BTreeMap<String, Vec<String>>) -> BTreeMap<String, Vec<usize>> {
    let pos: BTreeMap<&str, usize> = samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    named
        .into_iter()
        .map(|(k, ids)| (k, ids.iter().filter_map(|id| pos.get(id.as_str()).copied()).collect()))
        .collect()
}

pub fn load(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let ds = &cfg.dataset;
    cfg.validate_dataset(ds.path.as_deref().unwrap_or(std::path::Path::new("[dataset]")))?;
    let (samples, named) = match ds.source {
        DataSource::Synthetic => {
            let spec = ds.synthetic.scene_spec(&cfg.channels);
            let samples = generate_dataset(&spec, ds.synthetic.count, "syn")?;
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            let named = assign_default_splits(cfg, &ids)?;
            (samples, named)
        }
        source => {
            let path = ds.path.clone().ok_or_else(|| CliError::Usage("dataset.path missing".into()))?;
            let c = cfg.channels.total_channels;
            let mut manifest = match source {
                DataSource::Manifest => DatasetManifest::load(&path)?,
                DataSource::Native => DatasetManifest::scan(&path, DatasetLayout::Native, c)?,
                DataSource::Sen1floods11 => DatasetManifest::scan(&path, DatasetLayout::Sen1floods11, c)?,
                DataSource::Floodplanet => DatasetManifest::scan(&path, DatasetLayout::Floodplanet, c)?,
                DataSource::Synthetic => unreachable!(),
            };
            if let Some(t) = ds.target_size {
                manifest.target_size = Some(t);
            }
            if !manifest.splits.contains_key(TRAIN_SPLIT) {
                let extra = assign_default_splits(cfg, &manifest.ids())?;
                manifest.splits.extend(extra);
            }
            if ds.normalize {
                manifest.fit_stats(TRAIN_SPLIT)?;
            } else {
                manifest.stats = None;
            }
            let samples = manifest
                .ids()
                .iter()
                .map(|id| manifest.load_tile(id))
                .collect::<floodfuse_core::Result<Vec<_>>>()?;
            (samples, manifest.splits.clone())
        }
    };
    if let Some(s) = samples.first() {
        let (h, w) = s.size();
        cfg.model()
            .check_input(s.channels(), h, w)
            .map_err(|e| CliError::Usage(format!("dataset tiles do not fit the model: {e}")))?;
    }
    let splits = index_splits(&samples, named);
    Ok(LoadedData { samples, splits })
}

//! Experiment configuration file (TOML).
//!
//! Sections: `[dataset]` (with optional `[dataset.synthetic]`),
//! `[channels]`, `[backbone]`, `[neck]`, `[cnn]`, `[fusion]`, `[decoder]`,
//! `[ablation]`, `[training]`, `[tuner]` and `[output]`. Only `[dataset]`
//! and `[backbone]` are required; unknown keys anywhere are errors.

use std::fs;
use std::path::{Path, PathBuf};

use floodfuse_core::channel_router::ChannelSplitConfig;
use floodfuse_core::cnn::CnnConfig;
use floodfuse_core::data::{SignalChannels, SplitRatios, SyntheticSceneSpec};
use floodfuse_core::decoder::DecoderConfig;
use floodfuse_core::fusion::FusionConfig;
use floodfuse_core::model::{AblationFlags, ModelConfig};
use floodfuse_core::neck::NeckConfig;
use floodfuse_core::train::{TrainConfig, TunerConfig};
use floodfuse_core::vit::BackboneConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    /// A saved dataset manifest (JSON) at `path`.
    Manifest,
    Native,
    Sen1floods11,
    Floodplanet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDataConfig {
    pub count: usize,
    /// Square tile side.
    pub size: usize,
    pub seed: u64,
    pub blob_count: [usize; 2],
    pub noise: f64,
    pub signal: SignalChannels,
    pub strength: f64,
}

impl Default for SyntheticDataConfig {
    fn default() -> Self {
        Self {
            count: 32,
            size: 64,
            seed: 7,
            blob_count: [1, 4],
            noise: 0.1,
            signal: SignalChannels::Both,
            strength: 1.5,
        }
    }
}

impl SyntheticDataConfig {
    pub fn scene_spec(&self, channels: &ChannelSplitConfig) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            height: self.size,
            width: self.size,
            channels: channels.total_channels,
            seed: self.seed,
            blob_count: (self.blob_count[0], self.blob_count[1]),
            noise: self.noise,
            signal_channels: self.signal.resolve(channels),
            strength: self.strength,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Dataset root, or the manifest file for `source = "manifest"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Resize file-based tiles to `[H, W]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_size: Option<[usize; 2]>,
    /// Per-channel standardization with statistics of the training split.
    #[serde(default = "yes")]
    pub normalize: bool,
    /// Used when the source has no predefined splits, and by k-fold runs.
    #[serde(default)]
    pub ratios: SplitRatios,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub synthetic: SyntheticDataConfig,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output root; falls back to `$FLOODFUSE_OUTPUT`, then `runs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_name")]
    pub name: String,
    /// Write SVG plots next to the CSV files.
    #[serde(default = "yes")]
    pub plots: bool,
    /// Save a checkpoint after every epoch (needed for `--resume`).
    #[serde(default = "yes")]
    pub checkpoint_every_epoch: bool,
}

fn default_name() -> String {
    "run".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            name: default_name(),
            plots: true,
            checkpoint_every_epoch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub channels: ChannelSplitConfig,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub neck: NeckConfig,
    #[serde(default)]
    pub cnn: CnnConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub tuner: TunerConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses and validates everything except the dataset location (see
    /// [`validate_dataset`](Self::validate_dataset)). Relative dataset paths
    /// are resolved against the directory of the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(path, format!("cannot read config: {e}")))?;
        let mut cfg = Self::parse(&text, path)?;
        if let Some(p) = &cfg.dataset.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.dataset.path = Some(base.join(p));
            }
        }
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::config(origin, e.to_string()))
    }

    pub fn validate(&self, origin: &Path) -> Result<()> {
        let wrap = |e: floodfuse_core::Error| CliError::config(origin, e.to_string());
        self.model().validate().map_err(wrap)?;
        self.training.validate().map_err(wrap)?;
        self.tuner.validate().map_err(wrap)?;
        let r = self.dataset.ratios;
        if (r.train + r.val + r.test - 1.0).abs() > 1e-9 || r.train <= 0.0 || r.val < 0.0 || r.test < 0.0 {
            return Err(CliError::config(origin, "dataset.ratios must be non-negative and sum to 1"));
        }
        Ok(())
    }

    /// Checks that the dataset can be produced: synthetic parameters fit the
    /// model, or the dataset path exists.
    pub fn validate_dataset(&self, origin: &Path) -> Result<()> {
        let wrap = |e: floodfuse_core::Error| CliError::config(origin, e.to_string());
        match self.dataset.source {
            DataSource::Synthetic => {
                let s = &self.dataset.synthetic;
                if s.count < 2 {
                    return Err(CliError::config(origin, "dataset.synthetic.count must be >= 2"));
                }
                s.scene_spec(&self.channels).validate().map_err(wrap)?;
                let (c, h, w) = (self.channels.total_channels, s.size, s.size);
                self.model().check_input(c, h, w).map_err(wrap)?;
            }
            _ => {
                let p = self
                    .dataset
                    .path
                    .as_ref()
                    .ok_or_else(|| CliError::config(origin, "dataset.path is required for file datasets"))?;
                if !p.exists() {
                    return Err(CliError::config(origin, format!("dataset path {} does not exist", p.display())));
                }
                if let Some([h, w]) = self.dataset.target_size {
                    self.model()
                        .check_input(self.channels.total_channels, h, w)
                        .map_err(wrap)?;
                }
            }
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels.clone(),
            backbone: self.backbone.clone(),
            neck: self.neck.clone(),
            cnn: self.cnn.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
            ablation: self.ablation,
        }
    }

    pub fn set_model(&mut self, m: &ModelConfig) {
        self.channels = m.channels.clone();
        self.backbone = m.backbone.clone();
        self.neck = m.neck.clone();
        self.cnn = m.cnn.clone();
        self.fusion = m.fusion.clone();
        self.decoder = m.decoder.clone();
        self.ablation = m.ablation;
    }

    /// The resolved configuration as written to run directories.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of [`snapshot`](Self::snapshot), hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.snapshot().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn output_root(&self, env_default: Option<&Path>) -> PathBuf {
        self.output
            .dir
            .clone()
            .or_else(|| env_default.map(Path::to_path_buf))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
source = "synthetic"

[backbone]
embed_dim = 64
depth = 8
num_heads = 4
patch_size = 16

[cnn]
widths = [16, 32, 64, 128]

[decoder]
channels = 64
ppm_scales = [1, 2, 4]
"#;

    #[test]
    fn minimal_config_resolves_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new("mem")).unwrap();
        cfg.validate(Path::new("mem")).unwrap();
        cfg.validate_dataset(Path::new("mem")).unwrap();
        assert_eq!(cfg.training.batch_size, 8);
        assert_eq!(cfg.training.seed, 42);
        assert_eq!(cfg.fusion.beta, 0.8);
        assert_eq!(cfg.channels.transformer_indices, vec![1, 2, 3, 7, 11, 12]);
    }

    #[test]
    fn snapshot_round_trips_byte_for_byte() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new("mem")).unwrap();
        let snap = cfg.snapshot();
        let back = ExperimentConfig::parse(&snap, Path::new("snap")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.snapshot(), snap);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typo = MINIMAL.replace("[decoder]", "[decoder]\nchanels = 3");
        assert!(ExperimentConfig::parse(&typo, Path::new("mem")).is_err());
        let typo = format!("{MINIMAL}\n[training]\nlearning_rate = 0.1\n");
        let e = ExperimentConfig::parse(&typo, Path::new("mem")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn missing_dataset_path_names_the_path() {
        let text = MINIMAL.replace(
            "source = \"synthetic\"",
            "source = \"sen1floods11\"\npath = \"/nonexistent/floods\"",
        );
        let cfg = ExperimentConfig::parse(&text, Path::new("mem")).unwrap();
        cfg.validate(Path::new("mem")).unwrap();
        let e = cfg.validate_dataset(Path::new("mem")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("/nonexistent/floods"));
    }
}

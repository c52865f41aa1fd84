//! Dataset manifests: sample lists, named splits and normalization stats.
//!
//! Supported directory layouts:
//!
//! * `native`: `<root>/<id>.json` tile sidecars (see the raster module);
//!   an optional `<root>/splits.json` maps split names to id lists.
//! * `sen1floods11`: `<root>/S2Hand/<id>_S2Hand.tif` images and
//!   `<root>/LabelHand/<id>_LabelHand.tif` labels; split files
//!   `flood_{train,valid,test,bolivia}_data.csv` are read from
//!   `<root>/splits/flood_handlabeled/` or `<root>/splits/` when present.
//! * `floodplanet`: `<root>/images/<name>.tif` and `<root>/labels/<name>.tif`
//!   with matching names; no predefined splits (use k-fold).
//!
//! Label rasters: negative values and 255 become the ignore label.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use super::raster::{read_geotiff, read_native_tile, resize_bilinear, resize_nearest};
use super::TileSample;
use crate::error::{Error, Result};
use crate::metrics::IGNORE_LABEL;

pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";
pub const TEST_SPLIT: &str = "test";
/// Held-out region of Sen1Floods11.
pub const BOLIVIA_SPLIT: &str = "bolivia";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileFormat {
    /// Native sidecar tile; `image` and `mask` both name the sidecar.
    Native,
    Geotiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetLayout {
    Native,
    Sen1floods11,
    Floodplanet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub format: TileFormat,
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Base for relative sample paths; relative roots are resolved against
    /// the manifest file's directory.
    pub root: PathBuf,
    pub channel_count: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_size: Option<[usize; 2]>,
    pub samples: Vec<SampleEntry>,
    #[serde(default)]
    pub splits: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<NormStats>,
    /// Rule used to derive ignore pixels.
    #[serde(default = "default_masking")]
    pub masking: String,
}

fn default_classes() -> usize {
    2
}

fn default_masking() -> String {
    "label < 0 or label == 255 -> ignore (-1)".into()
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, channel_count: usize, samples: Vec<SampleEntry>) -> Self {
        Self {
            root: root.into(),
            channel_count,
            num_classes: 2,
            target_size: None,
            samples,
            splits: BTreeMap::new(),
            stats: None,
            masking: default_masking(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        if m.root.is_relative() {
            m.root = path.parent().unwrap_or(Path::new(".")).join(&m.root);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn entry(&self, id: &str) -> Result<&SampleEntry> {
        self.samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Data(format!("unknown sample id {id}")))
    }

    pub fn split_ids(&self, name: &str) -> Result<&[String]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Data(format!("manifest has no split named {name}")))
    }

    /// Checks id uniqueness, file existence, that split ids are known and
    /// that train/val/test are disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {}", s.id)));
            }
            for p in [&s.image, &s.mask] {
                let full = self.root.join(p);
                if !full.exists() {
                    return Err(Error::io(&full, std::io::Error::from(std::io::ErrorKind::NotFound)));
                }
            }
        }
        for (name, ids) in &self.splits {
            if let Some(id) = ids.iter().find(|id| !seen.contains(id.as_str())) {
                return Err(Error::Data(format!("split {name} references unknown id {id}")));
            }
        }
        let core: Vec<_> = [TRAIN_SPLIT, VAL_SPLIT, TEST_SPLIT]
            .iter()
            .filter_map(|n| self.splits.get(*n).map(|ids| (*n, ids)))
            .collect();
        for (i, (a, ia)) in core.iter().enumerate() {
            let set: BTreeSet<_> = ia.iter().collect();
            for (b, ib) in &core[i + 1..] {
                if let Some(id) = ib.iter().find(|id| set.contains(id)) {
                    return Err(Error::Data(format!("id {id} is in both {a} and {b}")));
                }
            }
        }
        if let Some(stats) = &self.stats {
            if stats.mean.len() != self.channel_count || stats.std.len() != self.channel_count {
                return Err(Error::Data("normalization stats do not match the channel count".into()));
            }
        }
        Ok(())
    }

    /// Reads and resizes one tile without normalization.
    pub fn load_raw(&self, id: &str) -> Result<TileSample> {
        let e = self.entry(id)?;
        let (image, mask) = match e.format {
            TileFormat::Native => read_native_tile(&self.root.join(&e.image))?,
            TileFormat::Geotiff => {
                let image = read_geotiff(&self.root.join(&e.image))?;
                let labels = read_geotiff(&self.root.join(&e.mask))?;
                let mask = labels.index_axis(Axis(0), 0).mapv(|v| {
                    let v = v.round() as i64;
                    if v < 0 || v == 255 {
                        IGNORE_LABEL
                    } else {
                        v
                    }
                });
                (image, mask)
            }
        };
        if image.dim().0 != self.channel_count {
            return Err(Error::Data(format!(
                "{id}: {} bands, manifest expects {}",
                image.dim().0,
                self.channel_count
            )));
        }
        let (image, mask) = match self.target_size {
            Some([h, w]) => (resize_bilinear(&image, (h, w)), resize_nearest(&mask, (h, w))),
            None => (image, mask),
        };
        TileSample::new(id, image.mapv(|v| if v.is_finite() { v } else { 0.0 }), mask, self.num_classes)
    }

    /// Reads, resizes and normalizes one tile.
    pub fn load_tile(&self, id: &str) -> Result<TileSample> {
        let mut t = self.load_raw(id)?;
        if let Some(stats) = &self.stats {
            for (c, mut band) in t.image.axis_iter_mut(Axis(0)).enumerate() {
                let (m, s) = (stats.mean[c] as f32, stats.std[c].max(1e-6) as f32);
                band.mapv_inplace(|v| (v - m) / s);
            }
        }
        Ok(t)
    }

    pub fn load_split(&self, name: &str) -> Result<Vec<TileSample>> {
        self.split_ids(name)?.iter().map(|id| self.load_tile(id)).collect()
    }

    /// Fits per-channel stats on the named split (population std).
    pub fn fit_stats(&mut self, split: &str) -> Result<&NormStats> {
        let ids = self.split_ids(split)?.to_vec();
        if ids.is_empty() {
            return Err(Error::Data(format!("split {split} is empty")));
        }
        let c = self.channel_count;
        let (mut sum, mut sq, mut n) = (vec![0f64; c], vec![0f64; c], 0usize);
        for id in &ids {
            let t = self.load_raw(id)?;
            for (k, band) in t.image.axis_iter(Axis(0)).enumerate() {
                for &v in band {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
            }
            n += t.image.dim().1 * t.image.dim().2;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt())
            .collect();
        self.stats = Some(NormStats { mean, std });
        Ok(self.stats.as_ref().unwrap())
    }

    /// Builds a manifest by scanning a directory in one of the supported layouts.
    pub fn scan(root: &Path, layout: DatasetLayout, channel_count: usize) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::io(root, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        match layout {
            DatasetLayout::Native => scan_native(root, channel_count),
            DatasetLayout::Sen1floods11 => scan_sen1floods11(root, channel_count),
            DatasetLayout::Floodplanet => scan_floodplanet(root, channel_count),
        }
    }
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn scan_native(root: &Path, channel_count: usize) -> Result<DatasetManifest> {
    let mut samples = Vec::new();
    for p in list_dir(root)? {
        let name = file_name(&p);
        if p.extension().is_some_and(|e| e == "json") && name != "splits.json" && name != "manifest.json" {
            let id = name.trim_end_matches(".json").to_string();
            samples.push(SampleEntry {
                id,
                image: PathBuf::from(&name),
                mask: PathBuf::from(&name),
                format: TileFormat::Native,
            });
        }
    }
    let mut m = DatasetManifest::new(root, channel_count, samples);
    let splits = root.join("splits.json");
    if splits.exists() {
        let bytes = fs::read(&splits).map_err(|e| Error::io(&splits, e))?;
        m.splits = serde_json::from_slice(&bytes).map_err(|e| Error::format(&splits, e.to_string()))?;
    }
    Ok(m)
}

fn scan_sen1floods11(root: &Path, channel_count: usize) -> Result<DatasetManifest> {
    let mut samples = Vec::new();
    for p in list_dir(&root.join("S2Hand"))? {
        let name = file_name(&p);
        if let Some(id) = name.strip_suffix("_S2Hand.tif") {
            let label = PathBuf::from("LabelHand").join(format!("{id}_LabelHand.tif"));
            samples.push(SampleEntry {
                id: id.to_string(),
                image: PathBuf::from("S2Hand").join(&name),
                mask: label,
                format: TileFormat::Geotiff,
            });
        }
    }
    let mut m = DatasetManifest::new(root, channel_count, samples);
    let dirs = [root.join("splits").join("flood_handlabeled"), root.join("splits")];
    let files = [
        (TRAIN_SPLIT, "flood_train_data.csv"),
        (VAL_SPLIT, "flood_valid_data.csv"),
        (TEST_SPLIT, "flood_test_data.csv"),
        (BOLIVIA_SPLIT, "flood_bolivia_data.csv"),
    ];
    for (split, file) in files {
        let Some(path) = dirs.iter().map(|d| d.join(file)).find(|p| p.exists()) else {
            continue;
        };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ids = text
            .lines()
            .filter_map(|line| line.split(',').next())
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(sen1floods11_id)
            .collect();
        m.splits.insert(split.to_string(), ids);
    }
    Ok(m)
}

/// `Bolivia_103757_S1Hand.tif` → `Bolivia_103757`.
fn sen1floods11_id(file: &str) -> String {
    let parts: Vec<&str> = file.split('_').collect();
    if parts.len() >= 3 {
        parts[..parts.len() - 1].join("_")
    } else {
        file.trim_end_matches(".tif").to_string()
    }
}

fn scan_floodplanet(root: &Path, channel_count: usize) -> Result<DatasetManifest> {
    let mut samples = Vec::new();
    for p in list_dir(&root.join("images"))? {
        let name = file_name(&p);
        if name.ends_with(".tif") || name.ends_with(".tiff") {
            let id = name.trim_end_matches(".tiff").trim_end_matches(".tif").to_string();
            samples.push(SampleEntry {
                id,
                image: PathBuf::from("images").join(&name),
                mask: PathBuf::from("labels").join(&name),
                format: TileFormat::Geotiff,
            });
        }
    }
    let mut m = DatasetManifest::new(root, channel_count, samples);
    m.target_size = Some([320, 320]);
    Ok(m)
}

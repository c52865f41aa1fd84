//! Intermediate feature export with a principal-component RGB rendering.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use floodfuse_autograd::{Float, Graph};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array3, Axis, Ix4};
use serde::{Deserialize, Serialize};

use crate::data::write_array;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Ctx;
use crate::params::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingStage {
    /// Neck output of the transformer path.
    PreFusionAp,
    /// Raw CNN branch output, before alignment.
    PreFusionCnn,
    /// Fused pyramid fed to the decoder.
    PostFusion,
}

impl EmbeddingStage {
    pub const ALL: [EmbeddingStage; 3] = [Self::PreFusionAp, Self::PreFusionCnn, Self::PostFusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PreFusionAp => "pre_fusion_ap",
            Self::PreFusionCnn => "pre_fusion_cnn",
            Self::PostFusion => "post_fusion",
        }
    }
}

impl fmt::Display for EmbeddingStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmbeddingStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown embedding stage {s:?} (pre_fusion_ap, pre_fusion_cnn, post_fusion)")))
    }
}

/// Feature map `[C, H, W]` of one image at pyramid `level` (1 = finest).
pub fn extract_embedding<F: Float>(
    model: &Model,
    store: &ParameterStore<F>,
    image: &Array3<f32>,
    level: usize,
    stage: EmbeddingStage,
) -> Result<Array3<f32>> {
    if !(1..=4).contains(&level) {
        return Err(Error::Config(format!("embedding level must be 1..=4, got {level}")));
    }
    if stage == EmbeddingStage::PreFusionCnn && model.cnn.is_none() {
        return Err(Error::Config("pre_fusion_cnn requested but the CNN branch is disabled".into()));
    }
    let batch = image.mapv(|v| F::of(v as f64)).insert_axis(Axis(0));
    let g = Graph::<F>::new();
    let ctx = Ctx::inference(&g, store);
    let out = model.forward(&ctx, batch.view())?;
    let pyramid = match stage {
        EmbeddingStage::PreFusionAp => &out.ap,
        EmbeddingStage::PreFusionCnn => out.cnn.as_ref().expect("checked above"),
        EmbeddingStage::PostFusion => &out.fused,
    };
    let a = pyramid.levels[level - 1]
        .to_array()
        .into_dimensionality::<Ix4>()
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(a.index_axis(Axis(0), 0).mapv(|v| v.as_f64() as f32))
}

/// Projects `[C, H, W]` features onto their top three principal components
/// and rescales each to 0..=255; returns `[H, W, 3]`. Component signs are
/// fixed so the largest-magnitude loading is positive. A component with no
/// spread renders as 0.
pub fn pca_rgb(features: &Array3<f32>) -> Array3<u8> {
    let (c, h, w) = features.dim();
    let n = h * w;
    let mut x = DMatrix::<f64>::zeros(n, c);
    for k in 0..c {
        let plane = features.index_axis(Axis(0), k);
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n.max(1) as f64;
        for (p, &v) in plane.iter().enumerate() {
            x[(p, k)] = v as f64 - mean;
        }
    }
    let cov = x.transpose() * &x / n.max(1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut rgb = Array3::<u8>::zeros((h, w, 3));
    for (slot, &idx) in order.iter().take(3).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        if lead < 0.0 {
            v = -v;
        }
        let proj = &x * v;
        let (lo, hi) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &p| (a.min(p), b.max(p)));
        let span = hi - lo;
        for p in 0..n {
            let val = if span > 1e-9 { (proj[p] - lo) / span * 255.0 } else { 0.0 };
            rgb[[p / w, p % w, slot]] = val.round().clamp(0.0, 255.0) as u8;
        }
    }
    rgb
}

pub fn write_png(path: &Path, rgb: &Array3<u8>) -> Result<()> {
    let (h, w, _) = rgb.dim();
    let buf: Vec<u8> = rgb.iter().copied().collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingFiles {
    /// Raw features (`.f32` with JSON sidecar).
    pub features: PathBuf,
    pub png: PathBuf,
    pub shape: [usize; 3],
}

/// Writes `<stem>_<stage>_l<level>.f32` (+ sidecar) and a matching `.png`.
pub fn export_embedding<F: Float>(
    model: &Model,
    store: &ParameterStore<F>,
    image: &Array3<f32>,
    level: usize,
    stage: EmbeddingStage,
    dir: &Path,
    stem: &str,
) -> Result<EmbeddingFiles> {
    let feats = extract_embedding(model, store, image, level, stage)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let base = format!("{stem}_{stage}_l{level}");
    let features = dir.join(format!("{base}.f32"));
    write_array(&features, feats.view().into_dyn())?;
    let png = dir.join(format!("{base}.png"));
    write_png(&png, &pca_rgb(&feats))?;
    let (c, h, w) = feats.dim();
    Ok(EmbeddingFiles {
        features,
        png,
        shape: [c, h, w],
    })
}

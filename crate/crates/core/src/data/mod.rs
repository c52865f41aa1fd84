//! Tiles, on-disk formats, dataset manifests, fold splitting and the
//! synthetic scene generator.

mod kfold;
mod manifest;
mod raster;
mod synthetic;

pub use kfold::{kfold_split, split_sizes, FoldAssignment, SplitRatios};
pub use manifest::{
    DatasetLayout, DatasetManifest, NormStats, SampleEntry, TileFormat, BOLIVIA_SPLIT, TEST_SPLIT, TRAIN_SPLIT,
    VAL_SPLIT,
};
pub use raster::{
    read_array, read_geotiff, read_native_tile, resize_bilinear, resize_nearest, write_array, write_native_tile,
    ArrayHeader,
};
pub use synthetic::{generate_dataset, generate_synthetic, SignalChannels, SyntheticSceneSpec};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::metrics::IGNORE_LABEL;

/// One image chip with its per-pixel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSample {
    pub id: String,
    /// `[C, H, W]`.
    pub image: Array3<f32>,
    /// `[H, W]`, class ids or [`IGNORE_LABEL`].
    pub mask: Array2<i64>,
}

impl TileSample {
    pub fn new(id: impl Into<String>, image: Array3<f32>, mask: Array2<i64>, num_classes: usize) -> Result<Self> {
        let s = Self {
            id: id.into(),
            image,
            mask,
        };
        s.validate(num_classes)?;
        Ok(s)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (_, h, w) = self.image.dim();
        if self.mask.dim() != (h, w) {
            return Err(Error::Data(format!(
                "{}: image {}x{} but mask {:?}",
                self.id,
                h,
                w,
                self.mask.dim()
            )));
        }
        if let Some(v) = self
            .mask
            .iter()
            .find(|&&v| v != IGNORE_LABEL && (v < 0 || v as usize >= num_classes))
        {
            return Err(Error::Data(format!("{}: illegal mask value {v}", self.id)));
        }
        if self.image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{}: non-finite image values", self.id)));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.image.dim().0
    }

    pub fn size(&self) -> (usize, usize) {
        self.mask.dim()
    }
}

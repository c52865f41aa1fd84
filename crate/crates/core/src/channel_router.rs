//! Complementary split of the input channel stack between the transformer
//! branch and the CNN branch.

use std::fmt;

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default transformer subset over a 13-channel stack (0-based).
pub const DEFAULT_TRANSFORMER_INDICES: [usize; 6] = [1, 2, 3, 7, 11, 12];
pub const DEFAULT_TOTAL_CHANNELS: usize = 13;

/// `channels` section of the experiment config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSplitConfig {
    #[serde(rename = "total")]
    pub total_channels: usize,
    #[serde(rename = "transformer")]
    pub transformer_indices: Vec<usize>,
}

impl Default for ChannelSplitConfig {
    fn default() -> Self {
        Self {
            total_channels: DEFAULT_TOTAL_CHANNELS,
            transformer_indices: DEFAULT_TRANSFORMER_INDICES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitViolation {
    ZeroChannels,
    Duplicate(usize),
    OutOfRange { index: usize, total: usize },
    EmptyTransformer,
    EmptyComplement,
    Cardinality { expected: usize, found: usize },
}

impl fmt::Display for SplitViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitViolation::ZeroChannels => write!(f, "total channel count is zero"),
            SplitViolation::Duplicate(i) => write!(f, "index {i} listed more than once"),
            SplitViolation::OutOfRange { index, total } => {
                write!(f, "index {index} out of range for {total} channels")
            }
            SplitViolation::EmptyTransformer => write!(f, "transformer subset is empty"),
            SplitViolation::EmptyComplement => write!(f, "CNN subset (complement) is empty"),
            SplitViolation::Cardinality { expected, found } => write!(
                f,
                "transformer subset has {found} channels, patch embedding expects {expected}"
            ),
        }
    }
}

impl ChannelSplitConfig {
    pub fn new(total_channels: usize, transformer_indices: Vec<usize>) -> Self {
        Self {
            total_channels,
            transformer_indices,
        }
    }

    /// Every invariant violation; empty when the config is valid.
    /// `expected_transformer` is the patch embedding's input width, if known.
    pub fn violations(&self, expected_transformer: Option<usize>) -> Vec<SplitViolation> {
        let mut out = Vec::new();
        let c = self.total_channels;
        if c == 0 {
            out.push(SplitViolation::ZeroChannels);
        }
        let mut seen = vec![false; c];
        for &i in &self.transformer_indices {
            if i >= c {
                out.push(SplitViolation::OutOfRange { index: i, total: c });
            } else if seen[i] {
                if !out.contains(&SplitViolation::Duplicate(i)) {
                    out.push(SplitViolation::Duplicate(i));
                }
            } else {
                seen[i] = true;
            }
        }
        if self.transformer_indices.is_empty() {
            out.push(SplitViolation::EmptyTransformer);
        }
        if c > 0 && seen.iter().all(|&s| s) {
            out.push(SplitViolation::EmptyComplement);
        }
        if let Some(expected) = expected_transformer {
            if self.transformer_indices.len() != expected {
                out.push(SplitViolation::Cardinality {
                    expected,
                    found: self.transformer_indices.len(),
                });
            }
        }
        out
    }

    /// Returns the config unchanged if valid, otherwise all violations.
    pub fn validate(self, expected_transformer: Option<usize>) -> Result<Self> {
        let v = self.violations(expected_transformer);
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::ChannelSplit(v))
        }
    }

    /// Complement of the transformer subset, ascending.
    pub fn cnn_indices(&self) -> Vec<usize> {
        (0..self.total_channels)
            .filter(|i| !self.transformer_indices.contains(i))
            .collect()
    }

    fn check_runtime(&self, channels: usize) -> Result<()> {
        if channels != self.total_channels {
            return Err(Error::Config(format!(
                "image has {channels} channels, channel split expects {}",
                self.total_channels
            )));
        }
        let v = self.violations(None);
        if !v.is_empty() {
            return Err(Error::ChannelSplit(v));
        }
        Ok(())
    }

    /// Splits a `[C, H, W]` image into `(x_ap, x_cnn)`.
    pub fn split<T: Clone>(&self, image: ArrayView3<T>) -> Result<(Array3<T>, Array3<T>)> {
        self.check_runtime(image.shape()[0])?;
        Ok((
            image.select(Axis(0), &self.transformer_indices),
            image.select(Axis(0), &self.cnn_indices()),
        ))
    }

    /// Splits a `[B, C, H, W]` batch along the channel axis.
    pub fn split_batch<T: Clone>(&self, batch: ArrayView4<T>) -> Result<(Array4<T>, Array4<T>)> {
        self.check_runtime(batch.shape()[1])?;
        Ok((
            batch.select(Axis(1), &self.transformer_indices),
            batch.select(Axis(1), &self.cnn_indices()),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn ramp(c: usize) -> Array3<f32> {
        Array3::from_shape_fn((c, 3, 2), |(k, i, j)| (k * 100 + i * 10 + j) as f32)
    }

    #[test]
    fn default_split_gathers_complement_in_order() {
        let cfg = ChannelSplitConfig::default();
        assert!(cfg.violations(Some(6)).is_empty());
        assert_eq!(cfg.cnn_indices(), vec![0, 4, 5, 6, 8, 9, 10]);
        let img = ramp(13);
        let (ap, cnn) = cfg.split(img.view()).unwrap();
        assert_eq!(ap.shape(), &[6, 3, 2]);
        assert_eq!(cnn.shape(), &[7, 3, 2]);
        for (k, &src) in cfg.transformer_indices.iter().enumerate() {
            assert_eq!(ap.index_axis(Axis(0), k), img.index_axis(Axis(0), src));
        }
    }

    #[test]
    fn eight_channel_complement() {
        let cfg = ChannelSplitConfig::new(8, vec![0, 1, 2, 3, 4, 5]);
        let (_, cnn) = cfg.split(ramp(8).view()).unwrap();
        assert_eq!(cnn[[0, 0, 0]], 600.0);
        assert_eq!(cnn[[1, 0, 0]], 700.0);
    }

    #[test]
    fn violations_are_all_reported() {
        let dup = ChannelSplitConfig::new(13, vec![1, 1, 2]);
        assert_eq!(dup.violations(None), vec![SplitViolation::Duplicate(1)]);
        let oob = ChannelSplitConfig::new(13, vec![13]);
        assert_eq!(
            oob.violations(None),
            vec![SplitViolation::OutOfRange { index: 13, total: 13 }]
        );
        let full = ChannelSplitConfig::new(6, (0..6).collect());
        assert_eq!(full.violations(None), vec![SplitViolation::EmptyComplement]);
        assert!(full.split(ramp(6).view()).is_err());
        let card = ChannelSplitConfig::new(13, vec![0, 1]);
        assert_eq!(
            card.violations(Some(6)),
            vec![SplitViolation::Cardinality { expected: 6, found: 2 }]
        );
    }

    #[test]
    fn channel_count_mismatch_is_config_error() {
        let err = ChannelSplitConfig::default().split(ramp(12).view()).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn valid_config_round_trips() {
        let cfg = ChannelSplitConfig::default();
        assert_eq!(cfg.clone().validate(Some(6)).unwrap(), cfg);
    }

    #[test]
    fn partition_reconstructs_input() {
        let cfg = ChannelSplitConfig::new(9, vec![8, 2, 5]);
        let img = ramp(9);
        let (ap, cnn) = cfg.split(img.view()).unwrap();
        let mut back = Array3::<f32>::zeros(img.raw_dim());
        for (k, &i) in cfg.transformer_indices.iter().enumerate() {
            back.index_axis_mut(Axis(0), i).assign(&ap.index_axis(Axis(0), k));
        }
        for (k, &i) in cfg.cnn_indices().iter().enumerate() {
            back.index_axis_mut(Axis(0), i).assign(&cnn.index_axis(Axis(0), k));
        }
        assert_eq!(back, img);
    }
}

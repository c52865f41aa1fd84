//! Hybrid transformer/CNN flood segmentation.
//!
//! The input channels are split in two ([`channel_router`]). One part goes
//! through a frozen ViT trunk with trainable bottleneck adapters
//! ([`vit`]) and an upsampling ladder ([`neck`]); the rest goes through a
//! residual CNN with channel/spatial attention ([`cnn`]). The two pyramids
//! are blended level by level with a biased sigmoid gate ([`fusion`]) and
//! decoded by a UperNet-style head ([`decoder`]). [`model`] wires the parts
//! together, [`train`] fits them and [`metrics`] scores the result.
//!
//! Everything runs on the CPU through the `floodfuse-autograd` tape and is
//! single-threaded, so a fixed seed reproduces a run bit for bit.

pub mod channel_router;
pub mod cnn;
pub mod data;
pub mod decoder;
pub mod embed;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod nn;
pub mod params;
pub mod train;
pub mod vit;

pub use error::{Error, Result};

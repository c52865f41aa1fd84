//! The full dual-path segmentation model.

use floodfuse_autograd::{Float, Var};
use ndarray::{Array4, ArrayD, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::channel_router::ChannelSplitConfig;
use crate::cnn::{CnnBranch, CnnConfig};
use crate::decoder::{DecoderConfig, UperHead};
use crate::error::{shape_err, Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::neck::{level_channels, FeaturePyramid, Neck, NeckConfig};
use crate::nn::Ctx;
use crate::params::{Inventory, ParameterStore, Registry};
use crate::vit::{token_to_image, AdaptedVit, BackboneConfig};

/// Module toggles for the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    #[serde(default = "yes")]
    pub adapters: bool,
    /// Residual shortcuts in the CNN blocks (plain conv stacks when off).
    #[serde(default = "yes")]
    pub residual: bool,
    #[serde(default = "yes")]
    pub cam: bool,
    /// Attention fusion (elementwise mean of aligned maps when off).
    #[serde(default = "yes")]
    pub m2faf: bool,
    /// The CNN branch as a whole; when off the transformer pyramid is decoded
    /// directly.
    #[serde(default = "yes")]
    pub cnn: bool,
}

fn yes() -> bool {
    true
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            adapters: true,
            residual: true,
            cam: true,
            m2faf: true,
            cnn: true,
        }
    }
}

/// Rows of the module ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationRow {
    /// Frozen trunk without adapters; CNN with residual + CAM; attention fusion.
    NoAdaptation,
    /// Adapters only, CNN present but without residual, CAM or attention fusion.
    AdaptationPlainCnn,
    /// Adapters only, CNN branch removed.
    AdaptationNoCnn,
    AdaptationResidual,
    AdaptationCam,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] = [
        AblationRow::NoAdaptation,
        AblationRow::AdaptationPlainCnn,
        AblationRow::AdaptationNoCnn,
        AblationRow::AdaptationResidual,
        AblationRow::AdaptationCam,
        AblationRow::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::NoAdaptation => "no_adaptation",
            AblationRow::AdaptationPlainCnn => "adaptation_plain_cnn",
            AblationRow::AdaptationNoCnn => "adaptation_no_cnn",
            AblationRow::AdaptationResidual => "adaptation_residual",
            AblationRow::AdaptationCam => "adaptation_cam",
            AblationRow::Full => "full",
        }
    }

    pub fn flags(self) -> AblationFlags {
        let f = |adapters, residual, cam, m2faf, cnn| AblationFlags {
            adapters,
            residual,
            cam,
            m2faf,
            cnn,
        };
        match self {
            AblationRow::NoAdaptation => f(false, true, true, true, true),
            AblationRow::AdaptationPlainCnn => f(true, false, false, false, true),
            AblationRow::AdaptationNoCnn => f(true, false, false, false, false),
            AblationRow::AdaptationResidual => f(true, true, false, true, true),
            AblationRow::AdaptationCam => f(true, false, true, true, true),
            AblationRow::Full => f(true, true, true, true, true),
        }
    }

    pub fn from_flags(flags: AblationFlags) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.flags() == flags)
    }
}

/// Architecture hyperparameters (the model sections of the experiment config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: ChannelSplitConfig,
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
    pub cnn: CnnConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub ablation: AblationFlags,
}

impl ModelConfig {
    /// Desk-scale configuration for 64×64 inputs.
    pub fn toy() -> Self {
        Self {
            channels: ChannelSplitConfig::default(),
            backbone: BackboneConfig::toy(),
            neck: NeckConfig::default(),
            cnn: CnnConfig::toy(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig {
                channels: 64,
                ppm_scales: vec![1, 2, 4],
                classes: 2,
            },
            ablation: AblationFlags::default(),
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            channels: ChannelSplitConfig::default(),
            backbone: BackboneConfig::paper_scale(),
            neck: NeckConfig::default(),
            cnn: CnnConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            ablation: AblationFlags::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.channels.clone().validate(Some(self.backbone.in_channels))?;
        self.cnn.validate()?;
        self.fusion.validate()?;
        self.decoder.validate()?;
        if !self.backbone.embed_dim.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by 8 for the neck",
                self.backbone.embed_dim
            )));
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        let p = self.backbone.patch_size;
        let gcd = |mut a: usize, mut b: usize| {
            while b != 0 {
                (a, b) = (b, a % b);
            }
            a
        };
        p / gcd(p, 16) * 16
    }

    pub fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if c != self.channels.total_channels {
            return Err(Error::Config(format!(
                "input has {c} channels, config expects {}",
                self.channels.total_channels
            )));
        }
        let m = self.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return shape_err(format!("input {h}x{w} not divisible by {m}"));
        }
        let coarsest = h.min(w) / self.backbone.patch_size;
        if let Some(&s) = self.decoder.ppm_scales.last() {
            if s > coarsest {
                return shape_err(format!(
                    "PPM scale {s} exceeds the coarsest level ({coarsest}) for a {h}x{w} input"
                ));
            }
        }
        Ok(())
    }
}

/// Everything a forward pass produces.
pub struct ForwardOutput<'g, F: Float> {
    pub logits: Var<'g, F>,
    pub taps: Vec<Var<'g, F>>,
    pub ap: FeaturePyramid<'g, F>,
    pub cnn: Option<FeaturePyramid<'g, F>>,
    pub fused: FeaturePyramid<'g, F>,
    pub gates: Vec<Var<'g, F>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vit: AdaptedVit,
    pub neck: Neck,
    pub cnn: Option<CnnBranch>,
    pub fusion: Option<Fusion>,
    pub head: UperHead,
    registry: Registry,
}

impl Model {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let flags = cfg.ablation;
        let d = cfg.backbone.embed_dim;
        let mut reg = Registry::new();
        let vit = AdaptedVit::new(&mut reg, &cfg.backbone, flags.adapters)?;
        let neck = Neck::new(&mut reg, d, &cfg.neck)?;
        let ap_channels = level_channels(d);
        let (cnn, fusion) = if flags.cnn {
            let cnn_in = cfg.channels.total_channels - cfg.channels.transformer_indices.len();
            let cnn = CnnBranch::new(&mut reg, cnn_in, &cfg.cnn, flags.residual, flags.cam)?;
            let fusion = Fusion::new(&mut reg, ap_channels, &cfg.cnn.widths, &cfg.fusion, flags.m2faf)?;
            (Some(cnn), Some(fusion))
        } else {
            (None, None)
        };
        let head = UperHead::new(&mut reg, ap_channels, &cfg.decoder)?;
        Ok(Self {
            cfg: cfg.clone(),
            vit,
            neck,
            cnn,
            fusion,
            head,
            registry: reg,
        })
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn inventory(&self) -> Inventory {
        self.registry.inventory()
    }

    pub fn init_store<F: Float>(&self, seed: u64) -> ParameterStore<F> {
        self.registry.init_store(seed)
    }

    /// Full pipeline on a batch `[B, C, H, W]`.
    pub fn forward<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, batch: ArrayView4<F>) -> Result<ForwardOutput<'g, F>> {
        let (_, c, h, w) = batch.dim();
        self.cfg.check_input(c, h, w)?;
        let (x_ap, x_cnn) = self.cfg.channels.split_batch(batch)?;
        let g = ctx.graph;

        let (tokens, grid) = self.vit.forward_features(ctx, g.constant(x_ap.into_dyn()))?;
        let taps = tokens
            .iter()
            .map(|t| token_to_image(*t, grid))
            .collect::<Result<Vec<_>>>()?;
        let ap = self.neck.forward(ctx, &taps)?;

        let (cnn, fused, gates) = match (&self.cnn, &self.fusion) {
            (Some(branch), Some(fusion)) => {
                let cnn = branch.forward(ctx, g.constant(x_cnn.into_dyn()))?;
                let out = fusion.forward(ctx, &ap, &cnn)?;
                (Some(cnn), out.pyramid, out.gates)
            }
            _ => (None, ap.clone(), Vec::new()),
        };
        let logits = self.head.forward(ctx, &fused, (h, w))?;
        Ok(ForwardOutput {
            logits,
            taps,
            ap,
            cnn,
            fused,
            gates,
        })
    }

    /// Inference-mode logits `[B, K, H, W]`.
    pub fn predict<F: Float>(&self, store: &ParameterStore<F>, batch: ArrayView4<F>) -> Result<ArrayD<F>> {
        let g = floodfuse_autograd::Graph::new();
        let ctx = Ctx::inference(&g, store);
        Ok(self.forward(&ctx, batch)?.logits.to_array())
    }

    /// Per-pixel argmax classes `[B, H, W]`.
    pub fn predict_classes<F: Float>(&self, store: &ParameterStore<F>, batch: ArrayView4<F>) -> Result<ndarray::Array3<i64>> {
        Ok(argmax_classes(&self.predict(store, batch)?))
    }
}

/// Argmax over the class axis of `[B, K, H, W]` logits (first maximum wins).
pub fn argmax_classes<F: Float>(logits: &ArrayD<F>) -> ndarray::Array3<i64> {
    let s = logits.shape();
    let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
    ndarray::Array3::from_shape_fn((b, h, w), |(n, i, j)| {
        let mut best = 0;
        for c in 1..k {
            if logits[[n, c, i, j]] > logits[[n, best, i, j]] {
                best = c;
            }
        }
        best as i64
    })
}

/// Stacks `[C, H, W]` images into a batch.
pub fn stack_batch<F: Float>(images: &[&ndarray::Array3<F>]) -> Array4<F> {
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    ndarray::stack(ndarray::Axis(0), &views).expect("images share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Component;

    #[test]
    fn ablation_rows_are_distinct_and_round_trip() {
        for r in AblationRow::ALL {
            assert_eq!(AblationRow::from_flags(r.flags()), Some(r));
        }
    }

    #[test]
    fn disabling_modules_removes_parameters() {
        let full = Model::build(&ModelConfig::toy()).unwrap().inventory();
        for row in AblationRow::ALL {
            let mut cfg = ModelConfig::toy();
            cfg.ablation = row.flags();
            let inv = Model::build(&cfg).unwrap().inventory();
            if row != AblationRow::Full {
                assert!(inv.total < full.total, "{}", row.name());
            }
            assert_eq!(inv.count(Component::Trunk), full.count(Component::Trunk));
        }
    }

    #[test]
    fn size_multiple_is_lcm() {
        let mut cfg = ModelConfig::toy();
        assert_eq!(cfg.size_multiple(), 16);
        cfg.backbone.patch_size = 8;
        assert_eq!(cfg.size_multiple(), 16);
        cfg.backbone.patch_size = 14;
        assert_eq!(cfg.size_multiple(), 112);
    }
}

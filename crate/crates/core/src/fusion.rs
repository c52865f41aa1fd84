//! Level-wise attention fusion of the transformer and CNN pyramids.
//!
//! Per level the CNN map is resized and projected onto the transformer map's
//! shape, a sigmoid gate is computed from both, biased towards the
//! transformer by `β`, and used to blend the two.

use floodfuse_autograd::{Float, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::neck::FeaturePyramid;
use crate::nn::{Conv2d, Ctx};
use crate::params::{Component, Init, Registry};
use floodfuse_autograd::Conv2dSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskArity {
    /// One gate per pixel, shared by all channels.
    #[default]
    Single,
    /// One gate per pixel and channel.
    PerChannel,
}

/// `fusion` section of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub mask: MaskArity,
}

fn default_beta() -> f64 {
    0.8
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            beta: 0.8,
            mask: MaskArity::Single,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("fusion: beta {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }
}

/// Bilinear resize to `(h, w)` followed by a 1×1 projection.
pub fn align<'g, F: Float>(ctx: &Ctx<'g, '_, F>, proj: &Conv2d, cnn_level: Var<'g, F>, (h, w): (usize, usize)) -> Var<'g, F> {
    proj.forward(ctx, cnn_level.resize_bilinear(h, w))
}

/// `attn' = attn (1 − β) + β`.
pub fn bias_gate<F: Float>(attn: Var<'_, F>, beta: f64) -> Var<'_, F> {
    attn.scale(F::of(1.0 - beta)).add_scalar(F::of(beta))
}

/// `attn' ⊙ f_ap + (1 − attn') ⊙ f_cnn`; `attn'` broadcasts over channels
/// when it has one channel.
pub fn blend<'g, F: Float>(f_ap: Var<'g, F>, f_cnn: Var<'g, F>, gate: Var<'g, F>) -> Var<'g, F> {
    gate.mul(f_ap).add(gate.one_minus().mul(f_cnn))
}

/// One fused level with its gates.
pub struct FusedLevel<'g, F: Float> {
    pub fused: Var<'g, F>,
    /// Raw gate `sigmoid(conv(concat))`.
    pub attn: Var<'g, F>,
    /// Biased gate.
    pub gate: Var<'g, F>,
}

/// Gate convolution of one level (1×1 over the concatenated maps).
pub fn fuse_level<'g, F: Float>(
    ctx: &Ctx<'g, '_, F>,
    mask_conv: &Conv2d,
    f_ap: Var<'g, F>,
    f_cnn: Var<'g, F>,
    beta: f64,
) -> Result<FusedLevel<'g, F>> {
    if f_ap.shape() != f_cnn.shape() {
        return shape_err(format!("fuse_level: {:?} vs {:?}", f_ap.shape(), f_cnn.shape()));
    }
    let attn = mask_conv.forward(ctx, ctx.graph.concat(&[f_ap, f_cnn], 1)).sigmoid();
    let gate = bias_gate(attn, beta);
    Ok(FusedLevel {
        fused: blend(f_ap, f_cnn, gate),
        attn,
        gate,
    })
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub cfg: FusionConfig,
    pub align: Vec<Conv2d>,
    /// Empty when attention fusion is disabled (plain mean instead).
    pub masks: Vec<Conv2d>,
}

/// Result of [`Fusion::forward`].
pub struct FusionOutput<'g, F: Float> {
    pub pyramid: FeaturePyramid<'g, F>,
    pub aligned: Vec<Var<'g, F>>,
    pub gates: Vec<Var<'g, F>>,
}

impl Fusion {
    /// `ap_channels` / `cnn_channels`: per-level widths of the two pyramids.
    pub fn new(reg: &mut Registry, ap_channels: [usize; 4], cnn_channels: &[usize], cfg: &FusionConfig, attention: bool) -> Result<Self> {
        cfg.validate()?;
        if cnn_channels.len() != 4 {
            return Err(Error::Config(format!("fusion needs 4 CNN levels, got {}", cnn_channels.len())));
        }
        let prev = reg.component();
        reg.set_component(Component::Fusion);
        let mut align = Vec::new();
        let mut masks = Vec::new();
        for i in 0..4 {
            let (ct, cc) = (ap_channels[i], cnn_channels[i]);
            align.push(Conv2d::new(reg, &format!("fusion.level{}.align", i + 1), cc, ct, 1, 1, true));
            if attention {
                let out = match cfg.mask {
                    MaskArity::Single => 1,
                    MaskArity::PerChannel => ct,
                };
                masks.push(Conv2d::with_init(
                    reg,
                    &format!("fusion.level{}.mask", i + 1),
                    (2 * ct, out, 1),
                    Conv2dSpec::new(1, 0),
                    Init::Zeros,
                    Some(Init::Zeros),
                ));
            }
        }
        reg.set_component(prev);
        Ok(Self {
            cfg: cfg.clone(),
            align,
            masks,
        })
    }

    pub fn attention(&self) -> bool {
        !self.masks.is_empty()
    }

    pub fn forward<'g, F: Float>(
        &self,
        ctx: &Ctx<'g, '_, F>,
        ap: &FeaturePyramid<'g, F>,
        cnn: &FeaturePyramid<'g, F>,
    ) -> Result<FusionOutput<'g, F>> {
        if ap.levels.len() != 4 || cnn.levels.len() != 4 {
            return shape_err("fusion needs two 4-level pyramids");
        }
        let mut levels = Vec::with_capacity(4);
        let mut aligned = Vec::with_capacity(4);
        let mut gates = Vec::new();
        for i in 0..4 {
            let s = ap.levels[i].shape();
            let a = align(ctx, &self.align[i], cnn.levels[i], (s[2], s[3]));
            if a.shape() != s {
                return shape_err(format!("level {}: aligned CNN {:?} vs transformer {s:?}", i + 1, a.shape()));
            }
            let fused = match self.masks.get(i) {
                Some(mask) => {
                    let out = fuse_level(ctx, mask, ap.levels[i], a, self.cfg.beta)?;
                    gates.push(out.gate);
                    out.fused
                }
                None => ap.levels[i].add(a).scale(F::of(0.5)),
            };
            aligned.push(a);
            levels.push(fused);
        }
        Ok(FusionOutput {
            pyramid: FeaturePyramid::new(levels)?,
            aligned,
            gates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::params::ParameterStore;
    use floodfuse_autograd::Graph;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn gate_arithmetic() {
        let g = Graph::<f64>::new();
        let attn = g.constant(ArrayD::from_elem(IxDyn(&[1]), 0.5));
        assert!((bias_gate(attn, 0.8).item() - 0.9).abs() < 1e-15);
        assert_eq!(bias_gate(attn, 0.0).item(), 0.5);
        assert_eq!(bias_gate(attn, 1.0).item(), 1.0);
    }

    #[test]
    fn ones_and_zeros_blend_to_gate() {
        let g = Graph::<f64>::new();
        let ones = g.constant(ArrayD::ones(IxDyn(&[1, 3, 2, 2])));
        let zeros = g.constant(ArrayD::zeros(IxDyn(&[1, 3, 2, 2])));
        let gate = bias_gate(g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.5)), 0.8);
        let out = blend(ones, zeros, gate).to_array();
        assert!(out.iter().all(|&v| (v - 0.9).abs() < 1e-15));
    }

    #[test]
    fn zero_mask_starts_at_half() {
        let mut reg = Registry::new();
        let fusion = Fusion::new(&mut reg, [4, 4, 4, 4], &[2, 2, 2, 2], &FusionConfig::default(), true).unwrap();
        let store: ParameterStore<f64> = reg.init_store(0);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let mk = |c, s| g.constant(ArrayD::from_elem(IxDyn(&[1, c, s, s]), 1.0));
        let ap = FeaturePyramid::new(vec![mk(4, 8), mk(4, 4), mk(4, 2), mk(4, 1)]).unwrap();
        let cnn = FeaturePyramid::new(vec![mk(2, 4), mk(2, 2), mk(2, 1), mk(2, 1)]).unwrap();
        let out = fusion.forward(&ctx, &ap, &cnn).unwrap();
        assert_eq!(out.pyramid.shapes(), ap.shapes());
        for gate in out.gates {
            assert!(gate.to_array().iter().all(|&v| (v - 0.9).abs() < 1e-15));
        }
    }

    #[test]
    fn beta_out_of_range_rejected() {
        let cfg = FusionConfig {
            beta: 1.5,
            ..FusionConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}

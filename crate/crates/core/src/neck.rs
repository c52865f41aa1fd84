//! Per-tap upsampling ladder turning four same-size token maps into a
//! resolution pyramid (8×, 4×, 2×, 1×).

use floodfuse_autograd::{Float, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Ctx};
use crate::params::{Component, Registry};

/// Four feature maps `[B, C_i, H_i, W_i]`, finest first.
#[derive(Clone)]
pub struct FeaturePyramid<'g, F: Float> {
    pub levels: Vec<Var<'g, F>>,
}

impl<'g, F: Float> FeaturePyramid<'g, F> {
    pub fn new(levels: Vec<Var<'g, F>>) -> Result<Self> {
        if levels.len() != 4 {
            return shape_err(format!("a pyramid has 4 levels, got {}", levels.len()));
        }
        if levels.iter().any(|l| l.ndim() != 4) {
            return shape_err("pyramid levels must be [B, C, H, W]");
        }
        Ok(Self { levels })
    }

    /// `[C, H, W]` of each level.
    pub fn shapes(&self) -> Vec<[usize; 3]> {
        self.levels
            .iter()
            .map(|l| {
                let s = l.shape();
                [s[1], s[2], s[3]]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeckNorm {
    #[default]
    Batch,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeckActivation {
    #[default]
    Relu,
    None,
}

/// `neck` section of the experiment config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeckConfig {
    #[serde(default)]
    pub norm: NeckNorm,
    #[serde(default)]
    pub activation: NeckActivation,
}

#[derive(Debug, Clone)]
struct UpStep {
    deconv: ConvTranspose2d,
    bn: Option<BatchNorm2d>,
}

#[derive(Debug, Clone)]
pub struct Neck {
    cfg: NeckConfig,
    embed_dim: usize,
    ladders: Vec<Vec<UpStep>>,
    top: Conv2d,
}

/// Channel count of each neck output level for embed dim `d`.
pub fn level_channels(d: usize) -> [usize; 4] {
    [d / 8, d / 4, d / 2, d]
}

impl Neck {
    pub fn new(reg: &mut Registry, d: usize, cfg: &NeckConfig) -> Result<Self> {
        if !d.is_multiple_of(8) || d == 0 {
            return Err(Error::Config(format!("neck: embed dim {d} must be a positive multiple of 8")));
        }
        let prev = reg.component();
        reg.set_component(Component::Neck);
        let mut ladders = Vec::new();
        for (level, steps) in [(1usize, 3usize), (2, 2), (3, 1)] {
            let mut ladder = Vec::new();
            let mut c = d;
            for s in 0..steps {
                let prefix = format!("neck.fpn{level}.{s}");
                ladder.push(UpStep {
                    deconv: ConvTranspose2d::new(reg, &format!("{prefix}.deconv"), c, c / 2, 2, 2, true),
                    bn: (cfg.norm == NeckNorm::Batch).then(|| BatchNorm2d::new(reg, &format!("{prefix}.bn"), c / 2)),
                });
                c /= 2;
            }
            ladders.push(ladder);
        }
        let top = Conv2d::new(reg, "neck.fpn4.conv", d, d, 1, 1, true);
        reg.set_component(prev);
        Ok(Self {
            cfg: cfg.clone(),
            embed_dim: d,
            ladders,
            top,
        })
    }

    /// Name of the level-4 1×1 convolution weight.
    pub fn top_conv(&self) -> &Conv2d {
        &self.top
    }

    /// `taps`: four `[B, d, h, w]` maps of identical shape.
    pub fn forward<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, taps: &[Var<'g, F>]) -> Result<FeaturePyramid<'g, F>> {
        if taps.len() != 4 {
            return shape_err(format!("neck expects 4 tap maps, got {}", taps.len()));
        }
        let s0 = taps[0].shape();
        if s0.len() != 4 || s0[1] != self.embed_dim || taps.iter().any(|t| t.shape() != s0) {
            return shape_err(format!(
                "neck taps must share shape [B, {}, h, w]; got {:?}",
                self.embed_dim,
                taps.iter().map(|t| t.shape()).collect::<Vec<_>>()
            ));
        }
        let mut levels = Vec::with_capacity(4);
        for (ladder, &tap) in self.ladders.iter().zip(taps) {
            let mut x = tap;
            for step in ladder {
                x = step.deconv.forward(ctx, x);
                if let Some(bn) = &step.bn {
                    x = bn.forward(ctx, x);
                }
                if self.cfg.activation == NeckActivation::Relu {
                    x = x.relu();
                }
            }
            levels.push(x);
        }
        levels.push(self.top.forward(ctx, taps[3]));
        FeaturePyramid::new(levels)
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
    fn toy_schedule_shapes() {
        let mut reg = Registry::new();
        let neck = Neck::new(&mut reg, 64, &NeckConfig::default()).unwrap();
        let store: ParameterStore<f32> = reg.init_store(0);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Train);
        let taps: Vec<_> = (0..4)
            .map(|i| g.constant(ArrayD::from_elem(IxDyn(&[2, 64, 8, 8]), i as f32)))
            .collect();
        let p = neck.forward(&ctx, &taps).unwrap();
        assert_eq!(p.shapes(), vec![[8, 64, 64], [16, 32, 32], [32, 16, 16], [64, 8, 8]]);
    }

    #[test]
    fn rejects_bad_dims() {
        let mut reg = Registry::new();
        assert!(Neck::new(&mut reg, 60, &NeckConfig::default()).is_err());
    }

    #[test]
    fn identity_top_conv_keeps_constants() {
        let mut reg = Registry::new();
        let neck = Neck::new(&mut reg, 8, &NeckConfig::default()).unwrap();
        let mut store: ParameterStore<f64> = reg.init_store(0);
        let mut eye = ArrayD::zeros(IxDyn(&[8, 8, 1, 1]));
        for c in 0..8 {
            eye[[c, c, 0, 0]] = 1.0;
        }
        store.set_value(&neck.top_conv().weight, eye).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let taps: Vec<_> = (0..4)
            .map(|_| g.constant(ArrayD::from_elem(IxDyn(&[1, 8, 3, 3]), 2.5)))
            .collect();
        let top = neck.forward(&ctx, &taps).unwrap().levels[3].to_array();
        assert!(top.iter().all(|&v| v == 2.5));
    }
}

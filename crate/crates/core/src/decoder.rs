//! UperNet head: pyramid pooling on the coarsest level, lateral projections,
//! top-down fusion, multi-level concatenation and a pixel classifier.

use floodfuse_autograd::{Float, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::neck::FeaturePyramid;
use crate::nn::{Conv2d, ConvBnRelu, Ctx};
use crate::params::{Component, Registry};

/// `decoder` section of the experiment config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_scales")]
    pub ppm_scales: Vec<usize>,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_channels() -> usize {
    256
}
fn default_scales() -> Vec<usize> {
    vec![1, 2, 3, 6]
}
fn default_classes() -> usize {
    2
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            ppm_scales: default_scales(),
            classes: 2,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("decoder: {m}")));
        if self.channels == 0 || self.classes == 0 {
            return err("channels and classes must be positive".into());
        }
        if self.ppm_scales.is_empty() || self.ppm_scales[0] == 0 {
            return err("ppm_scales must be non-empty and positive".into());
        }
        if self.ppm_scales.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("ppm_scales {:?} must be strictly increasing", self.ppm_scales));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Ppm {
    pub scales: Vec<usize>,
    pub branches: Vec<ConvBnRelu>,
    pub bottleneck: ConvBnRelu,
}

impl Ppm {
    pub fn new(reg: &mut Registry, prefix: &str, cin: usize, channels: usize, scales: &[usize]) -> Self {
        let branches = scales
            .iter()
            .map(|s| ConvBnRelu::new(reg, &format!("{prefix}.pool{s}"), cin, channels, 1))
            .collect();
        Self {
            scales: scales.to_vec(),
            branches,
            bottleneck: ConvBnRelu::new(reg, &format!("{prefix}.bottleneck"), cin + scales.len() * channels, channels, 3),
        }
    }

    pub fn forward<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let largest = *self.scales.last().unwrap_or(&0);
        if largest > h.min(w) {
            return shape_err(format!("PPM scale {largest} exceeds coarsest map {h}x{w}"));
        }
        let mut parts = vec![x];
        for (&scale, branch) in self.scales.iter().zip(&self.branches) {
            let pooled = x.adaptive_avg_pool2d(scale, scale);
            parts.push(branch.forward(ctx, pooled).resize_bilinear(h, w));
        }
        Ok(self.bottleneck.forward(ctx, ctx.graph.concat(&parts, 1)))
    }
}

#[derive(Debug, Clone)]
pub struct UperHead {
    pub cfg: DecoderConfig,
    pub ppm: Ppm,
    pub laterals: Vec<ConvBnRelu>,
    pub smooth: Vec<ConvBnRelu>,
    pub fuse: ConvBnRelu,
    pub classifier: Conv2d,
}

impl UperHead {
    /// `in_channels`: widths of the four input levels, finest first.
    pub fn new(reg: &mut Registry, in_channels: [usize; 4], cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let prev = reg.component();
        reg.set_component(Component::Decoder);
        let c = cfg.channels;
        let ppm = Ppm::new(reg, "decoder.ppm", in_channels[3], c, &cfg.ppm_scales);
        let laterals = (0..3)
            .map(|i| ConvBnRelu::new(reg, &format!("decoder.lateral{}", i + 1), in_channels[i], c, 1))
            .collect();
        let smooth = (0..3)
            .map(|i| ConvBnRelu::new(reg, &format!("decoder.smooth{}", i + 1), c, c, 3))
            .collect();
        let fuse = ConvBnRelu::new(reg, "decoder.fuse", 4 * c, c, 3);
        let classifier = Conv2d::new(reg, "decoder.classifier", c, cfg.classes, 1, 1, true);
        reg.set_component(prev);
        Ok(Self {
            cfg: cfg.clone(),
            ppm,
            laterals,
            smooth,
            fuse,
            classifier,
        })
    }

    /// Logits `[B, classes, out_h, out_w]`.
    pub fn forward<'g, F: Float>(
        &self,
        ctx: &Ctx<'g, '_, F>,
        pyramid: &FeaturePyramid<'g, F>,
        (out_h, out_w): (usize, usize),
    ) -> Result<Var<'g, F>> {
        let lv = &pyramid.levels;
        if lv.len() != 4 {
            return shape_err("decoder needs 4 levels");
        }
        let mut nodes = vec![self.ppm.forward(ctx, lv[3])?];
        for i in (0..3).rev() {
            let lat = self.laterals[i].forward(ctx, lv[i]);
            let s = lat.shape();
            let merged = lat.add(nodes[0].resize_bilinear(s[2], s[3]));
            nodes.insert(0, merged);
        }
        for i in 0..3 {
            nodes[i] = self.smooth[i].forward(ctx, nodes[i]);
        }
        let s1 = nodes[0].shape();
        let (h1, w1) = (s1[2], s1[3]);
        let up: Vec<_> = nodes.iter().map(|n| n.resize_bilinear(h1, w1)).collect();
        let fused = self.fuse.forward(ctx, ctx.graph.concat(&up, 1));
        Ok(self.classifier.forward(ctx, fused).resize_bilinear(out_h, out_w))
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
    fn toy_logit_shape_and_zero_classifier() {
        let cfg = DecoderConfig {
            channels: 16,
            ppm_scales: vec![1, 2, 4],
            classes: 2,
        };
        let mut reg = Registry::new();
        let head = UperHead::new(&mut reg, [8, 16, 32, 64], &cfg).unwrap();
        let mut store: ParameterStore<f32> = reg.init_store(2);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Train);
        let mk = |c, s| g.constant(ArrayD::from_shape_fn(IxDyn(&[2, c, s, s]), |i| ((i[2] + i[3] + i[1]) % 5) as f32));
        let p = FeaturePyramid::new(vec![mk(8, 32), mk(16, 16), mk(32, 8), mk(64, 4)]).unwrap();
        let logits = head.forward(&ctx, &p, (64, 64)).unwrap();
        assert_eq!(logits.shape(), vec![2, 2, 64, 64]);
        drop(ctx);

        store.set_value(&head.classifier.weight, ArrayD::zeros(IxDyn(&[2, 16, 1, 1]))).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let mk = |c, s| g.constant(ArrayD::from_elem(IxDyn(&[1, c, s, s]), 1.0f32));
        let p = FeaturePyramid::new(vec![mk(8, 32), mk(16, 16), mk(32, 8), mk(64, 4)]).unwrap();
        let logits = head.forward(&ctx, &p, (64, 64)).unwrap().to_array();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ppm_rejects_oversized_scale() {
        let mut reg = Registry::new();
        let ppm = Ppm::new(&mut reg, "ppm", 4, 4, &[1, 2, 3, 6]);
        let store: ParameterStore<f32> = reg.init_store(0);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        assert!(ppm.forward(&ctx, g.constant(ArrayD::zeros(IxDyn(&[1, 4, 4, 4])))).is_err());
        assert!(ppm.forward(&ctx, g.constant(ArrayD::zeros(IxDyn(&[1, 4, 14, 14])))).is_ok());
    }

    #[test]
    fn ppm_of_constant_is_constant() {
        let mut reg = Registry::new();
        let ppm = Ppm::new(&mut reg, "ppm", 3, 4, &[1, 2, 3]);
        let store: ParameterStore<f64> = reg.init_store(4);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let y = ppm.forward(&ctx, g.constant(ArrayD::from_elem(IxDyn(&[1, 3, 6, 6]), 0.7))).unwrap().to_array();
        // zero padding of the 3×3 bottleneck perturbs the border only
        for c in 0..4 {
            let v = y[[0, c, 2, 2]];
            for i in 1..5 {
                for j in 1..5 {
                    assert!((y[[0, c, i, j]] - v).abs() < 1e-12);
                }
            }
        }
    }
}

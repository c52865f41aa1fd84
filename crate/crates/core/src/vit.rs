//! ViT trunk with per-block bottleneck adapters.
//!
//! Every block computes `y = blk(x + f(x))` where `f` is a two-layer
//! bottleneck MLP. The trunk (patch embedding, class token, blocks) is frozen;
//! only adapters train.

use floodfuse_autograd::{Conv2dSpec, Float, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, Ctx, LayerNorm, Linear};
use crate::params::{Component, Init, Registry};

/// `backbone` section of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Block indices whose outputs are tapped; defaults to the last block of
    /// each quarter of the trunk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap_layers: Option<Vec<usize>>,
    #[serde(default = "default_bottleneck")]
    pub adapter_bottleneck: usize,
    #[serde(default)]
    pub use_class_token: bool,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_in_channels() -> usize {
    6
}
fn default_bottleneck() -> usize {
    32
}
fn default_mlp_ratio() -> usize {
    4
}

/// `{⌈L/4⌉−1, ⌈L/2⌉−1, ⌈3L/4⌉−1, L−1}`.
pub fn default_taps(depth: usize) -> [usize; 4] {
    let q = |num: usize| (num * depth).div_ceil(4).saturating_sub(1);
    [q(1), q(2), q(3), depth.saturating_sub(1)]
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            embed_dim: 64,
            depth: 8,
            num_heads: 4,
            patch_size: 16,
            in_channels: 6,
            tap_layers: None,
            adapter_bottleneck: 32,
            use_class_token: false,
            mlp_ratio: 4,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            embed_dim: 1280,
            depth: 32,
            num_heads: 16,
            patch_size: 16,
            in_channels: 6,
            tap_layers: None,
            adapter_bottleneck: 32,
            use_class_token: true,
            mlp_ratio: 4,
        }
    }

    pub fn taps(&self) -> Vec<usize> {
        self.tap_layers
            .clone()
            .unwrap_or_else(|| default_taps(self.depth).to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("backbone: {m}")));
        if self.embed_dim == 0 || self.depth == 0 || self.num_heads == 0 || self.patch_size == 0 {
            return err("embed_dim, depth, num_heads and patch_size must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return err(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return err(format!("embed_dim {} must be a multiple of 4 for the 2-D position encoding", self.embed_dim));
        }
        if self.adapter_bottleneck == 0 || self.adapter_bottleneck >= self.embed_dim {
            return err(format!(
                "adapter_bottleneck {} must be in [1, embed_dim)",
                self.adapter_bottleneck
            ));
        }
        let taps = self.taps();
        if taps.len() != 4 {
            return err(format!("expected 4 tap layers, got {}", taps.len()));
        }
        if taps.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("tap layers {taps:?} must be strictly increasing"));
        }
        if taps[3] >= self.depth {
            return err(format!("tap layer {} beyond depth {}", taps[3], self.depth));
        }
        Ok(())
    }

    /// Number of parameters of one adapter: `2dr + r + d`.
    pub fn adapter_params(&self) -> usize {
        let (d, r) = (self.embed_dim, self.adapter_bottleneck);
        2 * d * r + r + d
    }

    /// Patch grid for an `h × w` input.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if !h.is_multiple_of(p) || !w.is_multiple_of(p) || h == 0 || w == 0 {
            return shape_err(format!("input {h}x{w} not divisible by patch size {p}"));
        }
        Ok((h / p, w / p))
    }
}

/// Tap token maps plus the patch grid `(gh, gw)`.
pub type TapOutput<'g, F> = (Vec<Var<'g, F>>, (usize, usize));

/// Names of one adapter's weights: `W1 [d, r]`, `b1 [r]`, `W2 [r, d]`, `b2 [d]`.
#[derive(Debug, Clone)]
pub struct AdapterWeights {
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
    pub dim: usize,
    pub bottleneck: usize,
}

impl AdapterWeights {
    pub fn new(reg: &mut Registry, prefix: &str, dim: usize, bottleneck: usize) -> Self {
        Self {
            w1: reg.param(format!("{prefix}.w1"), &[dim, bottleneck], Init::Normal { std: 0.02 }),
            b1: reg.param(format!("{prefix}.b1"), &[bottleneck], Init::Zeros),
            w2: reg.param(format!("{prefix}.w2"), &[bottleneck, dim], Init::Zeros),
            b2: reg.param(format!("{prefix}.b2"), &[dim], Init::Zeros),
            dim,
            bottleneck,
        }
    }

    pub fn forward<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        adapter_forward(x, ctx.param(&self.w1), ctx.param(&self.b1), ctx.param(&self.w2), ctx.param(&self.b2))
    }
}

/// `f(x) = relu(relu(x W1 + b1) W2 + b2)` over the last axis of `x`.
///
/// The outer ReLU passes gradient at exactly zero. At initialization
/// (`W2 = 0`, `b2 = 0`) every pre-activation is exactly zero, and a ReLU with
/// zero slope there would leave `W2` and `b2` with zero gradient forever.
pub fn adapter_forward<'g, F: Float>(
    x: Var<'g, F>,
    w1: Var<'g, F>,
    b1: Var<'g, F>,
    w2: Var<'g, F>,
    b2: Var<'g, F>,
) -> Result<Var<'g, F>> {
    let d = *x.shape().last().unwrap_or(&0);
    let (ws1, ws2) = (w1.shape(), w2.shape());
    if ws1.len() != 2 || ws2.len() != 2 || ws1[0] != d || ws2[1] != d || ws1[1] != ws2[0] {
        return shape_err(format!(
            "adapter weights {ws1:?} / {ws2:?} do not fit tokens of width {d}"
        ));
    }
    let h = x.linear(w1, Some(b1)).relu();
    Ok(h.linear(w2, Some(b2)).relu_right())
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new(reg: &mut Registry, prefix: &str, d: usize, heads: usize, mlp_ratio: usize) -> Self {
        let normal = Init::Normal { std: 0.02 };
        let lin = |reg: &mut Registry, name: &str, i, o| Linear::with_init(reg, &format!("{prefix}.{name}"), i, o, normal, Some(Init::Zeros));
        Self {
            norm1: LayerNorm::new(reg, &format!("{prefix}.norm1"), d),
            qkv: lin(reg, "qkv", d, 3 * d),
            proj: lin(reg, "proj", d, d),
            norm2: LayerNorm::new(reg, &format!("{prefix}.norm2"), d),
            fc1: lin(reg, "fc1", d, mlp_ratio * d),
            fc2: lin(reg, "fc2", mlp_ratio * d, d),
            heads,
        }
    }

    /// `x`: `[B, N, d]`.
    pub fn forward<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, d / self.heads);

        let qkv = self
            .qkv
            .forward(ctx, self.norm1.forward(ctx, x))
            .reshape(&[b, n, 3, h, dh])
            .permute(&[2, 0, 3, 1, 4]);
        let part = |i| qkv.narrow(0, i, 1).reshape(&[b * h, n, dh]);
        let (q, k, v) = (part(0), part(1), part(2));
        let attn = q
            .bmm(k.transpose_last())
            .scale(F::of(1.0 / (dh as f64).sqrt()))
            .softmax_last();
        let mixed = attn
            .bmm(v)
            .reshape(&[b, h, n, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, n, d]);
        let x = x.add(self.proj.forward(ctx, mixed));
        let m = self.fc2.forward(ctx, self.fc1.forward(ctx, self.norm2.forward(ctx, x)).gelu());
        x.add(m)
    }
}

/// Fixed 2-D sine/cosine position table `[gh * gw, d]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sincos_position_table(d: usize, gh: usize, gw: usize) -> Array2<f64> {
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut table = Array2::zeros((gh * gw, d));
    for i in 0..gh {
        for j in 0..gw {
            let row = i * gw + j;
            for (k, &om) in omega.iter().enumerate() {
                table[[row, k]] = (i as f64 * om).sin();
                table[[row, quarter + k]] = (i as f64 * om).cos();
                table[[row, 2 * quarter + k]] = (j as f64 * om).sin();
                table[[row, 3 * quarter + k]] = (j as f64 * om).cos();
            }
        }
    }
    table
}

#[derive(Debug, Clone)]
pub struct AdaptedVit {
    pub cfg: BackboneConfig,
    patch_embed: Conv2d,
    cls_token: Option<String>,
    blocks: Vec<Block>,
    adapters: Vec<AdapterWeights>,
}

impl AdaptedVit {
    /// Registers trunk parameters (frozen) and, when `with_adapters`, one
    /// adapter per block (trainable).
    pub fn new(reg: &mut Registry, cfg: &BackboneConfig, with_adapters: bool) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let prev = reg.component();
        reg.set_component(Component::Trunk);
        let p = cfg.patch_size;
        let patch_embed = Conv2d::with_init(
            reg,
            "trunk.patch_embed",
            (cfg.in_channels, d, p),
            Conv2dSpec::new(p, 0),
            Init::fan_in(cfg.in_channels * p * p),
            Some(Init::Zeros),
        );
        let cls_token = cfg
            .use_class_token
            .then(|| reg.param("trunk.cls_token", &[1, 1, d], Init::Normal { std: 0.02 }));
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(reg, &format!("trunk.blocks.{i}"), d, cfg.num_heads, cfg.mlp_ratio))
            .collect();
        let mut adapters = Vec::new();
        if with_adapters {
            reg.set_component(Component::Adapter);
            for i in 0..cfg.depth {
                adapters.push(AdapterWeights::new(reg, &format!("adapter.{i}"), d, cfg.adapter_bottleneck));
            }
        }
        reg.set_component(prev);
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            cls_token,
            blocks,
            adapters,
        })
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters.is_empty()
    }

    pub fn adapters(&self) -> &[AdapterWeights] {
        &self.adapters
    }

    /// Token maps `[B, N, d]` at the four tap depths (class token removed),
    /// plus the patch grid.
    pub fn forward_features<'g, F: Float>(
        &self,
        ctx: &Ctx<'g, '_, F>,
        x_ap: Var<'g, F>,
    ) -> Result<TapOutput<'g, F>> {
        self.forward_features_with(ctx, x_ap, true)
    }

    /// As [`Self::forward_features`]; `use_adapters = false` runs the bare
    /// frozen trunk.
    pub fn forward_features_with<'g, F: Float>(
        &self,
        ctx: &Ctx<'g, '_, F>,
        x_ap: Var<'g, F>,
        use_adapters: bool,
    ) -> Result<TapOutput<'g, F>> {
        let s = x_ap.shape();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return shape_err(format!(
                "transformer input must be [B, {}, H, W], got {s:?}",
                self.cfg.in_channels
            ));
        }
        let (gh, gw) = self.cfg.grid(s[2], s[3])?;
        let (b, d, n) = (s[0], self.cfg.embed_dim, gh * gw);
        let g = ctx.graph;

        let mut x = self
            .patch_embed
            .forward(ctx, x_ap)
            .reshape(&[b, d, n])
            .permute(&[0, 2, 1]);
        let pos = sincos_position_table(d, gh, gw).mapv(F::of).into_dyn();
        x = x.add(g.constant(pos.into_shape_with_order(IxDyn(&[1, n, d])).unwrap()));
        let offset = if let Some(cls) = &self.cls_token {
            let tok = ctx.param(cls);
            let tok = if b == 1 {
                tok
            } else {
                tok.add(g.constant(ArrayD::zeros(IxDyn(&[b, 1, d]))))
            };
            x = g.concat(&[tok, x], 1);
            1
        } else {
            0
        };

        let taps = self.cfg.taps();
        let mut out = Vec::with_capacity(4);
        for (i, blk) in self.blocks.iter().enumerate() {
            let input = match self.adapters.get(i) {
                Some(a) if use_adapters => x.add(a.forward(ctx, x)?),
                _ => x,
            };
            x = blk.forward(ctx, input);
            if taps.contains(&i) {
                out.push(x.narrow(1, offset, n));
            }
        }
        Ok((out, (gh, gw)))
    }
}

/// Row-major reshape of tokens `[B, N, d]` onto a `(h, w)` grid:
/// token `i * w + j` lands at `(i, j)`. Returns `[B, d, h, w]`.
pub fn token_to_image<F: Float>(tokens: Var<'_, F>, (h, w): (usize, usize)) -> Result<Var<'_, F>> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] != h * w {
        return shape_err(format!("cannot place tokens {s:?} on a {h}x{w} grid"));
    }
    Ok(tokens.reshape(&[s[0], h, w, s[2]]).permute(&[0, 3, 1, 2]))
}

/// Inverse of [`token_to_image`].
pub fn image_to_tokens<F: Float>(image: Var<'_, F>) -> Var<'_, F> {
    let s = image.shape();
    image.permute(&[0, 2, 3, 1]).reshape(&[s[0], s[2] * s[3], s[1]])
}

//! Four-stage residual CNN with channel-then-spatial attention after each
//! stage.

use floodfuse_autograd::{Conv2dSpec, Float, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::neck::FeaturePyramid;
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Linear};
use crate::params::{Component, Init, Registry};

/// `cnn` section of the experiment config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub widths: Vec<usize>,
    #[serde(default = "default_reduction")]
    pub cam_reduction: usize,
    #[serde(default = "default_kernel")]
    pub cam_kernel: usize,
}

fn default_reduction() -> usize {
    16
}
fn default_kernel() -> usize {
    7
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            widths: vec![128, 256, 512, 1024],
            cam_reduction: 16,
            cam_kernel: 7,
        }
    }
}

impl CnnConfig {
    pub fn toy() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("cnn: {m}")));
        if self.widths.len() != 4 {
            return err(format!("expected 4 stage widths, got {}", self.widths.len()));
        }
        if self.cam_reduction == 0 {
            return err("cam_reduction must be positive".into());
        }
        if let Some(w) = self.widths.iter().find(|&&w| w < self.cam_reduction) {
            return err(format!("width {w} smaller than cam_reduction {}", self.cam_reduction));
        }
        if self.cam_kernel.is_multiple_of(2) {
            return err(format!("cam_kernel {} must be odd", self.cam_kernel));
        }
        Ok(())
    }
}

/// `y = relu(s(x) + F(x))` with `F = conv3 → BN → ReLU → conv3 → BN` and `s`
/// the identity or a strided 1×1 projection. Without `residual` the
/// shortcut is dropped: `y = relu(F(x))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<Conv2d>,
    pub residual: bool,
}

impl ResidualBlock {
    pub fn new(reg: &mut Registry, prefix: &str, cin: usize, cout: usize, stride: usize, residual: bool) -> Self {
        let shortcut = (residual && (cin != cout || stride != 1)).then(|| {
            Conv2d::with_init(
                reg,
                &format!("{prefix}.shortcut"),
                (cin, cout, 1),
                Conv2dSpec::new(stride, 0),
                Init::fan_in(cin),
                Some(Init::Zeros),
            )
        });
        Self {
            conv1: Conv2d::new(reg, &format!("{prefix}.conv1"), cin, cout, 3, stride, false),
            bn1: BatchNorm2d::new(reg, &format!("{prefix}.bn1"), cout),
            conv2: Conv2d::new(reg, &format!("{prefix}.conv2"), cout, cout, 3, 1, false),
            bn2: BatchNorm2d::new(reg, &format!("{prefix}.bn2"), cout),
            shortcut,
            residual,
        }
    }

    pub fn forward<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let h = self.bn1.forward(ctx, self.conv1.forward(ctx, x)).relu();
        let f = self.bn2.forward(ctx, self.conv2.forward(ctx, h));
        if !self.residual {
            return Ok(f.relu());
        }
        let s = match &self.shortcut {
            Some(conv) => conv.forward(ctx, x),
            None => x,
        };
        if s.shape() != f.shape() {
            return shape_err(format!("residual branch {:?} vs shortcut {:?}", f.shape(), s.shape()));
        }
        Ok(s.add(f).relu())
    }
}

/// Channel attention (shared MLP over average- and max-pooled descriptors)
/// followed by spatial attention (k×k conv over channel mean and max).
#[derive(Debug, Clone)]
pub struct Cam {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
}

/// Output of [`Cam::forward_with_maps`].
pub struct CamOutput<'g, F: Float> {
    pub output: Var<'g, F>,
    /// Channel weights `[B, C, 1, 1]`.
    pub channel: Var<'g, F>,
    /// Spatial mask `[B, 1, H, W]`.
    pub spatial: Var<'g, F>,
}

impl Cam {
    pub fn new(reg: &mut Registry, prefix: &str, channels: usize, reduction: usize, kernel: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            fc1: Linear::new(reg, &format!("{prefix}.fc1"), channels, hidden),
            fc2: Linear::new(reg, &format!("{prefix}.fc2"), hidden, channels),
            spatial: Conv2d::new(reg, &format!("{prefix}.spatial"), 2, 1, kernel, 1, true),
        }
    }

    pub fn forward<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        self.forward_with_maps(ctx, x).output
    }

    pub fn forward_with_maps<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> CamOutput<'g, F> {
        let s = x.shape();
        let (b, c) = (s[0], s[1]);
        let mlp = |v: Var<'g, F>| self.fc2.forward(ctx, self.fc1.forward(ctx, v.reshape(&[b, c])).relu());
        let avg = x.mean_axes_keep(&[2, 3]);
        let max = x.max_axis_keep(2).max_axis_keep(3);
        let channel = mlp(avg).add(mlp(max)).sigmoid().reshape(&[b, c, 1, 1]);
        let xc = x.mul(channel);

        let pooled = ctx.graph.concat(&[xc.mean_axes_keep(&[1]), xc.max_axis_keep(1)], 1);
        let spatial = self.spatial.forward(ctx, pooled).sigmoid();
        CamOutput {
            output: xc.mul(spatial),
            channel,
            spatial,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CnnBranch {
    pub cfg: CnnConfig,
    pub blocks: Vec<ResidualBlock>,
    pub cams: Vec<Cam>,
}

impl CnnBranch {
    pub fn new(reg: &mut Registry, in_channels: usize, cfg: &CnnConfig, residual: bool, cam: bool) -> Result<Self> {
        cfg.validate()?;
        let prev = reg.component();
        reg.set_component(Component::Cnn);
        let mut blocks = Vec::new();
        let mut cams = Vec::new();
        let mut cin = in_channels;
        for (i, &w) in cfg.widths.iter().enumerate() {
            blocks.push(ResidualBlock::new(reg, &format!("cnn.stage{}.block", i + 1), cin, w, 2, residual));
            if cam {
                cams.push(Cam::new(reg, &format!("cnn.stage{}.cam", i + 1), w, cfg.cam_reduction, cfg.cam_kernel));
            }
            cin = w;
        }
        reg.set_component(prev);
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            cams,
        })
    }

    /// `x_cnn`: `[B, C, H, W]` with `H`, `W` divisible by 16.
    pub fn forward<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Result<FeaturePyramid<'g, F>> {
        let s = x.shape();
        if s.len() != 4 || !s[2].is_multiple_of(16) || !s[3].is_multiple_of(16) || s[2] == 0 || s[3] == 0 {
            return shape_err(format!("CNN input must be [B, C, H, W] with H, W divisible by 16, got {s:?}"));
        }
        let mut levels = Vec::with_capacity(4);
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(ctx, h)?;
            if let Some(cam) = self.cams.get(i) {
                h = cam.forward(ctx, h);
            }
            levels.push(h);
        }
        FeaturePyramid::new(levels)
    }
}

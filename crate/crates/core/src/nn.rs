//! Forward context and the small layer library shared by every module.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use floodfuse_autograd::{Conv2dSpec, Float, Graph, Var};
use ndarray::{Array1, ArrayD, Ix1};

use crate::params::{Init, ParameterStore, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// State of one forward pass: the tape, the weights it reads and the batch
/// norm statistics it produces.
pub struct Ctx<'g, 's, F: Float> {
    pub graph: &'g Graph<F>,
    store: &'s ParameterStore<F>,
    mode: Mode,
    track_grad: bool,
    leaves: RefCell<BTreeMap<String, Var<'g, F>>>,
    buffer_updates: RefCell<BTreeMap<String, ArrayD<F>>>,
}

impl<'g, 's, F: Float> Ctx<'g, 's, F> {
    /// Trainable parameters become gradient-tracked leaves.
    pub fn new(graph: &'g Graph<F>, store: &'s ParameterStore<F>, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            track_grad: true,
            leaves: RefCell::new(BTreeMap::new()),
            buffer_updates: RefCell::new(BTreeMap::new()),
        }
    }

    /// Forward only: no parameter receives a gradient.
    pub fn inference(graph: &'g Graph<F>, store: &'s ParameterStore<F>) -> Self {
        let mut ctx = Self::new(graph, store, Mode::Eval);
        ctx.track_grad = false;
        ctx
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParameterStore<F> {
        self.store
    }

    /// Leaf for a named parameter; one leaf per name per pass.
    pub fn param(&self, name: &str) -> Var<'g, F> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return *v;
        }
        let entry = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"));
        let v = self
            .graph
            .leaf(entry.value.clone(), self.track_grad && entry.trainable);
        self.leaves.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn buffer(&self, name: &str) -> &'s Arc<ArrayD<F>> {
        self.store.buffer(name)
    }

    /// Every parameter leaf created during the pass.
    pub fn leaves(&self) -> Vec<(String, Var<'g, F>)> {
        self.leaves
            .borrow()
            .iter()
            .map(|(n, v)| (n.clone(), *v))
            .collect()
    }

    pub fn record_buffer(&self, name: &str, value: ArrayD<F>) {
        self.buffer_updates.borrow_mut().insert(name.to_string(), value);
    }

    /// New running statistics produced by a training pass.
    pub fn take_buffer_updates(&self) -> BTreeMap<String, ArrayD<F>> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }
}

/// `x W + b` over the last axis; `W` is `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(reg: &mut Registry, prefix: &str, in_features: usize, out_features: usize) -> Self {
        Self::with_init(reg, prefix, in_features, out_features, Init::fan_in(in_features), Some(Init::Zeros))
    }

    pub fn with_init(
        reg: &mut Registry,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        weight: Init,
        bias: Option<Init>,
    ) -> Self {
        Self {
            weight: reg.param(format!("{prefix}.weight"), &[in_features, out_features], weight),
            bias: bias.map(|b| reg.param(format!("{prefix}.bias"), &[out_features], b)),
            in_features,
            out_features,
        }
    }

    pub fn forward<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        x.linear(ctx.param(&self.weight), self.bias.as_ref().map(|b| ctx.param(b)))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// Square kernel with "same" padding at stride 1.
    pub fn new(reg: &mut Registry, prefix: &str, cin: usize, cout: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        let fan_in = cin * kernel * kernel;
        Self::with_init(
            reg,
            prefix,
            (cin, cout, kernel),
            Conv2dSpec::new(stride, kernel / 2),
            Init::fan_in(fan_in),
            bias.then_some(Init::Zeros),
        )
    }

    pub fn with_init(
        reg: &mut Registry,
        prefix: &str,
        (cin, cout, kernel): (usize, usize, usize),
        spec: Conv2dSpec,
        weight: Init,
        bias: Option<Init>,
    ) -> Self {
        Self {
            weight: reg.param(format!("{prefix}.weight"), &[cout, cin, kernel, kernel], weight),
            bias: bias.map(|b| reg.param(format!("{prefix}.bias"), &[cout], b)),
            spec,
            in_channels: cin,
            out_channels: cout,
            kernel,
        }
    }

    pub fn forward<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        x.conv2d(ctx.param(&self.weight), self.bias.as_ref().map(|b| ctx.param(b)), self.spec)
    }
}

/// Transposed convolution; weight is `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: String,
    pub bias: Option<String>,
    pub spec: Conv2dSpec,
}

impl ConvTranspose2d {
    pub fn new(reg: &mut Registry, prefix: &str, cin: usize, cout: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        Self {
            weight: reg.param(
                format!("{prefix}.weight"),
                &[cin, cout, kernel, kernel],
                Init::fan_in(cout * kernel * kernel),
            ),
            bias: bias.then(|| reg.param(format!("{prefix}.bias"), &[cout], Init::Zeros)),
            spec: Conv2dSpec::new(stride, 0),
        }
    }

    pub fn forward<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        x.conv_transpose2d(ctx.param(&self.weight), self.bias.as_ref().map(|b| ctx.param(b)), self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(reg: &mut Registry, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: reg.param(format!("{prefix}.gamma"), &[channels], Init::Ones),
            beta: reg.param(format!("{prefix}.beta"), &[channels], Init::Zeros),
            running_mean: reg.buffer(format!("{prefix}.running_mean"), &[channels], Init::Zeros),
            running_var: reg.buffer(format!("{prefix}.running_var"), &[channels], Init::Ones),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        let gamma = ctx.param(&self.gamma);
        let beta = ctx.param(&self.beta);
        let eps = F::of(self.eps);
        match ctx.mode() {
            Mode::Train => {
                let out = x.batch_norm2d_train(gamma, beta, eps);
                let s = x.shape();
                let n = s[0] * s[2] * s[3];
                let unbias = if n > 1 { F::of(n as f64 / (n - 1) as f64) } else { F::one() };
                let m = F::of(self.momentum);
                let keep = F::one() - m;
                let rm = to1(ctx.buffer(&self.running_mean));
                let rv = to1(ctx.buffer(&self.running_var));
                let new_mean = rm * keep + &out.mean * m;
                let new_var = rv * keep + &(out.var * unbias) * m;
                ctx.record_buffer(&self.running_mean, new_mean.into_dyn());
                ctx.record_buffer(&self.running_var, new_var.into_dyn());
                out.output
            }
            Mode::Eval => {
                let rm = to1(ctx.buffer(&self.running_mean));
                let rv = to1(ctx.buffer(&self.running_var));
                x.batch_norm2d_eval(gamma, beta, &rm.into_dyn(), &rv.into_dyn(), eps)
            }
        }
    }
}

fn to1<F: Float>(a: &ArrayD<F>) -> Array1<F> {
    a.clone().into_dimensionality::<Ix1>().expect("1-D buffer")
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(reg: &mut Registry, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: reg.param(format!("{prefix}.gamma"), &[dim], Init::Ones),
            beta: reg.param(format!("{prefix}.beta"), &[dim], Init::Zeros),
        }
    }

    pub fn forward<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        x.layer_norm(ctx.param(&self.gamma), ctx.param(&self.beta), F::of(1e-6))
    }
}

/// Conv (no bias) → BN → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(reg: &mut Registry, prefix: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            conv: Conv2d::new(reg, &format!("{prefix}.conv"), cin, cout, kernel, 1, false),
            bn: BatchNorm2d::new(reg, &format!("{prefix}.bn"), cout),
        }
    }

    pub fn forward<'g, F: Float>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        self.bn.forward(ctx, self.conv.forward(ctx, x)).relu()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Component;
    use ndarray::IxDyn;

    #[test]
    fn batch_norm_updates_running_stats_in_train_mode_only() {
        let mut reg = Registry::new();
        reg.set_component(Component::Cnn);
        let bn = BatchNorm2d::new(&mut reg, "bn", 2);
        let store: ParameterStore<f64> = reg.init_store(0);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 2, 1, 2]), |i| (i[0] * 2 + i[3]) as f64 + i[1] as f64 * 10.0);

        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Train);
        bn.forward(&ctx, g.constant(x.clone()));
        let up = ctx.take_buffer_updates();
        // channel 0 values 0,1,2,3: mean 1.5, unbiased var 5/3
        assert!((up["bn.running_mean"][0] - 0.15).abs() < 1e-12);
        assert!((up["bn.running_var"][0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);

        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let y = bn.forward(&ctx, g.constant(x.clone())).to_array();
        assert!(ctx.take_buffer_updates().is_empty());
        // running stats at init are (0, 1): eval output is x / sqrt(1 + eps)
        assert!((y[[0, 1, 0, 1]] - x[[0, 1, 0, 1]] / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut reg = Registry::new();
        reg.set_component(Component::Trunk);
        let frozen = Linear::new(&mut reg, "a", 3, 3);
        reg.set_component(Component::Adapter);
        let live = Linear::new(&mut reg, "b", 3, 1);
        let store: ParameterStore<f64> = reg.init_store(1);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Train);
        let x = g.constant(ArrayD::from_elem(IxDyn(&[2, 3]), 0.5));
        let y = live.forward(&ctx, frozen.forward(&ctx, x)).sum_all();
        let grads = g.backward(y);
        for (name, v) in ctx.leaves() {
            assert_eq!(grads.get(v).is_some(), name.starts_with("b."), "{name}");
        }
    }
}

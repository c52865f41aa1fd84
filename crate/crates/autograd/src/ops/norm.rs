use ndarray::{Array1, ArrayD, Axis, Ix1, Zip};

use crate::{Float, Var};

/// Output of a training-mode batch normalization: the normalized node plus
/// the batch statistics (biased variance) for updating running estimates.
pub struct BatchNormOutput<'g, F: Float> {
    pub output: Var<'g, F>,
    pub mean: Array1<F>,
    pub var: Array1<F>,
}

fn per_channel<F: Float>(x: &ArrayD<F>, f: impl Fn(usize, F) -> F) -> ArrayD<F> {
    let mut out = x.clone();
    for mut sample in out.axis_iter_mut(Axis(0)) {
        for (c, mut plane) in sample.axis_iter_mut(Axis(0)).enumerate() {
            plane.mapv_inplace(|v| f(c, v));
        }
    }
    out
}

/// Sum over every axis except 1 (the channel axis of NCHW).
fn channel_sums<F: Float>(x: &ArrayD<F>) -> Array1<F> {
    let c = x.shape()[1];
    let mut out = Array1::<F>::zeros(c);
    for sample in x.axis_iter(Axis(0)) {
        for (o, plane) in out.iter_mut().zip(sample.axis_iter(Axis(0))) {
            *o += plane.sum();
        }
    }
    out
}

impl<'g, F: Float> Var<'g, F> {
    /// Batch normalization over `[N, C, H, W]` using the statistics of this
    /// batch.
    pub fn batch_norm2d_train(self, gamma: Var<'g, F>, beta: Var<'g, F>, eps: F) -> BatchNormOutput<'g, F> {
        let x = self.value();
        assert_eq!(x.ndim(), 4, "batch_norm2d expects NCHW");
        let c = x.shape()[1];
        let m = F::of((x.len() / c) as f64);
        let mean = channel_sums(&x).mapv(|s| s / m);
        let centered = per_channel(&x, |ch, v| v - mean[ch]);
        let var = channel_sums(&centered.mapv(|v| v * v)).mapv(|s| s / m);
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let xhat = per_channel(&centered, |ch, v| v * inv_std[ch]);
        let gv = gamma.value();
        let bv = beta.value();
        let y = per_channel(&xhat, |ch, v| gv[ch] * v + bv[ch]);
        let output = self.graph.push(
            y,
            vec![self.id, gamma.id, beta.id],
            Box::new(move |g, need| {
                let g = g.to_owned();
                let dbeta = channel_sums(&g);
                let dgamma = channel_sums(&(&g * &xhat));
                let dx = need[0].then(|| {
                    let mut dx = ArrayD::zeros(xhat.raw_dim());
                    for ((mut dxs, gs), xs) in dx
                        .axis_iter_mut(Axis(0))
                        .zip(g.axis_iter(Axis(0)))
                        .zip(xhat.axis_iter(Axis(0)))
                    {
                        for (ch, ((mut d, gp), xp)) in dxs
                            .axis_iter_mut(Axis(0))
                            .zip(gs.axis_iter(Axis(0)))
                            .zip(xs.axis_iter(Axis(0)))
                            .enumerate()
                        {
                            let k = gv[ch] * inv_std[ch] / m;
                            Zip::from(&mut d).and(&gp).and(&xp).for_each(|d, &gi, &xi| {
                                *d = k * (m * gi - dbeta[ch] - xi * dgamma[ch]);
                            });
                        }
                    }
                    dx
                });
                vec![dx, need[1].then(|| dgamma.into_dyn()), need[2].then(|| dbeta.into_dyn())]
            }),
        );
        BatchNormOutput { output, mean, var }
    }

    /// Batch normalization with fixed statistics (inference mode).
    pub fn batch_norm2d_eval(
        self,
        gamma: Var<'g, F>,
        beta: Var<'g, F>,
        running_mean: &ArrayD<F>,
        running_var: &ArrayD<F>,
        eps: F,
    ) -> Var<'g, F> {
        let x = self.value();
        assert_eq!(x.ndim(), 4, "batch_norm2d expects NCHW");
        let rm: Vec<F> = running_mean.iter().copied().collect();
        let inv_std: Vec<F> = running_var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let xhat = per_channel(&x, |ch, v| (v - rm[ch]) * inv_std[ch]);
        let gv = gamma.value();
        let bv = beta.value();
        let y = per_channel(&xhat, |ch, v| gv[ch] * v + bv[ch]);
        self.graph.push(
            y,
            vec![self.id, gamma.id, beta.id],
            Box::new(move |g, need| {
                let g = g.to_owned();
                vec![
                    need[0].then(|| per_channel(&g, |ch, v| v * gv[ch] * inv_std[ch])),
                    need[1].then(|| channel_sums(&(&g * &xhat)).into_dyn()),
                    need[2].then(|| channel_sums(&g).into_dyn()),
                ]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'g, F>, beta: Var<'g, F>, eps: F) -> Var<'g, F> {
        let x = self.value().as_standard_layout().into_owned();
        let d = *x.shape().last().unwrap();
        let last = Axis(x.ndim() - 1);
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!(gv.shape(), [d], "layer_norm gamma shape");
        let gv = std::sync::Arc::new(gv.view().into_dimensionality::<Ix1>().unwrap().to_owned());
        let bv = bv.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let df = F::of(d as f64);
        let mut xhat = x.clone();
        let mut inv_stds = Vec::with_capacity(x.len() / d);
        for mut row in xhat.lanes_mut(last) {
            let mean = row.sum() / df;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / df;
            let inv = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_stds.push(inv);
        }
        let mut y = xhat.clone();
        for mut row in y.lanes_mut(last) {
            Zip::from(&mut row)
                .and(&*gv)
                .and(&bv)
                .for_each(|v, &gm, &bt| *v = *v * gm + bt);
        }
        self.graph.push(
            y,
            vec![self.id, gamma.id, beta.id],
            Box::new(move |g, need| {
                let g = g.as_standard_layout();
                let mut dgamma = Array1::<F>::zeros(d);
                let mut dbeta = Array1::<F>::zeros(d);
                let mut dx = ArrayD::<F>::zeros(xhat.raw_dim());
                for (((grow, xrow), mut dxrow), &inv) in g
                    .lanes(last)
                    .into_iter()
                    .zip(xhat.lanes(last))
                    .zip(dx.lanes_mut(last))
                    .zip(&inv_stds)
                {
                    Zip::from(&mut dgamma).and(&grow).and(&xrow).for_each(|dg, &gi, &xi| *dg += gi * xi);
                    Zip::from(&mut dbeta).and(&grow).for_each(|db, &gi| *db += gi);
                    if need[0] {
                        let dxhat: Vec<F> = grow.iter().zip(gv.iter()).map(|(&gi, &gm)| gi * gm).collect();
                        let s1: F = dxhat.iter().copied().sum();
                        let s2: F = dxhat.iter().zip(xrow.iter()).map(|(&a, &b)| a * b).sum();
                        for ((d, &dh), &xi) in dxrow.iter_mut().zip(&dxhat).zip(xrow.iter()) {
                            *d = inv / df * (df * dh - s1 - xi * s2);
                        }
                    }
                }
                vec![need[0].then_some(dx), need[1].then(|| dgamma.into_dyn()), need[2].then(|| dbeta.into_dyn())]
            }),
        )
    }
}

use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, ArrayViewD, ArrayView3, Axis, Ix2, Ix3, IxDyn, Zip};

use crate::{Float, Var};

fn as_matrix<'a, F: Float>(x: ArrayViewD<'a, F>, cols: usize) -> ArrayView2<'a, F> {
    let rows = x.len() / cols;
    x.into_shape_with_order((rows, cols))
        .expect("contiguous input for matrix view")
}

/// Matrix product into a row-major result (`dot` may pick column-major
/// when an operand is transposed).
pub(crate) fn mm<F: Float>(a: &ArrayView2<F>, b: &ArrayView2<F>) -> Array2<F> {
    let mut out = Array2::<F>::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), a, b, F::zero(), &mut out);
    out
}

impl<'g, F: Float> Var<'g, F> {
    /// Affine map over the last axis: `x · w + b` with `w` shaped `[in, out]`.
    pub fn linear(self, w: Var<'g, F>, b: Option<Var<'g, F>>) -> Var<'g, F> {
        let x = self.value();
        let wv = w.value();
        let x = if x.is_standard_layout() {
            x
        } else {
            std::sync::Arc::new(x.as_standard_layout().into_owned())
        };
        let in_dim = *x.shape().last().expect("linear on a scalar");
        assert_eq!(wv.ndim(), 2, "linear weight must be 2-D");
        assert_eq!(wv.shape()[0], in_dim, "linear: input dim {} vs weight {:?}", in_dim, wv.shape());
        let out_dim = wv.shape()[1];
        let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
        let xm = as_matrix(x.view(), in_dim);
        let mut y = mm(&xm, &w2);
        let bias = b.map(|b| b.value());
        if let Some(bv) = &bias {
            assert_eq!(bv.shape(), [out_dim], "linear bias shape");
            y += &bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        }
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = out_dim;
        let y = y.into_dyn().into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let mut parents = vec![self.id, w.id];
        if let Some(b) = b {
            parents.push(b.id);
        }
        let in_shape = x.shape().to_vec();
        self.graph.push(
            y,
            parents,
            Box::new(move |g, need| {
                let g = g.as_standard_layout();
                let gm = as_matrix(g.view(), out_dim);
                let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
                let gx = need[0].then(|| {
                    mm(&gm, &w2.t())
                        .into_dyn()
                        .into_shape_with_order(IxDyn(&in_shape))
                        .unwrap()
                });
                let gw = need[1].then(|| mm(&as_matrix(x.view(), in_dim).t(), &gm).into_dyn());
                let mut out = vec![gx, gw];
                if need.len() == 3 {
                    out.push(need[2].then(|| gm.sum_axis(Axis(0)).into_dyn()));
                }
                out
            }),
        )
    }

    /// Batched matrix product `[B, m, k] · [B, k, n] -> [B, m, n]`.
    pub fn bmm(self, other: Var<'g, F>) -> Var<'g, F> {
        let a = std::sync::Arc::new(self.value().as_standard_layout().into_owned());
        let b = std::sync::Arc::new(other.value().as_standard_layout().into_owned());
        assert!(a.ndim() == 3 && b.ndim() == 3, "bmm expects 3-D operands");
        let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert_eq!(b.shape()[0], batch, "bmm batch mismatch");
        assert_eq!(b.shape()[1], k, "bmm inner dim mismatch");
        let n = b.shape()[2];
        let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
        let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
        let mut out = ndarray::Array3::<F>::zeros((batch, m, n));
        Zip::from(out.outer_iter_mut())
            .and(a3.outer_iter())
            .and(b3.outer_iter())
            .for_each(|mut o, ai, bi| general_mat_mul(F::one(), &ai, &bi, F::zero(), &mut o));
        self.graph.push(
            out.into_dyn(),
            vec![self.id, other.id],
            Box::new(move |g, need| {
                let g3: ArrayView3<F> = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
                let ga = need[0].then(|| {
                    let mut ga = ndarray::Array3::<F>::zeros((batch, m, k));
                    Zip::from(ga.outer_iter_mut())
                        .and(g3.outer_iter())
                        .and(b3.outer_iter())
                        .for_each(|mut o, gi, bi| {
                            general_mat_mul(F::one(), &gi, &bi.t(), F::zero(), &mut o)
                        });
                    ga.into_dyn()
                });
                let gb = need[1].then(|| {
                    let mut gb = ndarray::Array3::<F>::zeros((batch, k, n));
                    Zip::from(gb.outer_iter_mut())
                        .and(a3.outer_iter())
                        .and(g3.outer_iter())
                        .for_each(|mut o, ai, gi| {
                            general_mat_mul(F::one(), &ai.t(), &gi, F::zero(), &mut o)
                        });
                    gb.into_dyn()
                });
                vec![ga, gb]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Var<'g, F> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let mut y = x.as_standard_layout().into_owned();
        for mut row in y.lanes_mut(Axis(x.ndim() - 1)) {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut sum = F::zero();
            row.mapv_inplace(|v| {
                let e = (v - max).exp();
                sum += e;
                e
            });
            row.mapv_inplace(|v| v / sum);
        }
        let y_saved = std::sync::Arc::new(y.clone());
        self.graph.push(
            y,
            vec![self.id],
            Box::new(move |g, _| {
                let g = g.as_standard_layout();
                let mut out = Array2::<F>::zeros((y_saved.len() / d, d));
                let ys = as_matrix(y_saved.view(), d);
                let gs = g.view().into_shape_with_order((y_saved.len() / d, d)).unwrap();
                Zip::from(out.rows_mut())
                    .and(ys.rows())
                    .and(gs.rows())
                    .for_each(|mut o, yr, gr| {
                        let dot: F = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                        Zip::from(&mut o)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|o, &yv, &gv| *o = yv * (gv - dot));
                    });
                vec![Some(out.into_dyn().into_shape_with_order(y_saved.raw_dim()).unwrap())]
            }),
        )
    }
}

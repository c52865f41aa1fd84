use ndarray::{ArrayD, IxDyn};

use crate::{Float, Var};

/// Source taps of one output coordinate for half-pixel-centre bilinear
/// sampling (`align_corners = false`).
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            Tap { i0, i1, w0: 1.0 - w1, w1 }
        })
        .collect()
}

/// Bin `[start, end)` of adaptive average pooling for output index `o`.
pub fn adaptive_bin(input: usize, output: usize, o: usize) -> (usize, usize) {
    let start = (o * input) / output;
    let end = ((o + 1) * input).div_ceil(output);
    (start, end)
}

fn planes<F: Float>(x: &ArrayD<F>) -> (usize, usize, usize) {
    assert_eq!(x.ndim(), 4, "expected NCHW, got {:?}", x.shape());
    let s = x.shape();
    (s[0] * s[1], s[2], s[3])
}

impl<'g, F: Float> Var<'g, F> {
    /// Bilinear resize of `[N, C, H, W]` to `[N, C, out_h, out_w]` with
    /// half-pixel centres; identity when the size is unchanged.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'g, F> {
        let x = self.value();
        let (np, h, w) = planes(&x);
        let shape = x.shape().to_vec();
        if h == out_h && w == out_w {
            return self.graph.push(
                (*x).clone(),
                vec![self.id],
                Box::new(|g, _| vec![Some(g.clone())]),
            );
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let mut out = vec![F::zero(); np * out_h * out_w];
        for p in 0..np {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let v = F::of(a.w0 * b.w0) * src[a.i0 * w + b.i0]
                        + F::of(a.w0 * b.w1) * src[a.i0 * w + b.i1]
                        + F::of(a.w1 * b.w0) * src[a.i1 * w + b.i0]
                        + F::of(a.w1 * b.w1) * src[a.i1 * w + b.i1];
                    dst[oy * out_w + ox] = v;
                }
            }
        }
        let out_shape = [shape[0], shape[1], out_h, out_w];
        self.graph.push(
            ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap(),
            vec![self.id],
            Box::new(move |g, _| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let mut gx = vec![F::zero(); np * h * w];
                for p in 0..np {
                    let src = &gs[p * out_h * out_w..(p + 1) * out_h * out_w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (oy, a) in ty.iter().enumerate() {
                        for (ox, b) in tx.iter().enumerate() {
                            let gv = src[oy * out_w + ox];
                            dst[a.i0 * w + b.i0] += F::of(a.w0 * b.w0) * gv;
                            dst[a.i0 * w + b.i1] += F::of(a.w0 * b.w1) * gv;
                            dst[a.i1 * w + b.i0] += F::of(a.w1 * b.w0) * gv;
                            dst[a.i1 * w + b.i1] += F::of(a.w1 * b.w1) * gv;
                        }
                    }
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&shape), gx).unwrap())]
            }),
        )
    }

    /// Adaptive average pooling of `[N, C, H, W]` to `[N, C, out_h, out_w]`
    /// (bins `[floor(o*H/out), ceil((o+1)*H/out))`).
    pub fn adaptive_avg_pool2d(self, out_h: usize, out_w: usize) -> Var<'g, F> {
        let x = self.value();
        let (np, h, w) = planes(&x);
        assert!(out_h <= h && out_w <= w, "adaptive pool to {out_h}x{out_w} exceeds input {h}x{w}");
        let shape = x.shape().to_vec();
        let bins_y: Vec<_> = (0..out_h).map(|o| adaptive_bin(h, out_h, o)).collect();
        let bins_x: Vec<_> = (0..out_w).map(|o| adaptive_bin(w, out_w, o)).collect();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let mut out = vec![F::zero(); np * out_h * out_w];
        for p in 0..np {
            let src = &xs[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1)) in bins_y.iter().enumerate() {
                for (ox, &(x0, x1)) in bins_x.iter().enumerate() {
                    let mut s = F::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            s += src[yy * w + xx];
                        }
                    }
                    out[(p * out_h + oy) * out_w + ox] = s / F::of(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let out_shape = [shape[0], shape[1], out_h, out_w];
        self.graph.push(
            ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap(),
            vec![self.id],
            Box::new(move |g, _| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let mut gx = vec![F::zero(); np * h * w];
                for p in 0..np {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1)) in bins_y.iter().enumerate() {
                        for (ox, &(x0, x1)) in bins_x.iter().enumerate() {
                            let share =
                                gs[(p * out_h + oy) * out_w + ox] / F::of(((y1 - y0) * (x1 - x0)) as f64);
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dst[yy * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&shape), gx).unwrap())]
            }),
        )
    }
}

use std::sync::Arc;

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};

use crate::{Float, Var};

/// Stride and symmetric zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Output extent of a convolution over `size` with kernel `k`.
    pub fn conv_out(&self, size: usize, k: usize) -> usize {
        (size + 2 * self.padding - k) / self.stride + 1
    }

    /// Output extent of a transposed convolution over `size` with kernel `k`.
    pub fn transposed_out(&self, size: usize, k: usize) -> usize {
        (size - 1) * self.stride + k - 2 * self.padding
    }
}

/// Geometry of one sample: an image `[c, h, w]` swept by a `kh x kw` kernel
/// producing an `oh x ow` grid.
#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<F: Float>(img: &[F], g: Geometry, cols: &mut [F]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `img`.
fn col2im<F: Float>(cols: &[F], g: Geometry, img: &mut [F]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Column matrix of one sample, borrowing the image directly for 1x1 kernels.
fn columns<F: Float>(img: &[F], g: Geometry, buf: &mut Vec<F>) -> Array2<F> {
    if g.is_pointwise() {
        return ArrayView2::from_shape((g.c, g.h * g.w), img).unwrap().to_owned();
    }
    buf.resize(g.rows() * g.cols(), F::zero());
    im2col(img, g, buf);
    ArrayView2::from_shape((g.rows(), g.cols()), &buf[..]).unwrap().to_owned()
}

fn standard<F: Float>(a: Arc<ArrayD<F>>) -> Arc<ArrayD<F>> {
    if a.is_standard_layout() {
        a
    } else {
        Arc::new(a.as_standard_layout().into_owned())
    }
}

fn add_channel_bias<F: Float>(out: &mut ArrayD<F>, bias: &ArrayD<F>) {
    for mut sample in out.axis_iter_mut(Axis(0)) {
        for (mut plane, &b) in sample.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            plane.mapv_inplace(|v| v + b);
        }
    }
}

fn channel_bias_grad<F: Float>(g: &ArrayD<F>) -> ArrayD<F> {
    g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0))
}

impl<'g, F: Float> Var<'g, F> {
    /// 2-D convolution (cross-correlation) of `[N, C, H, W]` with a weight
    /// `[O, C, kh, kw]`, optional bias `[O]`.
    pub fn conv2d(self, weight: Var<'g, F>, bias: Option<Var<'g, F>>, spec: Conv2dSpec) -> Var<'g, F> {
        let x = standard(self.value());
        let w = standard(weight.value());
        assert_eq!(x.ndim(), 4, "conv2d input must be NCHW, got {:?}", x.shape());
        assert_eq!(w.ndim(), 4, "conv2d weight must be OCkk");
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
        assert!(h + 2 * spec.padding >= kh && wd + 2 * spec.padding >= kw, "kernel larger than padded input");
        let geo = Geometry {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            oh: spec.conv_out(h, kh),
            ow: spec.conv_out(wd, kw),
        };
        let w2 = w.view().into_shape_with_order((o, geo.rows())).unwrap().to_owned();
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, o, geo.oh, geo.ow]));
        let xs = x.as_slice().unwrap();
        let in_len = c * h * wd;
        let out_len = o * geo.cols();
        let mut buf = Vec::new();
        {
            let out_slice = out.as_slice_mut().unwrap();
            for s in 0..n {
                let cols = columns(&xs[s * in_len..(s + 1) * in_len], geo, &mut buf);
                let mut dst =
                    ArrayViewMut2::from_shape((o, geo.cols()), &mut out_slice[s * out_len..(s + 1) * out_len]).unwrap();
                general_mat_mul(F::one(), &w2, &cols, F::zero(), &mut dst);
            }
        }
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            add_channel_bias(&mut out, &b.value());
            parents.push(b.id);
        }
        let w_shape = w.shape().to_vec();
        self.graph.push(
            out,
            parents,
            Box::new(move |g, need| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let xs = x.as_slice().unwrap();
                let mut gx = need[0].then(|| vec![F::zero(); n * in_len]);
                let mut gw = need[1].then(|| Array2::<F>::zeros((o, geo.rows())));
                let mut buf = Vec::new();
                for s in 0..n {
                    let gy = ArrayView2::from_shape((o, geo.cols()), &gs[s * out_len..(s + 1) * out_len]).unwrap();
                    if let Some(gx) = gx.as_mut() {
                        let gcols = super::linalg::mm(&w2.t(), &gy);
                        let dst = &mut gx[s * in_len..(s + 1) * in_len];
                        if geo.is_pointwise() {
                            for (d, &v) in dst.iter_mut().zip(gcols.iter()) {
                                *d += v;
                            }
                        } else {
                            col2im(gcols.as_slice().unwrap(), geo, dst);
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let cols = columns(&xs[s * in_len..(s + 1) * in_len], geo, &mut buf);
                        general_mat_mul(F::one(), &gy, &cols.t(), F::one(), gw);
                    }
                }
                let mut res = vec![
                    gx.map(|v| ArrayD::from_shape_vec(IxDyn(&[n, c, h, wd]), v).unwrap()),
                    gw.map(|v| v.into_shape_with_order(IxDyn(&w_shape)).unwrap()),
                ];
                if need.len() == 3 {
                    res.push(need[2].then(|| channel_bias_grad(&g.to_owned())));
                }
                res
            }),
        )
    }

    /// Transposed 2-D convolution of `[N, Cin, H, W]` with a weight
    /// `[Cin, Cout, kh, kw]`, optional bias `[Cout]`. The adjoint of
    /// [`Var::conv2d`] with the same spec.
    pub fn conv_transpose2d(self, weight: Var<'g, F>, bias: Option<Var<'g, F>>, spec: Conv2dSpec) -> Var<'g, F> {
        let x = standard(self.value());
        let w = standard(weight.value());
        assert_eq!(x.ndim(), 4, "conv_transpose2d input must be NCHW");
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (wcin, cout, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        assert_eq!(cin, wcin, "conv_transpose2d channel mismatch: input {cin}, weight {wcin}");
        // Geometry of the equivalent forward convolution, which maps the
        // (larger) output back onto the input grid.
        let geo = Geometry {
            c: cout,
            h: spec.transposed_out(h, kh),
            w: spec.transposed_out(wd, kw),
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            oh: h,
            ow: wd,
        };
        let w2 = w.view().into_shape_with_order((cin, geo.rows())).unwrap().to_owned();
        let in_len = cin * h * wd;
        let out_len = cout * geo.h * geo.w;
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, cout, geo.h, geo.w]));
        {
            let xs = x.as_slice().unwrap();
            let out_slice = out.as_slice_mut().unwrap();
            for s in 0..n {
                let xv = ArrayView2::from_shape((cin, h * wd), &xs[s * in_len..(s + 1) * in_len]).unwrap();
                let cols = super::linalg::mm(&w2.t(), &xv);
                col2im(cols.as_slice().unwrap(), geo, &mut out_slice[s * out_len..(s + 1) * out_len]);
            }
        }
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            add_channel_bias(&mut out, &b.value());
            parents.push(b.id);
        }
        let w_shape = w.shape().to_vec();
        self.graph.push(
            out,
            parents,
            Box::new(move |g, need| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let xs = x.as_slice().unwrap();
                let mut gx = need[0].then(|| vec![F::zero(); n * in_len]);
                let mut gw = need[1].then(|| Array2::<F>::zeros((cin, geo.rows())));
                let mut buf = Vec::new();
                for s in 0..n {
                    let gcols = columns(&gs[s * out_len..(s + 1) * out_len], geo, &mut buf);
                    if let Some(gx) = gx.as_mut() {
                        let mut dst =
                            ArrayViewMut2::from_shape((cin, h * wd), &mut gx[s * in_len..(s + 1) * in_len]).unwrap();
                        general_mat_mul(F::one(), &w2, &gcols, F::zero(), &mut dst);
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xv = ArrayView2::from_shape((cin, h * wd), &xs[s * in_len..(s + 1) * in_len]).unwrap();
                        general_mat_mul(F::one(), &xv, &gcols.t(), F::one(), gw);
                    }
                }
                let mut res = vec![
                    gx.map(|v| ArrayD::from_shape_vec(IxDyn(&[n, cin, h, wd]), v).unwrap()),
                    gw.map(|v| v.into_shape_with_order(IxDyn(&w_shape)).unwrap()),
                ];
                if need.len() == 3 {
                    res.push(need[2].then(|| channel_bias_grad(&g.to_owned())));
                }
                res
            }),
        )
    }
}

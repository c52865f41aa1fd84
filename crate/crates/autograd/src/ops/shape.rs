use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::zeros;
use crate::{Float, Graph, Var};

impl<'g, F: Float> Var<'g, F> {
    pub fn reshape(self, shape: &[usize]) -> Var<'g, F> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        assert_eq!(
            x.len(),
            shape.iter().product::<usize>(),
            "cannot reshape {:?} into {:?}",
            in_shape,
            shape
        );
        let out = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("standard layout reshape");
        self.graph.push(
            out,
            vec![self.id],
            Box::new(move |g, _| {
                let g = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .expect("standard layout reshape");
                vec![Some(g)]
            }),
        )
    }

    /// Reorders axes; the output is materialized in standard layout.
    pub fn permute(self, axes: &[usize]) -> Var<'g, F> {
        let x = self.value();
        assert_eq!(axes.len(), x.ndim(), "permute axes {:?} for ndim {}", axes, x.ndim());
        let out = x
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph.push(
            out,
            vec![self.id],
            Box::new(move |g, _| {
                vec![Some(
                    g.view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .into_owned(),
                )]
            }),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Var<'g, F> {
        let n = self.ndim();
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, F> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        assert!(start + len <= in_shape[axis], "narrow out of bounds");
        let out = x
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.graph.push(
            out,
            vec![self.id],
            Box::new(move |g, _| {
                let mut full = zeros::<F>(&in_shape);
                full.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![Some(full)]
            }),
        )
    }

    pub fn sum_all(self) -> Var<'g, F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph.push(
            ArrayD::from_elem(IxDyn(&[]), x.sum()),
            vec![self.id],
            Box::new(move |g, _| {
                let s = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(IxDyn(&shape), s))]
            }),
        )
    }

    pub fn mean_all(self) -> Var<'g, F> {
        let n = self.value().len();
        self.sum_all().scale(F::one() / F::of(n as f64))
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes_keep(self, axes: &[usize]) -> Var<'g, F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let mut out = (*x).clone();
        for &a in axes {
            out = out.sum_axis(Axis(a)).insert_axis(Axis(a));
        }
        self.graph.push(
            out,
            vec![self.id],
            Box::new(move |g, _| {
                let full = g
                    .broadcast(IxDyn(&shape))
                    .expect("broadcast back to input")
                    .to_owned();
                vec![Some(full)]
            }),
        )
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean_axes_keep(self, axes: &[usize]) -> Var<'g, F> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes_keep(axes).scale(F::one() / F::of(count as f64))
    }

    /// Maximum along one axis (kept as size 1). The gradient goes to the
    /// first maximal element.
    pub fn max_axis_keep(self, axis: usize) -> Var<'g, F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut out = zeros::<F>(&out_shape);
        let mut arg = ArrayD::<usize>::zeros(IxDyn(&out_shape));
        for ((lane, o), a) in x
            .lanes(Axis(axis))
            .into_iter()
            .zip(out.iter_mut())
            .zip(arg.iter_mut())
        {
            let mut best = 0;
            let mut best_v = lane[0];
            for (i, &v) in lane.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            *o = best_v;
            *a = best;
        }
        self.graph.push(
            out,
            vec![self.id],
            Box::new(move |g, _| {
                let mut full = zeros::<F>(&shape);
                for ((mut lane, &gv), &a) in full
                    .lanes_mut(Axis(axis))
                    .into_iter()
                    .zip(g.iter())
                    .zip(arg.iter())
                {
                    lane[a] = gv;
                }
                vec![Some(full)]
            }),
        )
    }
}

impl<F: Float> Graph<F> {
    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, F>], axis: usize) -> Var<'g, F> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes agree");
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            out,
            parts.iter().map(|p| p.id).collect(),
            Box::new(move |g, need| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(need)
                    .map(|(&len, &n)| {
                        let piece = n.then(|| {
                            g.slice_axis(Axis(axis), Slice::from(start..start + len))
                                .to_owned()
                        });
                        start += len;
                        piece
                    })
                    .collect()
            }),
        )
    }

    /// Stacks equally shaped nodes along a new leading axis.
    pub fn stack<'g>(&'g self, parts: &[Var<'g, F>]) -> Var<'g, F> {
        let expanded: Vec<_> = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend(p.shape());
                p.reshape(&s)
            })
            .collect();
        self.concat(&expanded, 0)
    }
}

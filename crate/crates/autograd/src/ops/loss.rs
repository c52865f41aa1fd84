use ndarray::{ArrayD, IxDyn};

use crate::{Float, Var};

/// Mean pixel-wise cross-entropy result.
pub struct CrossEntropy<'g, F: Float> {
    /// Scalar loss node (0 when every pixel is ignored).
    pub loss: Var<'g, F>,
    /// Number of pixels that contributed.
    pub counted: usize,
}

impl<'g, F: Float> Var<'g, F> {
    /// Softmax cross-entropy of logits `[N, K, H, W]` against integer targets
    /// laid out `[N, H, W]` (row-major). Pixels equal to `ignore` are skipped;
    /// the loss is the mean over the remaining ones.
    pub fn cross_entropy(self, targets: &[i64], ignore: i64) -> CrossEntropy<'g, F> {
        let logits = self.value();
        assert_eq!(logits.ndim(), 4, "cross_entropy expects [N, K, H, W] logits");
        let shape = logits.shape().to_vec();
        let (n, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        assert_eq!(targets.len(), n * hw, "target count does not match logits");
        let ls = logits.as_standard_layout();
        let ls = ls.as_slice().unwrap();
        // probabilities are needed by the backward pass; keep them
        let mut probs = vec![F::zero(); ls.len()];
        let mut total = F::zero();
        let mut counted = 0usize;
        for s in 0..n {
            for p in 0..hw {
                let at = |c: usize| (s * k + c) * hw + p;
                let max = (0..k).map(|c| ls[at(c)]).fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for c in 0..k {
                    let e = (ls[at(c)] - max).exp();
                    probs[at(c)] = e;
                    sum += e;
                }
                for c in 0..k {
                    probs[at(c)] /= sum;
                }
                let t = targets[s * hw + p];
                if t == ignore {
                    continue;
                }
                assert!(t >= 0 && (t as usize) < k, "target class {t} outside 0..{k}");
                total += max + sum.ln() - ls[at(t as usize)];
                counted += 1;
            }
        }
        let loss = if counted == 0 {
            F::zero()
        } else {
            total / F::of(counted as f64)
        };
        let targets = targets.to_vec();
        let node = self.graph.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![self.id],
            Box::new(move |g, _| {
                let scale = if counted == 0 {
                    F::zero()
                } else {
                    *g.iter().next().unwrap() / F::of(counted as f64)
                };
                let mut grad = vec![F::zero(); n * k * hw];
                for s in 0..n {
                    for p in 0..hw {
                        let t = targets[s * hw + p];
                        if t == ignore {
                            continue;
                        }
                        for c in 0..k {
                            let at = (s * k + c) * hw + p;
                            let onehot = if c as i64 == t { F::one() } else { F::zero() };
                            grad[at] = (probs[at] - onehot) * scale;
                        }
                    }
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&shape), grad).unwrap())]
            }),
        );
        CrossEntropy { loss: node, counted }
    }
}

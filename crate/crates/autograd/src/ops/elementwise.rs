use ndarray::{ArrayD, Zip};

use super::{broadcast_shape, reduce_to_shape};
use crate::{Float, Var};

// Method forms of the arithmetic operators.
#[allow(clippy::should_implement_trait)]
impl<'g, F: Float> Var<'g, F> {
    fn binary(
        self,
        other: Var<'g, F>,
        forward: impl Fn(&ArrayD<F>, &ArrayD<F>) -> ArrayD<F>,
        grad_a: impl Fn(&ArrayD<F>, &ArrayD<F>, &ArrayD<F>) -> ArrayD<F> + 'static,
        grad_b: impl Fn(&ArrayD<F>, &ArrayD<F>, &ArrayD<F>) -> ArrayD<F> + 'static,
    ) -> Var<'g, F> {
        let a = self.value();
        let b = other.value();
        assert!(
            broadcast_shape(a.shape(), b.shape()).is_some(),
            "cannot broadcast {:?} with {:?}",
            a.shape(),
            b.shape()
        );
        let out = forward(&a, &b);
        self.graph.push(
            out,
            vec![self.id, other.id],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| reduce_to_shape(grad_a(g, &a, &b), a.shape())),
                    need[1].then(|| reduce_to_shape(grad_b(g, &a, &b), b.shape())),
                ]
            }),
        )
    }

    pub fn add(self, other: Var<'g, F>) -> Var<'g, F> {
        self.binary(other, |a, b| a + b, |g, _, _| g.clone(), |g, _, _| g.clone())
    }

    pub fn sub(self, other: Var<'g, F>) -> Var<'g, F> {
        self.binary(other, |a, b| a - b, |g, _, _| g.clone(), |g, _, _| g.mapv(|v| -v))
    }

    pub fn mul(self, other: Var<'g, F>) -> Var<'g, F> {
        self.binary(other, |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    pub fn div(self, other: Var<'g, F>) -> Var<'g, F> {
        self.binary(
            other,
            |a, b| a / b,
            |g, _, b| g / b,
            |g, a, b| (g * a / &(b * b)).mapv(|v| -v),
        )
    }

    fn unary(
        self,
        forward: impl Fn(F) -> F,
        derivative: impl Fn(F, F) -> F + 'static,
    ) -> Var<'g, F> {
        let x = self.value();
        let y = x.mapv(&forward);
        let y_saved = std::sync::Arc::new(y.clone());
        self.graph.push(
            y,
            vec![self.id],
            Box::new(move |g, _| {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(&*x)
                    .and(&*y_saved)
                    .for_each(|o, &xi, &yi| *o *= derivative(xi, yi));
                vec![Some(out)]
            }),
        )
    }

    pub fn scale(self, c: F) -> Var<'g, F> {
        let x = self.value();
        self.graph.push(
            x.mapv(|v| v * c),
            vec![self.id],
            Box::new(move |g, _| vec![Some(g.mapv(|v| v * c))]),
        )
    }

    pub fn add_scalar(self, c: F) -> Var<'g, F> {
        let x = self.value();
        self.graph.push(
            x.mapv(|v| v + c),
            vec![self.id],
            Box::new(|g, _| vec![Some(g.clone())]),
        )
    }

    pub fn neg(self) -> Var<'g, F> {
        self.scale(-F::one())
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'g, F> {
        self.neg().add_scalar(F::one())
    }

    /// Rectifier with derivative 0 at exactly zero.
    pub fn relu(self) -> Var<'g, F> {
        self.unary(
            |v| if v > F::zero() { v } else { F::zero() },
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    /// Rectifier whose derivative at exactly zero is taken as 1 (the right
    /// derivative). Used where a unit is initialized exactly at the kink and
    /// must still receive a gradient.
    pub fn relu_right(self) -> Var<'g, F> {
        self.unary(
            |v| if v > F::zero() { v } else { F::zero() },
            |x, _| if x >= F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn sigmoid(self) -> Var<'g, F> {
        self.unary(sigmoid, |_, y| y * (F::one() - y))
    }

    pub fn tanh(self) -> Var<'g, F> {
        self.unary(|v| v.tanh(), |_, y| F::one() - y * y)
    }

    pub fn exp(self) -> Var<'g, F> {
        self.unary(|v| v.exp(), |_, y| y)
    }

    pub fn square(self) -> Var<'g, F> {
        self.unary(|v| v * v, |x, _| F::of(2.0) * x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g, F> {
        self.unary(gelu, gelu_derivative)
    }
}

pub(crate) fn sigmoid<F: Float>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Float>(x: F) -> F {
    let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    F::of(0.5) * x * (F::one() + inner.tanh())
}

fn gelu_derivative<F: Float>(x: F, _y: F) -> F {
    let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let d_inner = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * x * x);
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * d_inner
}

use std::rc::Rc;

use crate::error::Result;
use crate::tape::Var;
use crate::tensor::{broadcast_zip, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

// `add`, `sub` and `mul` return `Result` for shape errors, so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_keep = y.clone();
        self.tape().op((*y).clone(), &[self], move |g, _| {
            let data = g.data().iter().zip(x.data()).zip(y_keep.data()).map(|((&g, &x), &y)| g * df(x, y)).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).expect("unary grad"))]
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(silu, |x, _| silu_grad(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip(&a, &b, |x, y| x + y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape().op(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.sum_to_shape(&sa).expect("add grad")),
                need[1].then(|| g.sum_to_shape(&sb).expect("add grad")),
            ]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip(&a, &b, |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape().op(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.sum_to_shape(&sa).expect("sub grad")),
                need[1].then(|| {
                    let mut t = g.sum_to_shape(&sb).expect("sub grad");
                    t.scale_in_place(-1.0);
                    t
                }),
            ]
        }))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip(&a, &b, |x, y| x * y)?;
        Ok(self.tape().op(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| {
                    broadcast_zip(g, &b, |g, y| g * y).and_then(|t| t.sum_to_shape(a.shape())).expect("mul grad")
                }),
                need[1].then(|| {
                    broadcast_zip(g, &a, |g, x| g * x).and_then(|t| t.sum_to_shape(b.shape())).expect("mul grad")
                }),
            ]
        }))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().op(Tensor::scalar(x.sum()), &[self], move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }
}

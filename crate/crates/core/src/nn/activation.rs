use crate::autograd::{Backward, BackwardCtx, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Initial negative slope of every PReLU channel.
pub const PRELU_INIT: f64 = 0.25;

/// Per-channel negative slopes of a PReLU layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PReLUParams<T: Element = f32> {
    pub alpha: Tensor<T>,
}

impl<T: Element> PReLUParams<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(PReLUParams {
            alpha: Tensor::full(&[channels], T::from_f64(PRELU_INIT))?,
        })
    }
}

/// `max(0, x) - alpha * max(0, -x)`
#[inline]
pub fn prelu_scalar<T: Element>(x: T, alpha: T) -> T {
    x.max(T::zero()) - alpha * (-x).max(T::zero())
}

/// Logistic function evaluated without overflow, kept strictly inside (0, 1).
#[inline]
pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    s.max(T::epsilon()).min(T::one() - T::epsilon())
}

struct PReLURule;

impl<T: Element> Backward<T> for PReLURule {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, alpha) = (ctx.inputs[0], ctx.inputs[1].data());
        let (_, c, h, w) = x.dims4()?;
        let plane = h * w;
        let dy = ctx.grad.data();
        let dx = ctx.needs[0].then(|| {
            let data = x
                .data()
                .iter()
                .zip(dy)
                .enumerate()
                .map(|(i, (&v, &g))| if v > T::zero() { g } else { g * alpha[(i / plane) % c] })
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        });
        let dalpha = ctx.needs[1].then(|| {
            let mut da = vec![T::zero(); c];
            for (i, (&v, &g)) in x.data().iter().zip(dy).enumerate() {
                if v < T::zero() {
                    da[(i / plane) % c] += g * v;
                }
            }
            Tensor::from_parts(vec![c], da)
        });
        Ok(vec![dx, dalpha])
    }
}

struct SigmoidRule;

impl<T: Element> Backward<T> for SigmoidRule {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let data = ctx
            .output
            .data()
            .iter()
            .zip(ctx.grad.data())
            .map(|(&s, &g)| g * s * (T::one() - s))
            .collect();
        Ok(vec![Some(Tensor::from_parts(ctx.output.shape().to_vec(), data))])
    }
}

impl<T: Element> Graph<T> {
    /// Parametric ReLU with one slope per channel of `x (N, C, H, W)`.
    pub fn prelu(&mut self, x: NodeId, alpha: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (_, c, h, w) = xv.dims4()?;
        let av = self.value(alpha).data();
        if av.len() != c {
            return Err(Error::dim(format!(
                "prelu has {} slopes for {c} channels",
                av.len()
            )));
        }
        let plane = h * w;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| prelu_scalar(v, av[(i / plane) % c]))
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("prelu", out, &[x, alpha], PReLURule)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(sigmoid_scalar);
        self.push("sigmoid", out, &[x], SigmoidRule)
    }
}

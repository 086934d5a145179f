//! Elementwise, concatenation and reduction operators.

use super::{Backward, BackwardCtx, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

struct AddRule {
    /// Channel count when the second operand is a per-channel bias.
    bias_channels: Option<usize>,
}

impl<T: Element> Backward<T> for AddRule {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let ga = ctx.needs[0].then(|| ctx.grad.clone());
        let gb = if !ctx.needs[1] {
            None
        } else if let Some(c) = self.bias_channels {
            let (n, _, h, w) = ctx.grad.dims4()?;
            Some(Tensor::from_parts(
                ctx.inputs[1].shape().to_vec(),
                channel_sums(ctx.grad.data(), n, c, h * w),
            ))
        } else {
            Some(ctx.grad.clone())
        };
        Ok(vec![ga, gb])
    }
}

pub(crate) fn channel_sums<T: Element>(data: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); c];
    for b in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            let start = (b * c + ch) * plane;
            *s += data[start..start + plane].iter().copied().sum::<T>();
        }
    }
    sums
}

struct MulRule;

impl<T: Element> Backward<T> for MulRule {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let prod = |other: &Tensor<T>| {
            Tensor::from_parts(
                g.shape().to_vec(),
                g.data().iter().zip(other.data()).map(|(&g, &o)| g * o).collect(),
            )
        };
        Ok(vec![
            ctx.needs[0].then(|| prod(b)),
            ctx.needs[1].then(|| prod(a)),
        ])
    }
}

struct ConcatRule {
    split: usize,
}

impl<T: Element> Backward<T> for ConcatRule {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (n, c, h, w) = ctx.grad.dims4()?;
        let plane = h * w;
        let split = self.split;
        let take = |lo: usize, hi: usize| {
            let mut out = Vec::with_capacity(n * (hi - lo) * plane);
            for b in 0..n {
                out.extend_from_slice(&ctx.grad.data()[(b * c + lo) * plane..(b * c + hi) * plane]);
            }
            Tensor::from_parts(vec![n, hi - lo, h, w], out)
        };
        Ok(vec![
            ctx.needs[0].then(|| take(0, split)),
            ctx.needs[1].then(|| take(split, c)),
        ])
    }
}

struct MeanRule;

impl<T: Element> Backward<T> for MeanRule {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let g = ctx.grad.data()[0] / T::from_f64(x.len() as f64);
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), vec![g; x.len()]))])
    }
}

struct SumRule;

impl<T: Element> Backward<T> for SumRule {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let g = ctx.grad.data()[0];
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), vec![g; x.len()]))])
    }
}

impl<T: Element> Graph<T> {
    /// Elementwise sum. `b` may instead be a per-channel bias of shape `[C]`
    /// added to every pixel of a `(N, C, H, W)` tensor `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
            let out = Tensor::from_parts(va.shape().to_vec(), data);
            return self.push("add", out, &[a, b], AddRule { bias_channels: None });
        }
        let (n, c, h, w) = va.dims4().map_err(|_| shape_mismatch(va, vb))?;
        if vb.shape() != [c] {
            return Err(shape_mismatch(va, vb));
        }
        let plane = h * w;
        let mut data = va.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += vb.data()[(i / plane) % c];
        }
        let out = Tensor::from_parts(vec![n, c, h, w], data);
        self.push("add", out, &[a, b], AddRule { bias_channels: Some(c) })
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_mismatch(va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push("mul", out, &[a, b], MulRule)
    }

    /// Joins two `(N, C, H, W)` tensors along the channel axis; `a` comes first.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, ca, h, w) = va.dims4()?;
        let (n2, cb, h2, w2) = vb.dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::dim(format!(
                "concat needs matching batch and spatial dims, got {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for s in 0..n {
            data.extend_from_slice(&va.data()[s * ca * plane..(s + 1) * ca * plane]);
            data.extend_from_slice(&vb.data()[s * cb * plane..(s + 1) * cb * plane]);
        }
        let out = Tensor::from_parts(vec![n, ca + cb, h, w], data);
        self.push("concat_channels", out, &[a, b], ConcatRule { split: ca })
    }

    /// Arithmetic mean of all entries, as a one-element tensor.
    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let mean = v.data().iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        self.push("reduce_mean", Tensor::scalar(mean), &[a], MeanRule)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(total), &[a], SumRule)
    }
}

fn shape_mismatch<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::dim(format!(
        "shapes {:?} and {:?} are neither equal nor tensor-plus-channel-bias",
        a.shape(),
        b.shape()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2], &[1.0, 2.0]));
        let b = g.input(t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let z = g.input(t(&[2], &[0.0, 0.0]));
        let s = g.add(a, z).unwrap();
        assert_eq!(g.value(s), g.value(a));
    }

    #[test]
    fn add_bias_broadcasts_per_channel() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2, 2, 1, 2]).unwrap());
        let b = g.param(t(&[2], &[1.0, -1.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
        let loss = g.sum(y).unwrap();
        // every bias entry touches 2 samples * 2 pixels
        assert_eq!(g.backward(loss).unwrap().wrt(b).data(), &[4.0, 4.0]);
    }

    #[test]
    fn add_rejects_incompatible_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[1, 2, 2, 2]).unwrap());
        let b = g.input(Tensor::zeros(&[3]).unwrap());
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
        let c = g.input(Tensor::zeros(&[2, 2]).unwrap());
        assert!(matches!(g.add(a, c), Err(Error::Dimension(_))));
    }

    #[test]
    fn concat_layout_and_shape() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64).unwrap());
        let b = g.input(Tensor::from_fn(&[1, 3, 4, 4], |i| -(i as f64)).unwrap());
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 5, 4, 4]);
        assert_eq!(&g.value(c).data()[..16], &g.value(a).data()[..16]);
        assert_eq!(&g.value(c).data()[32..], g.value(b).data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
        let b = g.input(Tensor::zeros(&[1, 2, 4, 2]).unwrap());
        assert!(g.concat_channels(a, b).is_err());
        let c = g.input(Tensor::zeros(&[2, 2, 4, 4]).unwrap());
        assert!(g.concat_channels(a, c).is_err());
    }

    #[test]
    fn concat_backward_gives_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64).unwrap());
        let b = g.param(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64).unwrap());
        let c = g.concat_channels(a, b).unwrap();
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(a).data().iter().all(|&v| v == 1.0));
        assert!(grads.wrt(b).data().iter().all(|&v| v == 1.0));
        // and the finite-difference harness agrees
        let err = grad_check(
            |g, x| {
                let c = g.concat_channels(x[0], x[1])?;
                g.sum(c)
            },
            &[
                Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64).unwrap(),
                Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64).unwrap(),
            ],
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn reduce_mean_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.reduce_mean(a).unwrap();
        assert_eq!(g.value(m).data(), &[2.5]);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.wrt(a).data(), &[0.25; 4]);

        let mut g = Graph::<f64>::new();
        let c = g.input(Tensor::full(&[3, 3], 1.75).unwrap());
        let m = g.reduce_mean(c).unwrap();
        assert_eq!(g.value(m).data(), &[1.75]);
    }
}

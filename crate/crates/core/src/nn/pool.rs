use crate::autograd::{Backward, BackwardCtx, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

struct AvgPoolRule;

impl<T: Element> Backward<T> for AvgPoolRule {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let (n, c, h, w) = x.dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let dy = ctx.grad.data();
        let mut dx = vec![T::zero(); x.len()];
        for p in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let g = dy[(p * ho + i) * wo + j] * quarter;
                    let top = (p * h + 2 * i) * w + 2 * j;
                    dx[top] = g;
                    dx[top + 1] = g;
                    dx[top + w] = g;
                    dx[top + w + 1] = g;
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

pub(crate) fn avgpool2x2_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!(
            "2x2 average pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                let top = (p * h + 2 * i) * w + 2 * j;
                out.push((xd[top] + xd[top + 1] + xd[top + w] + xd[top + w + 1]) * quarter);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

impl<T: Element> Graph<T> {
    /// Mean over disjoint 2x2 windows; halves `H` and `W`.
    pub fn avgpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let out = avgpool2x2_forward(self.value(x))?;
        self.push("avgpool2x2", out, &[x], AvgPoolRule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_mean() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool2x2_forward(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(&[1, 3, 8, 8], 0.3).unwrap();
        let y = avgpool2x2_forward(&c).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn odd_dims_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]).unwrap();
        assert!(matches!(avgpool2x2_forward(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn nearest_upsample_preserves_window_means() {
        // exact for dyadic inputs
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn(&[2, 2, 6, 4], |_| {
            (rand::Rng::random_range(&mut rng, -64i32..64) as f64) / 16.0
        })
        .unwrap();
        let pooled = avgpool2x2_forward(&x).unwrap();
        // nearest upsample, then pool again
        let (n, c, h, w) = pooled.dims4().unwrap();
        let up = Tensor::from_fn(&[n, c, 2 * h, 2 * w], |i| {
            let (p, rem) = (i / (4 * h * w), i % (4 * h * w));
            let (y, xx) = (rem / (2 * w), rem % (2 * w));
            pooled.data()[(p * h + y / 2) * w + xx / 2]
        })
        .unwrap();
        assert_eq!(avgpool2x2_forward(&up).unwrap(), pooled);
    }

    #[test]
    fn gradients() {
        for seed in 0..5 {
            for shape in [[1, 2, 4, 4], [2, 3, 2, 6]] {
                let x = Tensor::uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let err = grad_check(|g, v| g.avgpool2x2(v[0]), &[x], 1e-4).unwrap();
                assert!(err <= 1e-4, "{err}");
            }
        }
    }
}

use crate::autograd::{Backward, BackwardCtx, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the logarithm.
pub const BCE_CLAMP: f64 = 1e-7;

struct BceRule;

impl<T: Element> Backward<T> for BceRule {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (pred, target) = (ctx.inputs[0], ctx.inputs[1]);
        let scale = ctx.grad.data()[0] / T::from_f64(pred.len() as f64);
        let (lo, hi) = clamp_bounds::<T>();
        let dp = ctx.needs[0].then(|| {
            let data = pred
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| {
                    if p < lo || p > hi {
                        // flat outside the clamp
                        T::zero()
                    } else {
                        scale * (p - t) / (p * (T::one() - p))
                    }
                })
                .collect();
            Tensor::from_parts(pred.shape().to_vec(), data)
        });
        // targets are labels
        Ok(vec![dp, None])
    }
}

fn clamp_bounds<T: Element>() -> (T, T) {
    (T::from_f64(BCE_CLAMP), T::from_f64(1.0 - BCE_CLAMP))
}

impl<T: Element> Graph<T> {
    /// Mean binary cross-entropy of probabilities `pred` against 0/1 `target`.
    pub fn bce_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::dim(format!(
                "bce_loss shapes differ: {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
        let (lo, hi) = clamp_bounds::<T>();
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&p, &t)| {
                let p = p.max(lo).min(hi).as_f64();
                let t = t.as_f64();
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let loss = Tensor::scalar(T::from_f64(total / p.len() as f64));
        self.push("bce_loss", loss, &[pred, target], BceRule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bce(p: Vec<f64>, t: Vec<f64>) -> f64 {
        let mut g = Graph::<f64>::new();
        let n = p.len();
        let pi = g.input(Tensor::new(&[n], p).unwrap());
        let ti = g.input(Tensor::new(&[n], t).unwrap());
        let l = g.bce_loss(pi, ti).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn perfect_prediction() {
        let t = vec![0.0, 1.0, 1.0, 0.0];
        assert!(bce(t.clone(), t) <= 1e-6);
    }

    #[test]
    fn half_everywhere_is_ln2() {
        let l = bce(vec![0.5; 6], vec![0.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::full(&[4], 0.5).unwrap());
        let t = g.input(Tensor::full(&[2, 2], 1.0).unwrap());
        assert!(matches!(g.bce_loss(p, t), Err(Error::Dimension(_))));
    }

    #[test]
    fn sigmoid_bce_chain_gradients() {
        for seed in 0..5 {
            for shape in [[1, 1, 4, 4], [2, 1, 3, 5]] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::uniform(&shape, -3.0, 3.0, &mut rng).unwrap();
                let n: usize = shape.iter().product();
                let target: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
                let target = Tensor::new(&shape, target).unwrap();
                let err = grad_check(
                    |g, v| {
                        let p = g.sigmoid(v[0])?;
                        let t = g.input(target.clone());
                        g.bce_loss(p, t)
                    },
                    &[x],
                    1e-4,
                )
                .unwrap();
                assert!(err <= 1e-4, "{err}");
            }
        }
    }
}

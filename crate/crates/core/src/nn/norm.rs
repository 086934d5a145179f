//! Per-channel batch normalisation.

use crate::autograd::{Backward, BackwardCtx, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::Mode;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Trainable scale/shift plus the running statistics used at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T: Element = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: RunningStats<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Element = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// Per-channel mean and (biased) variance of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> BatchNormState<T> {
    /// gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNormState {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running: RunningStats {
                mean: vec![T::zero(); channels],
                var: vec![T::one(); channels],
                momentum: BN_MOMENTUM,
                eps: BN_EPS,
            },
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl<T: Element> RunningStats<T> {
    /// `running <- momentum * running + (1 - momentum) * batch`
    pub fn update(&mut self, batch: &BatchStats<T>) {
        let m = T::from_f64(self.momentum);
        let rest = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = m * *r + rest * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = (m * *r + rest * b).max(T::zero());
        }
    }
}

struct TrainRule<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

struct InferRule<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Shared gamma/beta gradient: `(sum dy * xhat, sum dy)` per channel.
fn affine_grads<T: Element>(dy: &[T], xhat: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
            for (&g, &xh) in dy[r.clone()].iter().zip(&xhat[r]) {
                dgamma[ch] += g * xh;
                dbeta[ch] += g;
            }
        }
    }
    (dgamma, dbeta)
}

impl<T: Element> Backward<T> for TrainRule<T> {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let gamma = ctx.inputs[1].data();
        let (n, c, h, w) = x.dims4()?;
        let plane = h * w;
        let count = T::from_f64((n * plane) as f64);
        let dy = ctx.grad.data();
        let (dgamma, dbeta) = affine_grads(dy, &self.xhat, n, c, plane);

        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![T::zero(); x.len()];
            for s in 0..n {
                for ch in 0..c {
                    let scale = gamma[ch] * self.inv_std[ch] / count;
                    let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                    for ((d, &g), &xh) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&self.xhat[r]) {
                        *d = scale * (count * g - dbeta[ch] - xh * dgamma[ch]);
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        Ok(vec![
            dx,
            ctx.needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            ctx.needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ])
    }
}

impl<T: Element> Backward<T> for InferRule<T> {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let gamma = ctx.inputs[1].data();
        let (n, c, h, w) = x.dims4()?;
        let plane = h * w;
        let dy = ctx.grad.data();
        let (dgamma, dbeta) = affine_grads(dy, &self.xhat, n, c, plane);
        let dx = ctx.needs[0].then(|| {
            let data = dy
                .iter()
                .enumerate()
                .map(|(i, &g)| {
                    let ch = (i / plane) % c;
                    g * gamma[ch] * self.inv_std[ch]
                })
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        });
        Ok(vec![
            dx,
            ctx.needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            ctx.needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ])
    }
}

impl<T: Element> Graph<T> {
    /// Batch normalisation of `x (N, C, H, W)`.
    ///
    /// Train mode normalises with this batch's statistics and returns them so
    /// the caller can fold them into `running`; infer mode uses `running` only
    /// and returns `None`.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &RunningStats<T>,
        mode: Mode,
    ) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        if gv.len() != c || bv.len() != c || running.mean.len() != c || running.var.len() != c {
            return Err(Error::dim(format!(
                "batchnorm state has {} channels, input has {c}",
                gv.len()
            )));
        }
        let plane = h * w;
        let eps = T::from_f64(running.eps);
        let (mean, var) = match mode {
            Mode::Train => channel_moments(xv.data(), n, c, plane),
            Mode::Infer => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (i, &v) in xv.data().iter().enumerate() {
            let ch = (i / plane) % c;
            let xh = (v - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            out.push(gv[ch] * xh + bv[ch]);
        }
        let out = Tensor::from_parts(vec![n, c, h, w], out);
        match mode {
            Mode::Train => {
                let id = self.push("batchnorm", out, &[x, gamma, beta], TrainRule { xhat, inv_std })?;
                Ok((id, Some(BatchStats { mean, var })))
            }
            Mode::Infer => {
                let id = self.push("batchnorm", out, &[x, gamma, beta], InferRule { xhat, inv_std })?;
                Ok((id, None))
            }
        }
    }
}

/// Per-channel mean and biased variance, accumulated in f64.
fn channel_moments<T: Element>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = (n * plane) as f64;
    let mut mean = vec![0.0f64; c];
    for s in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            let start = (s * c + ch) * plane;
            *m += x[start..start + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0f64; c];
    for s in 0..n {
        for (ch, v) in var.iter_mut().enumerate() {
            let start = (s * c + ch) * plane;
            *v += x[start..start + plane]
                .iter()
                .map(|x| (x.as_f64() - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    (
        mean.into_iter().map(T::from_f64).collect(),
        var.into_iter().map(|v| T::from_f64(v / count)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(x: Tensor<f64>, state: &BatchNormState<f64>, mode: Mode) -> (Tensor<f64>, Option<BatchStats<f64>>) {
        let mut g = Graph::new();
        let xi = g.input(x);
        let gi = g.input(state.gamma.clone());
        let bi = g.input(state.beta.clone());
        let (y, stats) = g.batchnorm(xi, gi, bi, &state.running, mode).unwrap();
        (g.value(y).clone(), stats)
    }

    #[test]
    fn constant_input_normalises_to_zero() {
        let state = BatchNormState::<f64>::new(2).unwrap();
        let (y, stats) = run(Tensor::full(&[3, 2, 4, 4], 7.5).unwrap(), &state, Mode::Train);
        assert!(y.data().iter().all(|v| v.abs() <= 1e-3));
        assert_eq!(stats.unwrap().mean, vec![7.5, 7.5]);
    }

    #[test]
    fn infer_with_unit_stats_is_near_identity() {
        let state = BatchNormState::<f64>::new(3).unwrap();
        let x = Tensor::uniform(&[2, 3, 4, 4], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (y, stats) = run(x.clone(), &state, Mode::Infer);
        assert!(stats.is_none());
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn infer_is_independent_of_batch_composition() {
        let mut state = BatchNormState::<f64>::new(2).unwrap();
        state.running.mean = vec![0.3, -0.2];
        state.running.var = vec![2.0, 0.5];
        state.gamma = Tensor::new(&[2], vec![1.5, 0.7]).unwrap();
        state.beta = Tensor::new(&[2], vec![0.1, -0.4]).unwrap();
        let batch = Tensor::uniform(&[3, 2, 4, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (all, _) = run(batch.clone(), &state, Mode::Infer);
        let (alone, _) = run(batch.sample(1).unwrap(), &state, Mode::Infer);
        assert_eq!(all.sample(1).unwrap(), alone);
    }

    #[test]
    fn infer_does_not_touch_state() {
        let state = BatchNormState::<f64>::new(2).unwrap();
        let before = state.clone();
        let _ = run(Tensor::full(&[1, 2, 2, 2], 3.0).unwrap(), &state, Mode::Infer);
        assert_eq!(state, before);
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut state = BatchNormState::<f64>::new(1).unwrap();
        state.running.update(&BatchStats {
            mean: vec![2.0],
            var: vec![3.0],
        });
        assert!((state.running.mean[0] - 0.2).abs() < 1e-15);
        assert!((state.running.var[0] - (0.9 + 0.3)).abs() < 1e-15);
    }

    #[test]
    fn channel_mismatch() {
        let state = BatchNormState::<f64>::new(3).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 2, 2]).unwrap());
        let gi = g.input(state.gamma.clone());
        let bi = g.input(state.beta.clone());
        assert!(matches!(
            g.batchnorm(x, gi, bi, &state.running, Mode::Train),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gradients_both_modes() {
        for mode in [Mode::Train, Mode::Infer] {
            for seed in 0..5 {
                for shape in [[2, 3, 3, 3], [4, 2, 1, 2]] {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let c = shape[1];
                    let mut running = BatchNormState::<f64>::new(c).unwrap().running;
                    running.mean = (0..c).map(|i| 0.1 * i as f64).collect();
                    running.var = (0..c).map(|i| 0.5 + i as f64).collect();
                    let inputs = [
                        Tensor::uniform(&shape, -1.0, 1.0, &mut rng).unwrap(),
                        Tensor::uniform(&[c], 0.5, 1.5, &mut rng).unwrap(),
                        Tensor::uniform(&[c], -0.5, 0.5, &mut rng).unwrap(),
                    ];
                    let err = grad_check(
                        |g, v| Ok(g.batchnorm(v[0], v[1], v[2], &running, mode)?.0),
                        &inputs,
                        1e-4,
                    )
                    .unwrap();
                    assert!(err <= 1e-4, "{mode:?} seed {seed}: {err}");
                }
            }
        }
    }
}

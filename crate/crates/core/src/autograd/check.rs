//! Central finite-difference gradient checking at double precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

/// Analytic and numeric gradients for every checked input entry.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Per input: (flat index, analytic, numeric).
    pub entries: Vec<Vec<(usize, f64, f64)>>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .flatten()
            .map(|&(_, a, n)| rel_error(a, n))
            .fold(0.0, f64::max)
    }

    /// Same comparison with every analytic value scaled, to confirm the
    /// harness notices a wrong gradient.
    pub fn corrupted(&self, factor: f64) -> GradReport {
        GradReport {
            entries: self
                .entries
                .iter()
                .map(|e| e.iter().map(|&(i, a, n)| (i, a * factor, n)).collect())
                .collect(),
        }
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// `max |a - n| / max(1, |a|)` over paired slices.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Checks every entry of every input. See [`grad_check_report`].
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    Ok(grad_check_report(f, inputs, eps, None)?.max_rel_error())
}

/// Compares the tape's gradients of `f` with central differences.
///
/// A non-scalar output is reduced to `sum(out * w)` with fixed pseudo-random
/// weights `w` in `[-1, 1]`, so every output entry is exercised. When
/// `max_entries` is set, at most that many entries per input are perturbed,
/// chosen by a fixed seed.
pub fn grad_check_report<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_entries: Option<usize>,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    assert!(eps > 0.0, "eps must be positive");
    let build = |g: &mut Graph<f64>, values: &[Tensor<f64>]| -> Result<NodeId> {
        let ids: Vec<_> = values.iter().map(|v| g.param(v.clone())).collect();
        let out = f(g, &ids)?;
        if g.value(out).is_scalar() {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x6a09_e667);
        let w = Tensor::uniform(g.value(out).shape(), -1.0, 1.0, &mut rng)?;
        let w = g.input(w);
        let weighted = g.mul(out, w)?;
        g.sum(weighted)
    };
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, values)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let loss = build(&mut g, inputs)?;
    let grads = g.backward(loss)?;
    // leaves were registered first, in input order
    let analytic: Vec<Tensor<f64>> = (0..inputs.len())
        .map(|i| grads.wrt(NodeId(i)))
        .collect();

    let mut pick_rng = ChaCha8Rng::seed_from_u64(0xbb67_ae85);
    let mut entries = Vec::with_capacity(inputs.len());
    let mut values = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let indices: Vec<usize> = match max_entries {
            Some(m) if m < n => {
                let mut idx = sample(&mut pick_rng, n, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut checked = Vec::with_capacity(indices.len());
        for i in indices {
            let original = input.data()[i];
            values[k] = with_entry(input, i, original + eps);
            let plus = eval(&values)?;
            values[k] = with_entry(input, i, original - eps);
            let minus = eval(&values)?;
            values[k] = input.clone();
            checked.push((i, analytic[k].data()[i], (plus - minus) / (2.0 * eps)));
        }
        entries.push(checked);
    }
    Ok(GradReport { entries })
}

fn with_entry(t: &Tensor<f64>, i: usize, v: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[i] = v;
    Tensor::from_parts(t.shape().to_vec(), data)
}

//! The finite-difference suite over every differentiable operator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchConfig, Network};
use crate::autograd::{grad_check_report, Graph, NodeId};
use crate::error::Result;
use crate::nn::{BatchNormState, ConvSpec, Mode, Padding};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
pub const SUITE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const EPS: f64 = 1e-6;

/// Worst relative error of one operator over all seeds and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>);

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng).expect("non-empty shape")
}

/// Values bounded away from zero, for kinked functions.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn conv_case(x: [usize; 4], cout: usize, k: usize, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Case {
    let inputs = vec![
        uniform(&x, -1.0, 1.0, rng),
        uniform(&[cout, x[1], k, k], -0.5, 0.5, rng),
        uniform(&[cout], -0.5, 0.5, rng),
    ];
    (inputs, Box::new(move |g, ids| g.conv2d(ids[0], ids[1], ids[2], spec)))
}

fn cases(op: &str, rng: &mut ChaCha8Rng) -> Vec<Case> {
    let shapes = [[1usize, 2, 4, 4], [2, 3, 2, 6]];
    match op {
        "add" => shapes
            .iter()
            .map(|s| -> Case {
                (vec![uniform(s, -1.0, 1.0, rng), uniform(s, -1.0, 1.0, rng)], Box::new(|g, ids| g.add(ids[0], ids[1])))
            })
            .collect(),
        "add_bias" => shapes
            .iter()
            .map(|s| -> Case {
                (vec![uniform(s, -1.0, 1.0, rng), uniform(&[s[1]], -1.0, 1.0, rng)], Box::new(|g, ids| g.add(ids[0], ids[1])))
            })
            .collect(),
        "mul" => shapes
            .iter()
            .map(|s| -> Case {
                (vec![uniform(s, -1.0, 1.0, rng), uniform(s, -1.0, 1.0, rng)], Box::new(|g, ids| g.mul(ids[0], ids[1])))
            })
            .collect(),
        "concat_channels" => [([1usize, 2, 3, 3], 1usize), ([2, 1, 2, 4], 3)]
            .iter()
            .map(|&(s, c2)| -> Case {
                let other = [s[0], c2, s[2], s[3]];
                (vec![uniform(&s, -1.0, 1.0, rng), uniform(&other, -1.0, 1.0, rng)], Box::new(|g, ids| g.concat_channels(ids[0], ids[1])))
            })
            .collect(),
        "sum" => shapes
            .iter()
            .map(|s| -> Case { (vec![uniform(s, -1.0, 1.0, rng)], Box::new(|g, ids| g.sum(ids[0]))) })
            .collect(),
        "reduce_mean" => shapes
            .iter()
            .map(|s| -> Case { (vec![uniform(s, -1.0, 1.0, rng)], Box::new(|g, ids| g.reduce_mean(ids[0]))) })
            .collect(),
        "conv2d" => vec![
            conv_case([1, 2, 5, 5], 3, 3, ConvSpec::SAME, rng),
            conv_case([2, 3, 4, 4], 2, 1, ConvSpec::SAME, rng),
            conv_case([1, 2, 4, 6], 2, 2, ConvSpec::DOWN, rng),
            conv_case([1, 1, 6, 6], 2, 5, ConvSpec::SAME, rng),
            conv_case([1, 2, 5, 4], 2, 3, ConvSpec { stride: 1, padding: Padding::Valid }, rng),
        ],
        "deconv2x2" => [[1usize, 3, 2, 2], [2, 2, 3, 2]]
            .iter()
            .map(|s| -> Case {
                let cout = 2;
                let inputs = vec![
                    uniform(s, -1.0, 1.0, rng),
                    uniform(&[s[1], cout, 2, 2], -0.5, 0.5, rng),
                    uniform(&[cout], -0.5, 0.5, rng),
                ];
                (inputs, Box::new(|g, ids| g.deconv2x2(ids[0], ids[1], ids[2])))
            })
            .collect(),
        "avgpool2x2" => [[1usize, 2, 4, 4], [2, 1, 2, 6]]
            .iter()
            .map(|s| -> Case { (vec![uniform(s, -1.0, 1.0, rng)], Box::new(|g, ids| g.avgpool2x2(ids[0]))) })
            .collect(),
        "batchnorm" => [[3usize, 2, 2, 2], [2, 3, 3, 2]]
            .iter()
            .map(|s| -> Case {
                let c = s[1];
                let inputs = vec![
                    uniform(s, -1.0, 1.0, rng),
                    uniform(&[c], 0.5, 1.5, rng),
                    uniform(&[c], -0.5, 0.5, rng),
                ];
                let running = BatchNormState::<f64>::new(c).expect("positive channels").running;
                (
                    inputs,
                    Box::new(move |g, ids| Ok(g.batchnorm(ids[0], ids[1], ids[2], &running, Mode::Train)?.0)),
                )
            })
            .collect(),
        "prelu" => shapes
            .iter()
            .map(|s| -> Case {
                (vec![off_zero(s, rng), uniform(&[s[1]], 0.05, 0.5, rng)], Box::new(|g, ids| g.prelu(ids[0], ids[1])))
            })
            .collect(),
        "sigmoid" => shapes
            .iter()
            .map(|s| -> Case { (vec![uniform(s, -4.0, 4.0, rng)], Box::new(|g, ids| g.sigmoid(ids[0]))) })
            .collect(),
        "bce_loss" => shapes
            .iter()
            .map(|s| -> Case {
                let n: usize = s.iter().product();
                let bits: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
                let target = Tensor::new(s, bits).expect("shape matches data");
                (
                    vec![uniform(s, 0.1, 0.9, rng)],
                    Box::new(move |g, ids| {
                        let t = g.input(target.clone());
                        g.bce_loss(ids[0], t)
                    }),
                )
            })
            .collect(),
        other => unreachable!("no cases for {other}"),
    }
}

pub const OPS: [&str; 13] = [
    "add",
    "add_bias",
    "mul",
    "concat_channels",
    "sum",
    "reduce_mean",
    "conv2d",
    "deconv2x2",
    "avgpool2x2",
    "batchnorm",
    "prelu",
    "sigmoid",
    "bce_loss",
];

/// Checks every operator on each seed and shape. Every input entry is
/// perturbed.
pub fn check_ops(seeds: &[u64]) -> Result<Vec<OpCheck>> {
    OPS.iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            let mut count = 0;
            for &seed in seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for (inputs, f) in cases(op, &mut rng) {
                    let report = grad_check_report(|g, ids| f(g, ids), &inputs, EPS, None)?;
                    worst = worst.max(report.max_rel_error());
                    count += 1;
                }
            }
            Ok(OpCheck { op, cases: count, max_rel_error: worst, tolerance: OP_TOLERANCE })
        })
        .collect()
}

/// End-to-end check of the tiny network in train mode on `8 x 8` inputs,
/// sampling `entries` coordinates of every parameter.
pub fn check_network(seed: u64, entries: usize) -> Result<OpCheck> {
    let net = Network::<f64>::build(&ArchConfig::tiny(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs: Vec<Tensor<f64>> = net.params().iter().map(|p| p.value.clone()).collect();
    inputs.push(uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng));
    let report = grad_check_report(
        |g, ids| {
            let (params, x) = ids.split_at(ids.len() - 1);
            Ok(net.forward_graph(g, params, x[0], Mode::Train)?.0)
        },
        &inputs,
        1e-5,
        Some(entries),
    )?;
    Ok(OpCheck {
        op: "tiny_network",
        cases: 1,
        max_rel_error: report.max_rel_error(),
        tolerance: NETWORK_TOLERANCE,
    })
}

/// The operator checks over [`SUITE_SEEDS`] followed by the network check.
pub fn run_suite() -> Result<Vec<OpCheck>> {
    let mut out = check_ops(&SUITE_SEEDS)?;
    out.push(check_network(11, 3)?);
    Ok(out)
}

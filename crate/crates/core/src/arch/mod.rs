//! The IVUS-Net encoder/decoder.
//!
//! Four encoding blocks feed three decoding blocks through skip connections,
//! followed by a 5x5 convolution and a sigmoid. Every block pairs a *main*
//! branch (stacked 3x3 conv, PReLU, batch-norm units) with a *refining*
//! branch (3x3 conv, PReLU, 1x1 conv) and sums the two. Encoding blocks 2-4
//! first downsample by concatenating a 2x2 average pool with a 2x2 stride-2
//! convolution of the same input. Decoding blocks upsample the previous
//! block's output with a 2x2 transposed convolution, concatenate it with the
//! skip map for the main branch, and hand the upsampled map alone to the
//! refining branch.

mod checkpoint;
mod config;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::ArchConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{BatchNormState, BatchStats, ConvSpec, Mode, RunningStats, PRELU_INIT};
use crate::tensor::{Element, Tensor};

/// Spatial dims must be divisible by this (three 2x downsamplings).
pub const SIZE_MULTIPLE: usize = 8;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedStats<T: Element> {
    pub name: String,
    pub stats: RunningStats<T>,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    spec: ConvSpec,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvUnit {
    conv: ConvLayer,
    alpha: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct RefineBranch {
    conv3: ConvLayer,
    alpha: usize,
    conv1: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
struct EncodingBlock {
    down: Option<ConvLayer>,
    main: Vec<ConvUnit>,
    refine: Option<RefineBranch>,
}

#[derive(Clone, Debug, PartialEq)]
struct DecodingBlock {
    /// Transposed-convolution weight/bias.
    up: ConvLayer,
    main: Vec<ConvUnit>,
    refine: Option<RefineBranch>,
}

/// Parameters, running statistics and wiring of one IVUS-Net instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Element = f32> {
    cfg: ArchConfig,
    params: Vec<Param<T>>,
    running: Vec<NamedStats<T>>,
    encoder: Vec<EncodingBlock>,
    decoder: Vec<DecodingBlock>,
    head: ConvLayer,
}

/// Batch statistics gathered by a train-mode forward pass, keyed by
/// running-stats index.
pub type StatUpdates<T> = Vec<(usize, BatchStats<T>)>;

struct Builder<'a, T: Element> {
    params: Vec<Param<T>>,
    running: Vec<NamedStats<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Element> Builder<'_, T> {
    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    /// He-uniform weights scaled for PReLU at its initial slope, zero bias.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec) -> Result<ConvLayer> {
        let fan_in = (cin * k * k) as f64;
        let bound = (6.0 / ((1.0 + PRELU_INIT * PRELU_INIT) * fan_in)).sqrt();
        let w = Tensor::uniform(&[cout, cin, k, k], -bound, bound, self.rng)?;
        Ok(ConvLayer {
            weight: self.push(format!("{name}.weight"), w),
            bias: self.push(format!("{name}.bias"), Tensor::zeros(&[cout])?),
            spec,
        })
    }

    /// Transposed 2x2 convolution stored as (in, out, 2, 2). Each output
    /// pixel sees one tap per input channel.
    fn deconv(&mut self, name: &str, cin: usize, cout: usize) -> Result<ConvLayer> {
        let bound = (6.0 / ((1.0 + PRELU_INIT * PRELU_INIT) * cin as f64)).sqrt();
        let w = Tensor::uniform(&[cin, cout, 2, 2], -bound, bound, self.rng)?;
        Ok(ConvLayer {
            weight: self.push(format!("{name}.weight"), w),
            bias: self.push(format!("{name}.bias"), Tensor::zeros(&[cout])?),
            spec: ConvSpec::DOWN,
        })
    }

    fn prelu(&mut self, name: &str, channels: usize) -> Result<usize> {
        let alpha = Tensor::full(&[channels], T::from_f64(PRELU_INIT))?;
        Ok(self.push(format!("{name}.alpha"), alpha))
    }

    fn unit(&mut self, name: &str, cin: usize, cout: usize) -> Result<ConvUnit> {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, 3, ConvSpec::SAME)?;
        let alpha = self.prelu(&format!("{name}.prelu"), cout)?;
        let bn = BatchNormState::<T>::new(cout)?;
        let gamma = self.push(format!("{name}.bn.gamma"), bn.gamma);
        let beta = self.push(format!("{name}.bn.beta"), bn.beta);
        self.running.push(NamedStats {
            name: format!("{name}.bn"),
            stats: bn.running,
        });
        Ok(ConvUnit {
            conv,
            alpha,
            gamma,
            beta,
            stats: self.running.len() - 1,
        })
    }

    fn main_branch(&mut self, name: &str, cin: usize, cout: usize, depth: usize) -> Result<Vec<ConvUnit>> {
        (0..depth)
            .map(|i| self.unit(&format!("{name}.main{i}"), if i == 0 { cin } else { cout }, cout))
            .collect()
    }

    fn refine(&mut self, name: &str, cin: usize, cout: usize) -> Result<RefineBranch> {
        Ok(RefineBranch {
            conv3: self.conv(&format!("{name}.refine.conv3"), cin, cout, 3, ConvSpec::SAME)?,
            alpha: self.prelu(&format!("{name}.refine.prelu"), cout)?,
            conv1: self.conv(&format!("{name}.refine.conv1"), cout, cout, 1, ConvSpec::SAME)?,
        })
    }
}

impl<T: Element> Network<T> {
    /// Builds the topology for `cfg` with weights drawn from `seed`.
    pub fn build(cfg: &ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            running: Vec::new(),
            rng: &mut rng,
        };
        let d = cfg.block_depths;
        let depth = cfg.main_convs_per_block;

        let mut encoder = Vec::with_capacity(4);
        for i in 0..4 {
            let name = format!("enc{}", i + 1);
            let (down, cin) = if i == 0 {
                (None, cfg.input_channels)
            } else {
                let c = d[i - 1];
                (Some(b.conv(&format!("{name}.down"), c, c, 2, ConvSpec::DOWN)?), 2 * c)
            };
            let main = b.main_branch(&name, cin, d[i], depth)?;
            let refine = cfg.refine.then(|| b.refine(&name, cin, d[i])).transpose()?;
            encoder.push(EncodingBlock { down, main, refine });
        }

        let mut decoder = Vec::with_capacity(3);
        let mut prev = d[3];
        for j in 0..3 {
            let name = format!("dec{}", j + 1);
            let out = d[2 - j];
            let up = b.deconv(&format!("{name}.up"), prev, out)?;
            // upsampled map and skip map both carry `out` channels
            let main = b.main_branch(&name, 2 * out, out, depth)?;
            let refine = cfg.refine.then(|| b.refine(&name, out, out)).transpose()?;
            decoder.push(DecodingBlock { up, main, refine });
            prev = out;
        }
        let head = b.conv("head", d[0], 1, 5, ConvSpec::SAME)?;

        Ok(Network {
            cfg: cfg.clone(),
            params: b.params,
            running: b.running,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[NamedStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [NamedStats<T>] {
        &mut self.running
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a graph leaf, in parameter order.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect()
    }

    /// Folds the batch statistics of a train-mode pass into the running stats.
    pub fn apply_stat_updates(&mut self, updates: &StatUpdates<T>) {
        for (i, batch) in updates {
            self.running[*i].stats.update(batch);
        }
    }

    /// Checks the `(N, C, H, W)` input contract.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = *shape else {
            return Err(Error::dim(format!(
                "network input must be (batch, channel, height, width), got {shape:?}"
            )));
        };
        if c != self.cfg.input_channels {
            return Err(Error::dim(format!(
                "network expects {} input channel(s), got {c}",
                self.cfg.input_channels
            )));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::dim(format!(
                "input height and width must be divisible by {SIZE_MULTIPLE}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Records a forward pass on `g`. `bound` comes from [`Network::bind`].
    /// Returns the probability-map node and, in train mode, batch statistics
    /// for [`Network::apply_stat_updates`].
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bound: &[NodeId],
        x: NodeId,
        mode: Mode,
    ) -> Result<(NodeId, StatUpdates<T>)> {
        self.check_input(g.value(x).shape())?;
        if bound.len() != self.params.len() {
            return Err(Error::contract("bound parameter list does not match network"));
        }
        let mut pass = Pass {
            net: self,
            g,
            bound,
            mode,
            updates: Vec::new(),
        };
        let mut skips = Vec::with_capacity(4);
        let mut h = x;
        for block in &self.encoder {
            h = pass.encode(block, h)?;
            skips.push(h);
        }
        // encoder block 4 feeds the first decoder; blocks 3, 2, 1 are skips
        for (block, &skip) in self.decoder.iter().zip(skips[..3].iter().rev()) {
            h = pass.decode(block, h, skip)?;
        }
        let logits = pass.conv(&self.head, h)?;
        let out = pass.g.sigmoid(logits)?;
        Ok((out, pass.updates))
    }

    /// Infer-mode forward pass without recording gradients.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.input(image.clone());
        let (out, _) = self.forward_graph(&mut g, &bound, x, Mode::Infer)?;
        Ok(g.value(out).clone())
    }

    /// Converts the parameter precision, keeping names and wiring.
    pub fn cast<U: Element>(&self) -> Network<U> {
        Network {
            cfg: self.cfg.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            running: self
                .running
                .iter()
                .map(|r| NamedStats {
                    name: r.name.clone(),
                    stats: RunningStats {
                        mean: r.stats.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        var: r.stats.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        momentum: r.stats.momentum,
                        eps: r.stats.eps,
                    },
                })
                .collect(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }
}

/// State threaded through one forward pass.
struct Pass<'a, T: Element> {
    net: &'a Network<T>,
    g: &'a mut Graph<T>,
    bound: &'a [NodeId],
    mode: Mode,
    updates: StatUpdates<T>,
}

impl<T: Element> Pass<'_, T> {
    fn conv(&mut self, layer: &ConvLayer, x: NodeId) -> Result<NodeId> {
        self.g
            .conv2d(x, self.bound[layer.weight], self.bound[layer.bias], layer.spec)
    }

    fn unit(&mut self, unit: &ConvUnit, x: NodeId) -> Result<NodeId> {
        let h = self.conv(&unit.conv, x)?;
        let h = self.g.prelu(h, self.bound[unit.alpha])?;
        let running = &self.net.running[unit.stats].stats;
        let (h, stats) = self.g.batchnorm(
            h,
            self.bound[unit.gamma],
            self.bound[unit.beta],
            running,
            self.mode,
        )?;
        if let Some(stats) = stats {
            self.updates.push((unit.stats, stats));
        }
        Ok(h)
    }

    fn branches(&mut self, main: &[ConvUnit], refine: Option<&RefineBranch>, main_in: NodeId, refine_in: NodeId) -> Result<NodeId> {
        let mut h = main_in;
        for unit in main {
            h = self.unit(unit, h)?;
        }
        let Some(r) = refine else { return Ok(h) };
        let t = self.conv(&r.conv3, refine_in)?;
        let t = self.g.prelu(t, self.bound[r.alpha])?;
        let t = self.conv(&r.conv1, t)?;
        self.g.add(h, t)
    }

    fn encode(&mut self, block: &EncodingBlock, x: NodeId) -> Result<NodeId> {
        let input = match &block.down {
            Some(down) => {
                let pooled = self.g.avgpool2x2(x)?;
                let strided = self.conv(down, x)?;
                self.g.concat_channels(pooled, strided)?
            }
            None => x,
        };
        self.branches(&block.main, block.refine.as_ref(), input, input)
    }

    fn decode(&mut self, block: &DecodingBlock, x: NodeId, skip: NodeId) -> Result<NodeId> {
        let up = self
            .g
            .deconv2x2(x, self.bound[block.up.weight], self.bound[block.up.bias])?;
        let joined = self.g.concat_channels(up, skip)?;
        self.branches(&block.main, block.refine.as_ref(), joined, up)
    }
}

//! Adam, the training loop and ensemble prediction.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchConfig, Network};
use crate::augment::{build_epoch_stream, AugmentConfig};
use crate::autograd::Graph;
use crate::data::{downsize_half, downsize_mask_half, BinaryMask, FrameRecord, GrayImage, ProbMap, Target};
use crate::error::{Error, Result};
use crate::metrics::jaccard;
use crate::nn::Mode;
use crate::postprocess::{binarize, DEFAULT_THRESHOLD};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub target: Target,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Upper bound; an epoch never runs more batches than its stream holds.
    pub iterations_per_epoch: usize,
    /// Original frames held out for monitoring.
    pub validation_count: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            target: Target::Lumen,
            learning_rate: 1e-4,
            batch_size: 6,
            epochs: 96,
            iterations_per_epoch: 144,
            validation_count: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("iterations_per_epoch", self.iterations_per_epoch),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// One-line summary, e.g. `lr=0.0001 batch=6 epochs=96 ...`.
    pub fn describe(&self) -> String {
        format!(
            "lr={} batch={} epochs={} iterations={} validation={} target={} seed={}",
            self.learning_rate,
            self.batch_size,
            self.epochs,
            self.iterations_per_epoch,
            self.validation_count,
            self.target.as_str(),
            self.seed
        )
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    /// Zeroed moments for parameters of the given sizes.
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f32>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One bias-corrected update with constant step size `lr`.
    pub fn update<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<f32>>,
        grads: &[Tensor<f32>],
        lr: f64,
    ) -> Result<()> {
        let params: Vec<&mut Tensor<f32>> = params.into_iter().collect();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam holds {} moment buffers but got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(Error::contract(format!(
                    "parameter {i} has shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = (1.0 - self.beta1.powi(t)) as f32;
        let c2 = (1.0 - self.beta2.powi(t)) as f32;
        let (lr, eps) = (lr as f32, self.eps as f32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// An image with the mask the model should learn.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainFrame {
    pub image: GrayImage,
    pub mask: BinaryMask,
}

/// Loads frames and their `target` masks, optionally at half resolution.
pub fn load_frames(records: &[FrameRecord], target: Target, half: bool) -> Result<Vec<TrainFrame>> {
    records
        .iter()
        .map(|r| {
            let image = r.load_image()?;
            let mask = r.load_mask(target, image.width, image.height)?;
            Ok(if half {
                TrainFrame {
                    image: downsize_half(&image)?,
                    mask: downsize_mask_half(&mask)?,
                }
            } else {
                TrainFrame { image, mask }
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub val_jm: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Validation JM before the first update.
    pub initial_val_jm: Option<f64>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `epoch,loss,val_jm`; the last column is empty without validation frames.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_jm\n");
        for e in &self.epochs {
            let jm = e.val_jm.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.6},{}", e.epoch, e.loss, jm);
        }
        out
    }
}

/// Seeded split of `0..n` into `(training, validation)` index lists, each
/// in ascending order.
pub fn split_validation(n: usize, count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let mut val = order[..count.min(n)].to_vec();
    let mut train = order[count.min(n)..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn check_frames(frames: &[TrainFrame]) -> Result<()> {
    let Some(first) = frames.first() else {
        return Err(Error::config("no training frames"));
    };
    for f in frames {
        if (f.image.width, f.image.height) != (first.image.width, first.image.height)
            || (f.mask.width, f.mask.height) != (f.image.width, f.image.height)
        {
            return Err(Error::dim("training frames and masks must share one size"));
        }
    }
    Ok(())
}

/// Probability maps for `images`, run in infer mode `batch` at a time.
pub fn predict_maps(net: &Network<f32>, images: &[&GrayImage], batch: usize) -> Result<Vec<ProbMap>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let x = Tensor::stack(&chunk.iter().map(|i| i.to_tensor()).collect::<Vec<_>>())?;
        let y = net.forward(&x)?;
        for k in 0..chunk.len() {
            out.push(ProbMap::from_tensor(&y.sample(k)?)?);
        }
    }
    Ok(out)
}

/// Mean JM of thresholded maps against the frames' masks, without contour
/// extraction.
pub fn mean_pixel_jm(net: &Network<f32>, frames: &[&TrainFrame], batch: usize) -> Result<f64> {
    let images: Vec<&GrayImage> = frames.iter().map(|f| &f.image).collect();
    let maps = predict_maps(net, &images, batch)?;
    let mut total = 0.0;
    for (map, f) in maps.iter().zip(frames) {
        total += jaccard(&binarize(map, DEFAULT_THRESHOLD), &f.mask)?;
    }
    Ok(total / frames.len() as f64)
}

/// Trains one model. Weights are initialised from `tcfg.seed`, validation
/// frames are drawn from the originals with the same seed and never enter a
/// batch, and augmentation follows `acfg`. `on_epoch` sees every finished
/// epoch. Returns the last-epoch model.
pub fn train_model(
    frames: &[TrainFrame],
    arch: &ArchConfig,
    tcfg: &TrainConfig,
    acfg: &AugmentConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Network<f32>, TrainHistory)> {
    tcfg.validate()?;
    acfg.validate()?;
    check_frames(frames)?;
    if frames.len() <= tcfg.validation_count {
        return Err(Error::config(format!(
            "need more than {} frames to hold out {} for validation, got {}",
            tcfg.validation_count,
            tcfg.validation_count,
            frames.len()
        )));
    }
    let mut net = Network::<f32>::build(arch, tcfg.seed)?;
    net.check_input(&[1, arch.input_channels, frames[0].image.height, frames[0].image.width])?;

    let (train_idx, val_idx) = split_validation(frames.len(), tcfg.validation_count, tcfg.seed);
    let train: Vec<&TrainFrame> = train_idx.iter().map(|&i| &frames[i]).collect();
    let val: Vec<&TrainFrame> = val_idx.iter().map(|&i| &frames[i]).collect();
    let validate = |net: &Network<f32>| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            mean_pixel_jm(net, &val, tcfg.batch_size).map(Some)
        }
    };

    let mut adam = AdamState::new(net.params().iter().map(|p| p.value.len()));
    let mut history = TrainHistory {
        initial_val_jm: validate(&net)?,
        epochs: Vec::with_capacity(tcfg.epochs),
    };
    for epoch in 0..tcfg.epochs {
        let stream = build_epoch_stream(train.len(), acfg, epoch as u64);
        let iterations = tcfg
            .iterations_per_epoch
            .min(stream.len().div_ceil(tcfg.batch_size));
        let mut loss_sum = 0.0;
        for batch in stream.chunks(tcfg.batch_size).take(iterations) {
            let (images, masks): (Vec<_>, Vec<_>) = batch
                .iter()
                .map(|s| {
                    let f = train[s.record];
                    let (img, mask) = s.materialize(&f.image, &f.mask, acfg.noise_sigma);
                    (img.to_tensor(), mask.to_tensor())
                })
                .unzip();
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let x = g.input(Tensor::stack(&images)?);
            let (pred, updates) = net.forward_graph(&mut g, &bound, x, Mode::Train)?;
            let target = g.input(Tensor::stack(&masks)?);
            let loss = g.bce_loss(pred, target)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::contract(format!(
                    "training loss became {value} in epoch {}",
                    epoch + 1
                )));
            }
            loss_sum += value;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = bound.iter().map(|&id| grads.take(id)).collect();
            adam.update(
                net.params_mut().iter_mut().map(|p| &mut p.value),
                &grads,
                tcfg.learning_rate,
            )?;
            net.apply_stat_updates(&updates);
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / iterations as f64,
            val_jm: validate(&net)?,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok((net, history))
}

/// Mean of the models' probability maps for an `(N, C, H, W)` batch.
pub fn ensemble_predict(models: &[Network<f32>], image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let first = models
        .first()
        .ok_or_else(|| Error::contract("ensemble needs at least one model"))?;
    if models.iter().any(|m| m.config().input_channels != first.config().input_channels) {
        return Err(Error::contract("ensemble members disagree on input channels"));
    }
    // f64 accumulation keeps the mean exact and order independent
    let mut acc = vec![0.0f64; 0];
    let mut shape = Vec::new();
    for m in models {
        let y = m.forward(image)?;
        if acc.is_empty() {
            acc = vec![0.0; y.len()];
            shape = y.shape().to_vec();
        }
        for (a, &v) in acc.iter_mut().zip(y.data()) {
            *a += v as f64;
        }
    }
    let k = models.len() as f64;
    Tensor::new(&shape, acc.into_iter().map(|a| (a / k) as f32).collect())
}

/// Ensemble probability map of one frame.
pub fn ensemble_map(models: &[Network<f32>], image: &GrayImage) -> Result<ProbMap> {
    ProbMap::from_tensor(&ensemble_predict(models, &image.to_tensor())?)
}

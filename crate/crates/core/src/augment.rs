//! Flips, additive noise and blackout, and the per-epoch sample stream.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{BinaryMask, GrayImage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Standard deviation of the additive noise, in `[0, 1]` intensity units.
    pub noise_sigma: f64,
    pub noise_prob: f64,
    pub blackout_prob: f64,
    pub seed: u64,
    /// `false` yields only the original frames, unmodified.
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_sigma: 0.10,
            noise_prob: 0.5,
            blackout_prob: 0.05,
            seed: 0,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!(
                "noise_sigma must be a finite non-negative number, got {}",
                self.noise_sigma
            )));
        }
        for (name, p) in [("noise_prob", self.noise_prob), ("blackout_prob", self.blackout_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// The four elements of the flip group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flip {
    Identity,
    LeftRight,
    UpDown,
    Both,
}

impl Flip {
    pub const ALL: [Flip; 4] = [Flip::Identity, Flip::LeftRight, Flip::UpDown, Flip::Both];

    fn axes(self) -> (bool, bool) {
        match self {
            Flip::Identity => (false, false),
            Flip::LeftRight => (true, false),
            Flip::UpDown => (false, true),
            Flip::Both => (true, true),
        }
    }

    /// Group product: applying `self` then `other`.
    pub fn then(self, other: Flip) -> Flip {
        let (a, b) = (self.axes(), other.axes());
        match (a.0 ^ b.0, a.1 ^ b.1) {
            (false, false) => Flip::Identity,
            (true, false) => Flip::LeftRight,
            (false, true) => Flip::UpDown,
            (true, true) => Flip::Both,
        }
    }

    pub fn apply<T: Copy>(self, data: &[T], width: usize, height: usize) -> Vec<T> {
        let (lr, ud) = self.axes();
        let mut out = Vec::with_capacity(data.len());
        for y in 0..height {
            let sy = if ud { height - 1 - y } else { y };
            let row = &data[sy * width..(sy + 1) * width];
            if lr {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
        out
    }

    pub fn image(self, img: &GrayImage) -> GrayImage {
        GrayImage {
            width: img.width,
            height: img.height,
            pixels: self.apply(&img.pixels, img.width, img.height),
        }
    }

    pub fn mask(self, m: &BinaryMask) -> BinaryMask {
        BinaryMask {
            width: m.width,
            height: m.height,
            bits: self.apply(&m.bits, m.width, m.height),
        }
    }
}

pub fn flip_lr_image(img: &GrayImage) -> GrayImage {
    Flip::LeftRight.image(img)
}

/// Flips an image and its lumen/media masks together.
pub fn flip_frame(
    flip: Flip,
    img: &GrayImage,
    masks: (&BinaryMask, &BinaryMask),
) -> (GrayImage, BinaryMask, BinaryMask) {
    (flip.image(img), flip.mask(masks.0), flip.mask(masks.1))
}

pub fn flip_lr(img: &GrayImage, masks: (&BinaryMask, &BinaryMask)) -> (GrayImage, BinaryMask, BinaryMask) {
    flip_frame(Flip::LeftRight, img, masks)
}

pub fn flip_ud(img: &GrayImage, masks: (&BinaryMask, &BinaryMask)) -> (GrayImage, BinaryMask, BinaryMask) {
    flip_frame(Flip::UpDown, img, masks)
}

pub fn flip_both(img: &GrayImage, masks: (&BinaryMask, &BinaryMask)) -> (GrayImage, BinaryMask, BinaryMask) {
    flip_frame(Flip::Both, img, masks)
}

/// Adds i.i.d. `N(0, sigma^2)` noise and clamps to `[0, 1]`.
pub fn add_gaussian_noise(img: &GrayImage, sigma: f64, seed: u64) -> GrayImage {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: img
            .pixels
            .iter()
            .map(|&v| (v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
            .collect(),
    }
}

pub fn blackout(img: &GrayImage) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: vec![0.0; img.pixels.len()],
    }
}

/// One training sample: which frame, which flip, which corruption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub record: usize,
    pub flip: Flip,
    pub noise_seed: Option<u64>,
    pub blackout: bool,
}

impl Sample {
    /// Applies the sample's transform to a frame and its target mask.
    pub fn materialize(&self, img: &GrayImage, mask: &BinaryMask, sigma: f64) -> (GrayImage, BinaryMask) {
        let mut out = self.flip.image(img);
        if let Some(seed) = self.noise_seed {
            out = add_gaussian_noise(&out, sigma, seed);
        }
        if self.blackout {
            out = blackout(&out);
        }
        (out, self.flip.mask(mask))
    }
}

/// Shuffled samples for one epoch over `n_records` frames, deterministic in
/// `(cfg.seed, epoch)`. With augmentation on this is every frame under all
/// four flips, each independently noised and blacked out; with it off, the
/// untouched originals.
pub fn build_epoch_stream(n_records: usize, cfg: &AugmentConfig, epoch: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch);
    let mut samples = Vec::with_capacity(4 * n_records);
    for record in 0..n_records {
        if !cfg.enabled {
            samples.push(Sample {
                record,
                flip: Flip::Identity,
                noise_seed: None,
                blackout: false,
            });
            continue;
        }
        for flip in Flip::ALL {
            let noise_seed = rng.random_bool(cfg.noise_prob).then(|| rng.random());
            let blackout = rng.random_bool(cfg.blackout_prob);
            samples.push(Sample {
                record,
                flip,
                noise_seed,
                blackout,
            });
        }
    }
    samples.shuffle(&mut rng);
    samples
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::new(w, h, (0..w * h).map(|i| i as f32 / (w * h) as f32).collect()).unwrap()
    }

    #[test]
    fn two_by_two_flip() {
        let img = GrayImage::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(flip_lr_image(&img).pixels, vec![0.2, 0.1, 0.4, 0.3]);
        assert_eq!(Flip::UpDown.image(&img).pixels, vec![0.3, 0.4, 0.1, 0.2]);
    }

    #[test]
    fn flips_move_masks_with_image() {
        let img = ramp(4, 3);
        let lum = BinaryMask::from_fn(4, 3, |x, y| x == 0 && y == 0).unwrap();
        let med = BinaryMask::from_fn(4, 3, |x, _| x < 2).unwrap();
        let (i, l, m) = flip_both(&img, (&lum, &med));
        assert_eq!(i.get(3, 2), img.get(0, 0));
        assert!(l.get(3, 2) && l.count() == 1);
        assert!(m.get(3, 0) && !m.get(0, 0));
        let (i2, l2, _) = flip_lr(&img, (&lum, &med));
        let (i3, l3, _) = flip_ud(&i2, (&l2, &med));
        assert_eq!((i3, l3), (i, l));
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = ramp(8, 8);
        assert_eq!(add_gaussian_noise(&img, 0.0, 3), img);
    }

    #[test]
    fn noise_mean_is_centred() {
        let img = GrayImage::filled(128, 128, 0.5).unwrap();
        let sigma = 0.1;
        let noisy = add_gaussian_noise(&img, sigma, 42);
        assert!(noisy.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mean = noisy.pixels.iter().map(|&v| v as f64 - 0.5).sum::<f64>() / (128.0 * 128.0);
        assert!(mean.abs() <= 3.0 * sigma / 128.0, "{mean}");
    }

    #[test]
    fn blackout_is_idempotent() {
        let img = ramp(8, 8);
        let b = blackout(&img);
        assert!(b.pixels.iter().all(|&v| v == 0.0));
        assert_eq!(blackout(&b), b);
    }

    #[test]
    fn stream_size_and_determinism() {
        let cfg = AugmentConfig { seed: 9, ..Default::default() };
        let s = build_epoch_stream(7, &cfg, 3);
        assert_eq!(s.len(), 28);
        assert_eq!(s, build_epoch_stream(7, &cfg, 3));
        assert_ne!(s, build_epoch_stream(7, &cfg, 4));
        for r in 0..7 {
            let flips: Vec<Flip> = s.iter().filter(|x| x.record == r).map(|x| x.flip).collect();
            assert_eq!(flips.len(), 4);
            assert!(Flip::ALL.iter().all(|f| flips.contains(f)));
        }
        let off = AugmentConfig { enabled: false, ..cfg };
        let s = build_epoch_stream(7, &off, 0);
        assert_eq!(s.len(), 7);
        assert!(s.iter().all(|x| x.flip == Flip::Identity && x.noise_seed.is_none() && !x.blackout));
    }

    #[test]
    fn certain_blackout_keeps_masks() {
        let cfg = AugmentConfig { blackout_prob: 1.0, ..Default::default() };
        let img = ramp(8, 8);
        let mask = BinaryMask::from_fn(8, 8, |x, y| x + y < 6).unwrap();
        for s in build_epoch_stream(3, &cfg, 0) {
            let (i, m) = s.materialize(&img, &mask, cfg.noise_sigma);
            assert!(i.pixels.iter().all(|&v| v == 0.0));
            assert_eq!(m, s.flip.mask(&mask));
        }
    }

    #[test]
    fn config_ranges() {
        assert!(AugmentConfig { noise_prob: 1.5, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { noise_sigma: -0.1, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn flips_form_klein_group(w in 1usize..9, h in 1usize..9) {
            let img = ramp(w, h);
            for f in Flip::ALL {
                prop_assert_eq!(f.image(&f.image(&img)), img.clone());
                for g in Flip::ALL {
                    let composed = g.image(&f.image(&img));
                    prop_assert_eq!(&composed, &f.then(g).image(&img));
                    prop_assert!(Flip::ALL.contains(&f.then(g)));
                }
            }
            prop_assert_eq!(Flip::Both.image(&img), Flip::UpDown.image(&Flip::LeftRight.image(&img)));
        }

        #[test]
        fn corruption_never_touches_masks(seed in any::<u64>(), epoch in 0u64..50) {
            let cfg = AugmentConfig { seed, noise_prob: 0.7, blackout_prob: 0.3, ..Default::default() };
            let img = ramp(6, 4);
            let mask = BinaryMask::from_fn(6, 4, |x, y| (x * y) % 3 == 1).unwrap();
            for s in build_epoch_stream(2, &cfg, epoch) {
                let (_, m) = s.materialize(&img, &mask, cfg.noise_sigma);
                prop_assert_eq!(m, s.flip.mask(&mask));
            }
        }
    }
}

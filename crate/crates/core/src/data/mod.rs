//! Frames, masks, probability maps and the files that hold them.

mod manifest;
mod phantom;
mod pgm;

pub use manifest::{load_manifest, parse_manifest, write_manifest, Category, FrameRecord, Split};
pub use phantom::{generate_phantom, synth_phantoms, Phantom};
pub use pgm::{read_ivpm, read_mask, read_pgm, write_ivpm, write_mask, write_pgm};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale frame with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

/// One bit per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

/// Per-pixel foreground probabilities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

/// Which mask a model learns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    Lumen,
    Media,
}

impl Target {
    pub const ALL: [Target; 2] = [Target::Lumen, Target::Media];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Lumen => "lumen",
            Target::Media => "media",
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lumen" => Ok(Target::Lumen),
            "media" => Ok(Target::Media),
            _ => Err(Error::config(format!("unknown target {s:?}, expected lumen or media"))),
        }
    }
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 || width * height != len {
        return Err(Error::dim(format!(
            "{width}x{height} image cannot hold {len} pixels"
        )));
    }
    Ok(())
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        check_len(width, height, pixels.len())?;
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, 1, self.height, self.width], self.pixels.clone())
            .expect("image dims are non-zero")
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        check_len(width, height, bits.len())?;
        Ok(BinaryMask { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, bits)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-bounds reads are background.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    /// `true` when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// `(1, 1, H, W)` tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[1, 1, self.height, self.width], data).expect("mask dims are non-zero")
    }
}

impl ProbMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        check_len(width, height, values.len())?;
        Ok(ProbMap { width, height, values })
    }

    /// Reads sample 0, channel 0 of an `(N, 1, H, W)` tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        if c != 1 {
            return Err(Error::dim(format!("probability map must have 1 channel, got {c}")));
        }
        Self::new(w, h, t.data()[..h * w].to_vec())
    }
}

fn check_even(width: usize, height: usize) -> Result<()> {
    if width % 2 != 0 || height % 2 != 0 {
        return Err(Error::dim(format!(
            "half-size downsampling needs even dimensions, got {width}x{height}"
        )));
    }
    Ok(())
}

/// Mean of each disjoint 2x2 block.
pub fn downsize_half(img: &GrayImage) -> Result<GrayImage> {
    check_even(img.width, img.height)?;
    let (w, h) = (img.width / 2, img.height / 2);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            // pairwise sums keep the result exactly flip-invariant
            let top = img.get(2 * x, 2 * y) + img.get(2 * x + 1, 2 * y);
            let bottom = img.get(2 * x, 2 * y + 1) + img.get(2 * x + 1, 2 * y + 1);
            let s = top + bottom;
            out.push(s / 4.0);
        }
    }
    GrayImage::new(w, h, out)
}

/// Majority vote over each 2x2 block; two-two ties go to foreground.
pub fn downsize_mask_half(mask: &BinaryMask) -> Result<BinaryMask> {
    check_even(mask.width, mask.height)?;
    BinaryMask::from_fn(mask.width / 2, mask.height / 2, |x, y| {
        let votes = [(0, 0), (1, 0), (0, 1), (1, 1)]
            .iter()
            .filter(|(dx, dy)| mask.get(2 * x + dx, 2 * y + dy))
            .count();
        votes >= 2
    })
}

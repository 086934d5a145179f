//! Synthetic IVUS-like frames: a dark lumen inside a bright media ring.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_manifest, write_mask, write_pgm, BinaryMask, Category, FrameRecord, GrayImage, Split};
use crate::arch::SIZE_MULTIPLE;
use crate::error::{Error, Result};
use crate::postprocess::{ellipse_to_mask, EllipseParams};

const LUMEN_LEVEL: f64 = 0.15;
const MEDIA_LEVEL: f64 = 0.70;
const BACKGROUND_LEVEL: f64 = 0.35;
const SPECKLE_STD: f64 = 0.15;
const NOISE_STD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: GrayImage,
    pub lumen: BinaryMask,
    pub media: BinaryMask,
    pub lumen_ellipse: EllipseParams,
    pub media_ellipse: EllipseParams,
}

/// Lumen ellipse with its whole outline well inside `media`.
fn lumen_inside(rng: &mut ChaCha8Rng, media: &EllipseParams) -> EllipseParams {
    loop {
        let a = media.b * rng.random_range(0.45..0.75);
        let b = a * rng.random_range(0.7..1.0);
        let r = media.b * rng.random_range(0.0..0.15);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let lumen = EllipseParams::new(
            media.cx + r * phi.cos(),
            media.cy + r * phi.sin(),
            a,
            b,
            rng.random_range(0.0..std::f64::consts::PI),
        );
        let inside = (0..256).all(|k| {
            let (x, y) = lumen.point_at(std::f64::consts::TAU * k as f64 / 256.0);
            media.implicit(x, y) < 0.8
        });
        if inside {
            return lumen;
        }
    }
}

/// One phantom of `size x size` pixels.
pub fn generate_phantom(rng: &mut ChaCha8Rng, size: usize) -> Phantom {
    let s = size as f64;
    let centre = |rng: &mut ChaCha8Rng| (s - 1.0) / 2.0 + rng.random_range(-0.06..0.06) * s;
    let a = rng.random_range(0.25..0.36) * s;
    let media_ellipse = EllipseParams::new(
        centre(rng),
        centre(rng),
        a,
        a * rng.random_range(0.7..1.0),
        rng.random_range(0.0..std::f64::consts::PI),
    );
    let lumen_ellipse = lumen_inside(rng, &media_ellipse);
    let media = ellipse_to_mask(&media_ellipse, size, size);
    let lumen = ellipse_to_mask(&lumen_ellipse, size, size);

    let speckle = Normal::new(0.0, SPECKLE_STD).unwrap();
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let pixels = lumen
        .bits
        .iter()
        .zip(&media.bits)
        .map(|(&l, &m)| {
            let level = if l {
                LUMEN_LEVEL
            } else if m {
                MEDIA_LEVEL
            } else {
                BACKGROUND_LEVEL
            };
            let v = level * (1.0 + speckle.sample(rng)) + noise.sample(rng);
            // stored at 8 bits, so keep the in-memory copy identical
            (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
        })
        .collect();
    Phantom {
        image: GrayImage::new(size, size, pixels).expect("size is positive"),
        lumen,
        media,
        lumen_ellipse,
        media_ellipse,
    }
}

/// Writes `count` phantoms plus `manifest.tsv` into `dir`. The last
/// `test_count` frames are marked as test split. Phantom `i` depends only on
/// `(seed, i)`.
pub fn synth_phantoms(
    dir: impl AsRef<Path>,
    seed: u64,
    count: usize,
    size: usize,
    test_count: usize,
) -> Result<Vec<FrameRecord>> {
    if size == 0 || size % SIZE_MULTIPLE != 0 {
        return Err(Error::config(format!(
            "phantom size must be a positive multiple of {SIZE_MULTIPLE}, got {size}"
        )));
    }
    if count == 0 {
        return Err(Error::config("phantom count must be at least 1"));
    }
    if test_count > count {
        return Err(Error::config(format!(
            "test count {test_count} exceeds phantom count {count}"
        )));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let p = generate_phantom(&mut rng, size);
        let record = FrameRecord {
            image: dir.join(format!("img_{i:04}.pgm")),
            lumen_mask: dir.join(format!("lum_{i:04}.pgm")),
            media_mask: dir.join(format!("med_{i:04}.pgm")),
            category: Category::None,
            split: if i >= count - test_count { Split::Test } else { Split::Train },
        };
        write_pgm(&p.image, &record.image)?;
        write_mask(&p.lumen, &record.lumen_mask)?;
        write_mask(&p.media, &record.media_mask)?;
        records.push(record);
    }
    write_manifest(&records, dir.join("manifest.tsv"))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_manifest, read_mask, read_pgm};
    use crate::oracles::naive_ellipse_residual;

    #[test]
    fn lumen_within_media() {
        for seed in 0..20 {
            let p = generate_phantom(&mut ChaCha8Rng::seed_from_u64(seed), 64);
            assert!(p.lumen.is_subset_of(&p.media));
            assert!(p.lumen.count() > 20 && p.media.count() > p.lumen.count());
            assert!(p.image.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generator_ellipses_are_exact() {
        let p = generate_phantom(&mut ChaCha8Rng::seed_from_u64(1), 64);
        for e in [p.lumen_ellipse, p.media_ellipse] {
            let pts: Vec<(f64, f64)> = (0..40)
                .map(|k| e.point_at(std::f64::consts::TAU * k as f64 / 40.0))
                .collect();
            assert!(naive_ellipse_residual(e.cx, e.cy, e.a, e.b, e.theta, &pts) < 1e-9);
        }
    }

    #[test]
    fn writes_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let recs = synth_phantoms(dir.path(), 5, 16, 64, 4).unwrap();
        assert_eq!(recs.len(), 16);
        let loaded = load_manifest(dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(loaded, recs);
        assert_eq!(recs.iter().filter(|r| r.split == Split::Test).count(), 4);
        let img = read_pgm(&recs[3].image).unwrap();
        assert_eq!((img.width, img.height), (64, 64));
        let lum = read_mask(&recs[3].lumen_mask).unwrap();
        let med = read_mask(&recs[3].media_mask).unwrap();
        assert!(lum.is_subset_of(&med));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_phantoms(a.path(), 3, 3, 32, 0).unwrap();
        synth_phantoms(b.path(), 3, 3, 32, 0).unwrap();
        for name in ["img_0002.pgm", "lum_0001.pgm", "med_0000.pgm", "manifest.tsv"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn in_memory_matches_file() {
        let dir = tempfile::tempdir().unwrap();
        let recs = synth_phantoms(dir.path(), 8, 1, 32, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        rng.set_stream(0);
        let p = generate_phantom(&mut rng, 32);
        assert_eq!(read_pgm(&recs[0].image).unwrap(), p.image);
    }

    #[test]
    fn size_must_be_multiple_of_eight() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(synth_phantoms(dir.path(), 0, 2, 60, 0), Err(Error::Config(_))));
    }
}

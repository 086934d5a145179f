//! Multi-step workflows shared by the commands and the acceptance suite.

use std::path::Path;

use ivusnet::arch::{ArchConfig, Network};
use ivusnet::augment::AugmentConfig;
use ivusnet::data::{downsize_half, FrameRecord, GrayImage, ProbMap, Target};
use ivusnet::metrics::{evaluate, EvalFrame, EvalReport, Prediction};
use ivusnet::postprocess::{
    contour_points_for, ellipse_to_contour, ellipse_to_mask, extract_contour, Extraction,
};
use ivusnet::train::{ensemble_map, load_frames, train_model, TrainConfig, TrainFrame, TrainHistory};
use ivusnet::Result;

/// Ensemble output for one frame.
#[derive(Clone, Debug)]
pub struct FramePrediction {
    /// At the resolution the models saw.
    pub prob: ProbMap,
    /// At the input image's resolution.
    pub extraction: Extraction,
}

/// Ensemble probability map, computed on a half-size copy when `half`.
pub fn predict_prob(models: &[Network<f32>], image: &GrayImage, half: bool) -> Result<ProbMap> {
    if half {
        ensemble_map(models, &downsize_half(image)?)
    } else {
        ensemble_map(models, image)
    }
}

/// Contour extraction on `prob`. With `half`, the ellipse fitted at the map's
/// resolution is scaled back up to `width x height`.
pub fn extract_full_res(prob: &ProbMap, width: usize, height: usize, threshold: f32, half: bool) -> Result<Extraction> {
    let small = extract_contour(prob, threshold)?;
    if !half {
        return Ok(small);
    }
    let ellipse = small.ellipse.upscale2();
    Ok(Extraction {
        contour: ellipse_to_contour(&ellipse, contour_points_for(&ellipse)),
        mask: ellipse_to_mask(&ellipse, width, height),
        ellipse,
        raw_mask: small.raw_mask,
    })
}

/// Ensemble map followed by contour extraction.
pub fn predict_frame(models: &[Network<f32>], image: &GrayImage, threshold: f32, half: bool) -> Result<FramePrediction> {
    let prob = predict_prob(models, image, half)?;
    let extraction = extract_full_res(&prob, image.width, image.height, threshold, half)?;
    Ok(FramePrediction { prob, extraction })
}

/// Model `i` of a replica group uses seed `base + i` for weights,
/// validation choice and augmentation.
pub fn replica_configs(tcfg: &TrainConfig, acfg: &AugmentConfig, base: u64, i: usize) -> (TrainConfig, AugmentConfig) {
    let seed = base.wrapping_add(i as u64);
    (
        TrainConfig { seed, ..tcfg.clone() },
        AugmentConfig { seed, ..acfg.clone() },
    )
}

/// Trains `count` replicas.
pub fn train_ensemble(
    frames: &[TrainFrame],
    arch: &ArchConfig,
    tcfg: &TrainConfig,
    acfg: &AugmentConfig,
    count: usize,
    base_seed: u64,
) -> Result<Vec<(Network<f32>, TrainHistory)>> {
    (0..count)
        .map(|i| {
            let (t, a) = replica_configs(tcfg, acfg, base_seed, i);
            train_model(frames, arch, &t, &a, |_| {})
        })
        .collect()
}

/// Predicts every record for both targets with the given model groups and
/// scores the final ellipses. Frames whose extraction fails get an empty
/// mask and no contour, so they fail evaluation with their id.
pub fn evaluate_models(
    records: &[FrameRecord],
    models: [&[Network<f32>]; 2],
    threshold: f32,
    half: bool,
    spacing_mm: f64,
) -> Result<EvalReport> {
    let mut frames = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let image = r.load_image()?;
        let truth = [
            r.load_mask(Target::Lumen, image.width, image.height)?,
            r.load_mask(Target::Media, image.width, image.height)?,
        ];
        let mut pred = [None, None];
        for k in 0..2 {
            pred[k] = match predict_frame(models[k], &image, threshold, half) {
                Ok(p) => Some(Prediction {
                    mask: p.extraction.mask,
                    contour: p.extraction.contour.points,
                }),
                Err(ivusnet::Error::EmptyRegion { .. } | ivusnet::Error::Fit(_)) => None,
                Err(e) => return Err(e),
            };
        }
        frames.push(EvalFrame {
            id: format!("{i} ({})", r.image.display()),
            category: r.category,
            truth,
            pred,
        });
    }
    evaluate(&frames, spacing_mm)
}

/// Training frames of one target from a manifest's records.
pub fn frames_for(records: &[FrameRecord], target: Target, half: bool) -> Result<Vec<TrainFrame>> {
    load_frames(records, target, half)
}

/// `x,y` rows with a header.
pub fn contour_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("x,y\n");
    for (x, y) in points {
        out.push_str(&format!("{x:.6},{y:.6}\n"));
    }
    out
}

pub fn read_contour_csv(path: &Path) -> anyhow::Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed = line
            .split_once(',')
            .and_then(|(x, y)| Some((x.trim().parse().ok()?, y.trim().parse().ok()?)));
        match parsed {
            Some(p) => points.push(p),
            None => anyhow::bail!("{}: line {} is not an x,y pair", path.display(), i + 1),
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contour_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let pts = vec![(1.5, 2.25), (-3.0, 0.125)];
        std::fs::write(&path, contour_csv(&pts)).unwrap();
        assert_eq!(read_contour_csv(&path).unwrap(), pts);
        std::fs::write(&path, "x,y\n1,zz\n").unwrap();
        assert!(read_contour_csv(&path).is_err());
    }

    #[test]
    fn replica_seeds_offset() {
        let (t, a) = replica_configs(&TrainConfig::default(), &AugmentConfig::default(), 40, 2);
        assert_eq!((t.seed, a.seed), (42, 42));
    }
}

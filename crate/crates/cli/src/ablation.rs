//! Paired comparisons of a baseline against the refine-less and
//! augmentation-free variants.

use ivusnet::arch::{ArchConfig, Network};
use ivusnet::augment::AugmentConfig;
use ivusnet::data::{FrameRecord, Target};
use ivusnet::metrics::jaccard;
use ivusnet::train::{TrainConfig, TrainFrame};
use ivusnet::Result;

use crate::pipeline::{predict_frame, train_ensemble};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    NoRefine,
    NoAugment,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Baseline, Arm::NoRefine, Arm::NoAugment];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::NoRefine => "no_refine",
            Arm::NoAugment => "no_aug",
        }
    }

    pub fn configure(self, arch: &ArchConfig, acfg: &AugmentConfig) -> (ArchConfig, AugmentConfig) {
        match self {
            Arm::Baseline => (arch.clone(), acfg.clone()),
            Arm::NoRefine => (arch.clone().without_refine(), acfg.clone()),
            Arm::NoAugment => (arch.clone(), AugmentConfig { enabled: false, ..acfg.clone() }),
        }
    }
}

/// Mean final-ellipse JM of an ensemble over `records`. A frame whose
/// extraction fails scores 0.
pub fn heldout_jm(records: &[FrameRecord], models: &[Network<f32>], target: Target, threshold: f32, half: bool) -> Result<f64> {
    let mut total = 0.0;
    for r in records {
        let image = r.load_image()?;
        let truth = r.load_mask(target, image.width, image.height)?;
        total += match predict_frame(models, &image, threshold, half) {
            Ok(p) => jaccard(&p.extraction.mask, &truth)?,
            Err(ivusnet::Error::EmptyRegion { .. } | ivusnet::Error::Fit(_)) => 0.0,
            Err(e) => return Err(e),
        };
    }
    Ok(total / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub jm: f64,
}

pub struct AblationSetup<'a> {
    pub train: &'a [TrainFrame],
    pub test: &'a [FrameRecord],
    pub target: Target,
    pub arch: ArchConfig,
    pub tcfg: TrainConfig,
    pub acfg: AugmentConfig,
    pub models_per_arm: usize,
    pub threshold: f32,
    pub half: bool,
}

/// Trains every arm for every seed. Replica `i` of seed `s` starts from seed
/// `s * 1000 + i` in all arms, so arms differ only in the ablated factor.
pub fn run_ablation(setup: &AblationSetup<'_>, arms: &[Arm], seeds: &[u64], mut progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &arm in arms {
            let (arch, acfg) = arm.configure(&setup.arch, &setup.acfg);
            let models: Vec<Network<f32>> = train_ensemble(
                setup.train,
                &arch,
                &setup.tcfg,
                &acfg,
                setup.models_per_arm,
                seed.wrapping_mul(1000),
            )?
            .into_iter()
            .map(|(m, _)| m)
            .collect();
            let jm = heldout_jm(setup.test, &models, setup.target, setup.threshold, setup.half)?;
            let row = AblationRow { arm, seed, jm };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// `arm,seed,jm` rows.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("arm,seed,jm\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6}\n", r.arm.as_str(), r.seed, r.jm));
    }
    out
}

/// Mean JM of one arm over all seeds.
pub fn arm_mean(rows: &[AblationRow], arm: Arm) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.arm == arm).map(|r| r.jm).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

//! Jaccard measure, Hausdorff distance and per-category summaries.

use std::fmt::Write as _;

use crate::data::{BinaryMask, Category, Target};
use crate::error::{Error, Result};
use crate::postprocess::{trace_boundary, Point};

/// `|P ∩ T| / |P ∪ T|`, with two empty masks scoring 1.
pub fn jaccard(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    if (pred.width, pred.height) != (truth.width, truth.height) {
        return Err(Error::contract(format!(
            "jaccard of {}x{} and {}x{} masks",
            pred.width, pred.height, truth.width, truth.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.bits.iter().zip(&truth.bits) {
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Largest distance from a point of `a` to its nearest point of `b`.
pub fn directed_hausdorff(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("hausdorff distance of an empty contour"));
    }
    let mut worst = 0.0f64;
    for &(ax, ay) in a {
        let mut nearest = f64::INFINITY;
        for &(bx, by) in b {
            nearest = nearest.min((ax - bx).powi(2) + (ay - by).powi(2));
            if nearest <= worst {
                // cannot raise the maximum
                break;
            }
        }
        worst = worst.max(nearest);
    }
    Ok(worst.sqrt())
}

/// Symmetric Hausdorff distance scaled by `spacing_mm`.
pub fn hausdorff(a: &[Point], b: &[Point], spacing_mm: f64) -> Result<f64> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?) * spacing_mm)
}

/// Final segmentation of one frame for one target.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mask: BinaryMask,
    pub contour: Vec<Point>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameScore {
    pub jm: f64,
    pub hd: f64,
}

/// Scores a prediction against a truth mask; the truth contour is its traced
/// boundary.
pub fn score_frame(pred: &Prediction, truth: &BinaryMask, spacing_mm: f64) -> Result<FrameScore> {
    let truth_contour = trace_boundary(truth)?;
    Ok(FrameScore {
        jm: jaccard(&pred.mask, truth)?,
        hd: hausdorff(&pred.contour, &truth_contour.points, spacing_mm)?,
    })
}

/// Everything needed to score one test frame.
#[derive(Clone, Debug)]
pub struct EvalFrame {
    pub id: String,
    pub category: Category,
    /// Lumen then media.
    pub truth: [BinaryMask; 2],
    pub pred: [Option<Prediction>; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub target: Target,
    /// `None` is the all-frames row.
    pub category: Option<Category>,
    pub n: usize,
    pub jm_mean: f64,
    pub jm_std: f64,
    pub hd_mean: f64,
    pub hd_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pixel_spacing_mm: f64,
    /// Per target: the all row, then each non-empty category in fixed order.
    pub rows: Vec<ReportRow>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `"0.90 (0.06)"`.
pub fn mean_std_cell(mean: f64, std: f64) -> String {
    format!("{mean:.2} ({std:.2})")
}

fn category_label(c: Option<Category>) -> &'static str {
    match c {
        None => "All",
        Some(Category::None) => "No Artifact",
        Some(Category::Bifurcation) => "Bifurcation",
        Some(Category::SideVessel) => "Side Vessels",
        Some(Category::Shadow) => "Shadow",
    }
}

impl EvalReport {
    /// Aggregates per-frame scores given as `(target, category, score)`.
    pub fn from_scores(scores: &[(Target, Category, FrameScore)], pixel_spacing_mm: f64) -> Self {
        let mut rows = Vec::new();
        for target in Target::ALL {
            let groups = std::iter::once(None).chain(Category::ALL.into_iter().map(Some));
            for category in groups {
                let picked: Vec<&FrameScore> = scores
                    .iter()
                    .filter(|(t, c, _)| *t == target && category.is_none_or(|k| k == *c))
                    .map(|(_, _, s)| s)
                    .collect();
                if picked.is_empty() {
                    continue;
                }
                let jm: Vec<f64> = picked.iter().map(|s| s.jm).collect();
                let hd: Vec<f64> = picked.iter().map(|s| s.hd).collect();
                let (jm_mean, jm_std) = mean_std(&jm);
                let (hd_mean, hd_std) = mean_std(&hd);
                rows.push(ReportRow {
                    target,
                    category,
                    n: picked.len(),
                    jm_mean,
                    jm_std,
                    hd_mean,
                    hd_std,
                });
            }
        }
        EvalReport { pixel_spacing_mm, rows }
    }

    pub fn row(&self, target: Target, category: Option<Category>) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.target == target && r.category == category)
    }

    /// Aligned table: one line per category, JM and HD columns per target.
    pub fn to_text(&self) -> String {
        let unit = if self.pixel_spacing_mm == 1.0 { "px" } else { "mm" };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14}{:>5}  {:<14}{:<14}{:<14}{:<14}",
            "Category",
            "n",
            "Lumen JM",
            format!("Lumen HD({unit})"),
            "Media JM",
            format!("Media HD({unit})")
        );
        let groups = std::iter::once(None).chain(Category::ALL.into_iter().map(Some));
        for category in groups {
            let cells: Vec<Option<&ReportRow>> =
                Target::ALL.iter().map(|&t| self.row(t, category)).collect();
            let Some(n) = cells.iter().flatten().map(|r| r.n).next() else {
                continue;
            };
            let _ = write!(out, "{:<14}{:>5}  ", category_label(category), n);
            for cell in cells {
                match cell {
                    Some(r) => {
                        let _ = write!(
                            out,
                            "{:<14}{:<14}",
                            mean_std_cell(r.jm_mean, r.jm_std),
                            mean_std_cell(r.hd_mean, r.hd_std)
                        );
                    }
                    None => {
                        let _ = write!(out, "{:<14}{:<14}", "-", "-");
                    }
                }
            }
            out = out.trim_end().to_string();
            out.push('\n');
        }
        out
    }

    /// `target,category,n,jm_mean,jm_std,hd_mean,hd_std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target,category,n,jm_mean,jm_std,hd_mean,hd_std\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.target.as_str(),
                r.category.map_or("all", Category::as_str),
                r.n,
                r.jm_mean,
                r.jm_std,
                r.hd_mean,
                r.hd_std
            );
        }
        out
    }
}

/// Scores every frame for both targets. A missing prediction aborts with the
/// frame id.
pub fn evaluate(frames: &[EvalFrame], pixel_spacing_mm: f64) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(2 * frames.len());
    for frame in frames {
        for (k, target) in Target::ALL.into_iter().enumerate() {
            let pred = frame.pred[k].as_ref().ok_or_else(|| {
                Error::contract(format!(
                    "missing {} prediction for frame {}",
                    target.as_str(),
                    frame.id
                ))
            })?;
            let score = score_frame(pred, &frame.truth[k], pixel_spacing_mm)?;
            scores.push((target, frame.category, score));
        }
    }
    Ok(EvalReport::from_scores(&scores, pixel_spacing_mm))
}

//! From probability map to vessel contour.
//!
//! The map is thresholded, reduced to its largest 8-connected component and
//! traced with Moore-neighbour tracing. An ellipse is fitted to the traced
//! boundary and becomes the final segmentation: its rasterized interior is
//! the mask and its sampled outline is the contour.
//!
//! Coordinates are `(x, y)` = (column, row) with pixel centres on integers.

use std::collections::HashSet;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use crate::data::{BinaryMask, ProbMap};
use crate::error::{Error, Result};

pub type Point = (f64, f64);

/// Closed, ordered point list.
#[derive(Clone, Debug, PartialEq)]
pub struct Contour {
    pub points: Vec<Point>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllipseParams {
    pub cx: f64,
    pub cy: f64,
    /// Semi-major axis.
    pub a: f64,
    /// Semi-minor axis.
    pub b: f64,
    /// Major-axis angle from +x toward +y, in `[0, pi)`.
    pub theta: f64,
}

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Minimum number of samples on a generated contour.
pub const MIN_CONTOUR_POINTS: usize = 64;

impl EllipseParams {
    /// Builds canonical parameters: swaps axes so `a >= b` and wraps `theta`.
    pub fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Self {
        let (a, b, theta) = if b > a { (b, a, theta + PI / 2.0) } else { (a, b, theta) };
        let mut theta = theta.rem_euclid(PI);
        if theta >= PI {
            theta = 0.0;
        }
        EllipseParams { cx, cy, a, b, theta }
    }

    /// `(x'/a)^2 + (y'/b)^2` in the ellipse frame; `<= 1` is inside.
    pub fn implicit(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    pub fn point_at(&self, t: f64) -> Point {
        let (s, c) = self.theta.sin_cos();
        let (u, v) = (self.a * t.cos(), self.b * t.sin());
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }

    /// Ramanujan's approximation.
    pub fn perimeter(&self) -> f64 {
        let (a, b) = (self.a, self.b);
        let h = ((a - b) / (a + b)).powi(2);
        PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
    }

    /// Maps parameters fitted at half resolution back to full resolution.
    pub fn upscale2(&self) -> Self {
        EllipseParams {
            cx: 2.0 * self.cx + 0.5,
            cy: 2.0 * self.cy + 0.5,
            a: 2.0 * self.a,
            b: 2.0 * self.b,
            theta: self.theta,
        }
    }
}

/// Pixels with probability `>= threshold` become foreground.
pub fn binarize(map: &ProbMap, threshold: f32) -> BinaryMask {
    BinaryMask {
        width: map.width,
        height: map.height,
        bits: map.values.iter().map(|&p| p >= threshold).collect(),
    }
}

const NEIGHBOURS8: [(i64, i64); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

/// Keeps the largest 8-connected component. Equal sizes go to the component
/// whose first pixel comes first in row-major order.
pub fn largest_component(mask: &BinaryMask) -> Result<BinaryMask> {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![0u32; w * h];
    let mut best = (0usize, 0u32);
    let mut next = 1u32;
    let mut stack = Vec::new();
    for seed in 0..w * h {
        if !mask.bits[seed] || label[seed] != 0 {
            continue;
        }
        label[seed] = next;
        stack.push(seed);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for (dx, dy) in NEIGHBOURS8 {
                let (nx, ny) = (x + dx, y + dy);
                if mask.get_signed(nx, ny) {
                    let j = ny as usize * w + nx as usize;
                    if label[j] == 0 {
                        label[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
        next += 1;
    }
    if best.0 == 0 {
        return Err(Error::EmptyRegion { stage: "component" });
    }
    Ok(BinaryMask {
        width: w,
        height: h,
        bits: label.iter().map(|&l| l == best.1).collect(),
    })
}

/// Moore-neighbour tracing, clockwise on screen (y down), from the first
/// foreground pixel in row-major order, whose west neighbour is the initial
/// backtrack. Stops by Jacob's criterion: leaving the start pixel again in
/// the same state as the first step.
pub fn trace_boundary(mask: &BinaryMask) -> Result<Contour> {
    let start = mask
        .bits
        .iter()
        .position(|&b| b)
        .ok_or(Error::EmptyRegion { stage: "trace" })?;
    let start = ((start % mask.width) as i64, (start / mask.width) as i64);
    let step = |p: (i64, i64), back: usize| {
        (1..8).find_map(|k| {
            let d = (back + k) % 8;
            let q = (p.0 + NEIGHBOURS8[d].0, p.1 + NEIGHBOURS8[d].1);
            if !mask.get_signed(q.0, q.1) {
                return None;
            }
            // the last background cell examined becomes the new backtrack
            let prev = (back + k - 1) % 8;
            let b = (p.0 + NEIGHBOURS8[prev].0, p.1 + NEIGHBOURS8[prev].1);
            let back = NEIGHBOURS8
                .iter()
                .position(|&(dx, dy)| (q.0 + dx, q.1 + dy) == b)
                .expect("consecutive ring neighbours are adjacent");
            Some((q, back))
        })
    };
    let mut points = vec![(start.0 as f64, start.1 as f64)];
    let Some(first) = step(start, 0) else {
        // isolated pixel
        return Ok(Contour { points });
    };
    let mut state = first;
    let limit = 4 * mask.width * mask.height + 8;
    for _ in 0..limit {
        let (p, back) = state;
        points.push((p.0 as f64, p.1 as f64));
        state = step(p, back).expect("a pixel with a neighbour keeps one");
        if p == start && state == first {
            points.pop();
            return Ok(Contour { points });
        }
    }
    Err(Error::contract("boundary tracing did not close"))
}

/// Midpoints of the pixel edges between `contour` pixels and their
/// 4-connected background neighbours, in contour order without repeats.
pub fn crack_points(mask: &BinaryMask, contour: &Contour) -> Vec<Point> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for &(x, y) in &contour.points {
        let (x, y) = (x as i64, y as i64);
        for (dx, dy) in [(0, -1), (1, 0), (0, 1), (-1, 0)] {
            if !mask.get_signed(x + dx, y + dy) && seen.insert((2 * x + dx, 2 * y + dy)) {
                out.push((x as f64 + 0.5 * dx as f64, y as f64 + 0.5 * dy as f64));
            }
        }
    }
    out
}

/// Null vector of a rank-2 3x3 matrix: the longest cross product of two rows.
fn null_vector(m: &Matrix3<f64>) -> Vector3<f64> {
    let rows = [m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose()];
    [(0, 1), (0, 2), (1, 2)]
        .iter()
        .map(|&(i, j)| rows[i].cross(&rows[j]))
        .max_by(|u, v| u.norm_squared().total_cmp(&v.norm_squared()))
        .unwrap()
}

/// Direct least-squares ellipse fit with the `4AC - B^2 = 1` constraint,
/// solved on centred, scale-normalized coordinates.
pub fn fit_ellipse(points: &[Point]) -> Result<EllipseParams> {
    let n = points.len();
    if n < 6 {
        return Err(Error::Fit(format!("need at least 6 points, got {n}")));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let spread = points
        .iter()
        .map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt())
        .sum::<f64>()
        / nf;
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::Fit("points are coincident or not finite".into()));
    }
    let s = std::f64::consts::SQRT_2 / spread;

    // scatter blocks of [x^2, xy, y^2] and [x, y, 1]
    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for &(px, py) in points {
        let (x, y) = ((px - mx) * s, (py - my) * s);
        let q = Vector3::new(x * x, x * y, y * y);
        let l = Vector3::new(x, y, 1.0);
        s1 += q * q.transpose();
        s2 += q * l.transpose();
        s3 += l * l.transpose();
    }
    let s3_inv = s3
        .try_inverse()
        .ok_or_else(|| Error::Fit("points are collinear".into()))?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // premultiply by the inverse constraint matrix
    let reduced = Matrix3::new(
        m[(2, 0)] / 2.0,
        m[(2, 1)] / 2.0,
        m[(2, 2)] / 2.0,
        -m[(1, 0)],
        -m[(1, 1)],
        -m[(1, 2)],
        m[(0, 0)] / 2.0,
        m[(0, 1)] / 2.0,
        m[(0, 2)] / 2.0,
    );
    let scale = reduced.abs().max().max(f64::MIN_POSITIVE);
    let conic = reduced
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-9 * scale)
        .filter_map(|z| {
            let v = null_vector(&(reduced - Matrix3::identity() * z.re));
            let constraint = 4.0 * v[0] * v[2] - v[1] * v[1];
            (constraint > 0.0 && v.norm() > 0.0).then_some((z.re.abs(), v))
        })
        .min_by(|p, q| p.0.total_cmp(&q.0))
        .map(|(_, v)| v)
        .ok_or_else(|| Error::Fit("no elliptical solution".into()))?;
    let lin = t * conic;
    let e = conic_to_params([conic[0], conic[1], conic[2], lin[0], lin[1], lin[2]])?;
    Ok(EllipseParams::new(
        e.cx / s + mx,
        e.cy / s + my,
        e.a / s,
        e.b / s,
        e.theta,
    ))
}

/// Geometric parameters of `A x^2 + B xy + C y^2 + D x + E y + F = 0`.
fn conic_to_params(k: [f64; 6]) -> Result<EllipseParams> {
    let [a, b, c, d, e, f] = k;
    let det = 4.0 * a * c - b * b;
    if det <= 0.0 {
        return Err(Error::Fit("conic is not an ellipse".into()));
    }
    let cx = (b * e - 2.0 * c * d) / det;
    let cy = (b * d - 2.0 * a * e) / det;
    let mut f0 = f + 0.5 * (d * cx + e * cy);
    let (mut a, mut b, mut c) = (a, b, c);
    if f0 > 0.0 {
        (a, b, c, f0) = (-a, -b, -c, -f0);
    }
    let mean = 0.5 * (a + c);
    let root = (0.25 * (a - c).powi(2) + 0.25 * b * b).sqrt();
    let (lo, hi) = (mean - root, mean + root);
    if !(lo > 0.0 && f0 < 0.0) {
        return Err(Error::Fit("conic is imaginary or degenerate".into()));
    }
    let major = (-f0 / lo).sqrt();
    let minor = (-f0 / hi).sqrt();
    // 0.5 * atan2(B, A - C) points along the larger eigenvalue, the minor axis
    let theta = 0.5 * b.atan2(a - c) + PI / 2.0;
    let params = EllipseParams::new(cx, cy, major, minor, theta);
    if [params.cx, params.cy, params.a, params.b, params.theta]
        .iter()
        .all(|v| v.is_finite())
    {
        Ok(params)
    } else {
        Err(Error::Fit("non-finite ellipse parameters".into()))
    }
}

/// `n` points at uniform parameter spacing.
pub fn ellipse_to_contour(e: &EllipseParams, n: usize) -> Contour {
    let n = n.max(8);
    Contour {
        points: (0..n)
            .map(|k| e.point_at(2.0 * PI * k as f64 / n as f64))
            .collect(),
    }
}

/// Pixels whose centres satisfy the implicit inequality.
pub fn ellipse_to_mask(e: &EllipseParams, width: usize, height: usize) -> BinaryMask {
    BinaryMask {
        width,
        height,
        bits: (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| e.implicit(x as f64, y as f64) <= 1.0)
            .collect(),
    }
}

/// Sample count used for generated contours.
pub fn contour_points_for(e: &EllipseParams) -> usize {
    MIN_CONTOUR_POINTS.max((2.0 * e.perimeter()).ceil() as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub contour: Contour,
    pub ellipse: EllipseParams,
    pub mask: BinaryMask,
    /// Largest thresholded component, before ellipse fitting.
    pub raw_mask: BinaryMask,
}

/// Threshold, largest component, trace, fit.
pub fn extract_contour(map: &ProbMap, threshold: f32) -> Result<Extraction> {
    let raw_mask = largest_component(&binarize(map, threshold))?;
    let traced = trace_boundary(&raw_mask)?;
    let ellipse = fit_ellipse(&crack_points(&raw_mask, &traced))?;
    Ok(Extraction {
        contour: ellipse_to_contour(&ellipse, contour_points_for(&ellipse)),
        mask: ellipse_to_mask(&ellipse, map.width, map.height),
        ellipse,
        raw_mask,
    })
}

//! Brute-force reference implementations for tests.
//!
//! Everything here works on plain slices and tuples and uses nothing from the
//! library, so a bug in a production kernel cannot leak into its oracle.

use std::collections::HashSet;

/// Quadruple-loop cross-correlation with zero padding.
/// `x` is `(n, cin, h, w)`, `w` is `(cout, cin, kh, kw)`.
pub fn naive_conv2d(
    x: &[f32],
    xs: [usize; 4],
    w: &[f32],
    ws: [usize; 4],
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let [n, cin, h, wd] = xs;
    let [cout, wcin, kh, kw] = ws;
    assert_eq!(cin, wcin, "channel mismatch");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f64; n * cout * ho * wo];
    for s in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co] as f64;
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((s * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((co * cin + ci) * kh + ki) * kw + kj];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((s * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// |A ∩ B| / |A ∪ B| by building both pixel sets explicitly; 1.0 when both are empty.
pub fn naive_jaccard(pred: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "dimension mismatch");
    let a: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i]).collect();
    let b: HashSet<usize> = (0..truth.len()).filter(|&i| truth[i]).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Symmetric Hausdorff distance by scanning all point pairs.
pub fn naive_hausdorff(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "empty point set");
    let directed = |p: &[(f64, f64)], q: &[(f64, f64)]| {
        let mut worst = 0.0f64;
        for &(px, py) in p {
            let mut best = f64::INFINITY;
            for &(qx, qy) in q {
                let d = ((px - qx) * (px - qx) + (py - qy) * (py - qy)).sqrt();
                if d < best {
                    best = d;
                }
            }
            if best > worst {
                worst = best;
            }
        }
        worst
    };
    directed(a, b).max(directed(b, a))
}

/// Largest |(x'/a)^2 + (y'/b)^2 - 1| over the points, where (x', y') are the
/// point coordinates in the ellipse's own frame.
pub fn naive_ellipse_residual(
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    points: &[(f64, f64)],
) -> f64 {
    let mut worst = 0.0f64;
    for &(x, y) in points {
        let dx = x - cx;
        let dy = y - cy;
        let u = dx * theta.cos() + dy * theta.sin();
        let v = -dx * theta.sin() + dy * theta.cos();
        let r = (u / a) * (u / a) + (v / b) * (v / b) - 1.0;
        if r.abs() > worst {
            worst = r.abs();
        }
    }
    worst
}

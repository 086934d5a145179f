//! 2-d convolution (cross-correlation) and the 2x2 stride-2 transposed
//! convolution, both lowered to GEMM through an im2col buffer.

use crate::autograd::{channel_sums, Backward, BackwardCtx, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Element, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on every side; keeps `H x W` at stride 1.
    SameZero,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub const SAME: ConvSpec = ConvSpec {
        stride: 1,
        padding: Padding::SameZero,
    };

    /// The 2x2 stride-2 downsampling convolution.
    pub const DOWN: ConvSpec = ConvSpec {
        stride: 2,
        padding: Padding::Valid,
    };
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &[usize], weight: &[usize], spec: ConvSpec) -> Result<Self> {
        let [n, cin, h, w] = *x else {
            return Err(Error::dim(format!("conv2d input must be 4-d, got {x:?}")));
        };
        let [cout, wcin, kh, kw] = *weight else {
            return Err(Error::dim(format!("conv2d weight must be 4-d, got {weight:?}")));
        };
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv2d weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if spec.stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        let pad = match spec.padding {
            Padding::SameZero => {
                if spec.stride != 1 || kh % 2 == 0 || kw % 2 == 0 || kh != kw {
                    return Err(Error::contract(
                        "same-zero padding needs stride 1 and an odd square kernel",
                    ));
                }
                (kh - 1) / 2
            }
            Padding::Valid => 0,
        };
        if spec.stride > 1 && (h % spec.stride != 0 || w % spec.stride != 0) {
            return Err(Error::dim(format!(
                "stride-{} convolution needs spatial dims divisible by {}, got {h}x{w}",
                spec.stride, spec.stride
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(format!(
                "{kh}x{kw} kernel does not fit a {h}x{w} input"
            )));
        }
        let ho = (h + 2 * pad - kh) / spec.stride + 1;
        let wo = (w + 2 * pad - kw) / spec.stride + 1;
        Ok(Geometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride: spec.stride,
            pad,
            ho,
            wo,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1 stride-1 convolution reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Maps an output coordinate and kernel offset to an input coordinate.
    fn src(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&i| i < size)
    }
}

/// Unfolds one sample `(cin, h, w)` into `(cin*kh*kw, ho*wo)`.
fn im2col<T: Element>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let chan = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.src(oy, ki, g.h) else {
                        line.fill(T::zero());
                        continue;
                    };
                    let src = &chan[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        // valid ox range: 0 <= ox + kj - pad < w
                        let lo = g.pad.saturating_sub(kj).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(kj).min(g.wo);
                        line[..lo].fill(T::zero());
                        if hi > lo {
                            let start = lo + kj - g.pad;
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                        line[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            *v = g.src(ox, kj, g.w).map_or(T::zero(), |ix| src[ix]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into one sample.
fn col2im<T: Element>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let chan = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut chan[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kj).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(kj).min(g.wo);
                        if hi > lo {
                            let start = lo + kj - g.pad;
                            for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&line[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ox, &v) in line.iter().enumerate() {
                            if let Some(ix) = g.src(ox, kj, g.w) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x.shape(), weight.shape(), spec)?;
    if bias.shape() != [g.cout] {
        return Err(Error::dim(format!(
            "conv2d bias must have shape [{}], got {:?}",
            g.cout,
            bias.shape()
        )));
    }
    let (k, plane, in_size) = (g.k(), g.out_plane(), g.cin * g.h * g.w);
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    let wmat = MatRef::new(weight.data(), g.cout, k);
    for s in 0..g.n {
        let xs = &x.data()[s * in_size..(s + 1) * in_size];
        let dst = &mut out[s * g.cout * plane..(s + 1) * g.cout * plane];
        for (co, chunk) in dst.chunks_exact_mut(plane).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        let colmat = if g.is_pointwise() {
            MatRef::new(xs, k, plane)
        } else {
            im2col(xs, &g, &mut cols);
            MatRef::new(&cols, k, plane)
        };
        matmul(wmat, colmat, dst, T::one());
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], out))
}

struct Conv2dRule {
    spec: ConvSpec,
}

impl<T: Element> Backward<T> for Conv2dRule {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, weight) = (ctx.inputs[0], ctx.inputs[1]);
        let g = Geometry::new(x.shape(), weight.shape(), self.spec)?;
        let (k, plane, in_size) = (g.k(), g.out_plane(), g.cin * g.h * g.w);
        let out_size = g.cout * plane;
        let dy = ctx.grad.data();

        let mut dw = ctx.needs[1].then(|| vec![T::zero(); weight.len()]);
        let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * plane }];
        let mut dcols = vec![T::zero(); if dx.is_some() && !g.is_pointwise() { k * plane } else { 0 }];
        let wmat = MatRef::new(weight.data(), g.cout, k);

        for s in 0..g.n {
            let dys = MatRef::new(&dy[s * out_size..(s + 1) * out_size], g.cout, plane);
            let xs = &x.data()[s * in_size..(s + 1) * in_size];
            if let Some(dw) = dw.as_mut() {
                let colmat = if g.is_pointwise() {
                    MatRef::new(xs, k, plane)
                } else {
                    im2col(xs, &g, &mut cols);
                    MatRef::new(&cols, k, plane)
                };
                // dW += dY * cols^T
                matmul(dys, colmat.t(), dw, T::one());
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[s * in_size..(s + 1) * in_size];
                if g.is_pointwise() {
                    matmul(wmat.t(), dys, dxs, T::zero());
                } else {
                    matmul(wmat.t(), dys, &mut dcols, T::zero());
                    col2im(&dcols, &g, dxs);
                }
            }
        }
        let db = ctx.needs[2].then(|| {
            Tensor::from_parts(vec![g.cout], channel_sums(dy, g.n, g.cout, plane))
        });
        Ok(vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
            db,
        ])
    }
}

/// Transposed 2x2 stride-2 convolution. Weight layout is
/// `(in_channels, out_channels, 2, 2)`; output is `(N, out, 2H, 2W)`.
pub(crate) fn deconv2x2_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, _) = deconv_dims(cin, weight, bias)?;
    let plane = h * w;
    let mut out = vec![T::zero(); n * cout * 4 * plane];
    let mut taps = vec![T::zero(); cout * 4 * plane];
    // taps (cout*4, HW) = W^T (cout*4, cin) * X (cin, HW)
    let wmat = MatRef::new(weight.data(), cin, cout * 4).t();
    for s in 0..n {
        let xs = MatRef::new(&x.data()[s * cin * plane..(s + 1) * cin * plane], cin, plane);
        matmul(wmat, xs, &mut taps, T::zero());
        let dst = &mut out[s * cout * 4 * plane..(s + 1) * cout * 4 * plane];
        for co in 0..cout {
            let b = bias.data()[co];
            for d in 0..4 {
                let (di, dj) = (d / 2, d % 2);
                let tap = &taps[(co * 4 + d) * plane..(co * 4 + d + 1) * plane];
                for i in 0..h {
                    let row = &mut dst[(co * 2 * h + 2 * i + di) * 2 * w..][..2 * w];
                    for j in 0..w {
                        row[2 * j + dj] = tap[i * w + j] + b;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, cout, 2 * h, 2 * w], out))
}

fn deconv_dims<T: Element>(cin: usize, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    let [wcin, cout, kh, kw] = *weight.shape() else {
        return Err(Error::dim(format!(
            "deconv weight must be 4-d, got {:?}",
            weight.shape()
        )));
    };
    if (kh, kw) != (2, 2) {
        return Err(Error::contract(format!(
            "deconv2d_2x2 needs a 2x2 kernel, got {kh}x{kw}"
        )));
    }
    if wcin != cin {
        return Err(Error::dim(format!(
            "deconv weight expects {wcin} input channels, input has {cin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim(format!(
            "deconv bias must have shape [{cout}], got {:?}",
            bias.shape()
        )));
    }
    Ok((cout, cin))
}

struct Deconv2x2Rule;

impl<T: Element> Backward<T> for Deconv2x2Rule {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, weight) = (ctx.inputs[0], ctx.inputs[1]);
        let (n, cin, h, w) = x.dims4()?;
        let cout = weight.shape()[1];
        let plane = h * w;
        let dy = ctx.grad.data();

        let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dw = ctx.needs[1].then(|| vec![T::zero(); weight.len()]);
        let mut taps = vec![T::zero(); cout * 4 * plane];
        let wmat = MatRef::new(weight.data(), cin, cout * 4);
        for s in 0..n {
            // gather dY back into (cout*4, HW)
            let src = &dy[s * cout * 4 * plane..(s + 1) * cout * 4 * plane];
            for co in 0..cout {
                for d in 0..4 {
                    let (di, dj) = (d / 2, d % 2);
                    let tap = &mut taps[(co * 4 + d) * plane..(co * 4 + d + 1) * plane];
                    for i in 0..h {
                        let row = &src[(co * 2 * h + 2 * i + di) * 2 * w..][..2 * w];
                        for j in 0..w {
                            tap[i * w + j] = row[2 * j + dj];
                        }
                    }
                }
            }
            let tapmat = MatRef::new(&taps, cout * 4, plane);
            let xs = &x.data()[s * cin * plane..(s + 1) * cin * plane];
            if let Some(dx) = dx.as_mut() {
                // dX (cin, HW) = W (cin, cout*4) * taps
                matmul(wmat, tapmat, &mut dx[s * cin * plane..(s + 1) * cin * plane], T::zero());
            }
            if let Some(dw) = dw.as_mut() {
                // dW (cin, cout*4) += X (cin, HW) * taps^T
                matmul(MatRef::new(xs, cin, plane), tapmat.t(), dw, T::one());
            }
        }
        let db = ctx.needs[2]
            .then(|| Tensor::from_parts(vec![cout], channel_sums(dy, n, cout, 4 * plane)));
        Ok(vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
            db,
        ])
    }
}

impl<T: Element> Graph<T> {
    /// Cross-correlation of `x (N, Cin, H, W)` with `weight (Cout, Cin, kH, kW)` plus `bias [Cout]`.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let out = conv2d_forward(self.value(x), self.value(weight), self.value(bias), spec)?;
        self.push("conv2d", out, &[x, weight, bias], Conv2dRule { spec })
    }

    /// Transposed 2x2 stride-2 convolution; doubles `H` and `W`.
    pub fn deconv2x2(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = deconv2x2_forward(self.value(x), self.value(weight), self.value(bias))?;
        self.push("deconv2x2", out, &[x, weight, bias], Deconv2x2Rule)
    }
}

//! Forward and adjoint kernels behind the differentiable ops.
//!
//! Everything here works on raw [`Tensor`]s; the autograd layer decides when to call
//! the adjoint. Convolution goes through im2col and `matrixmultiply::dgemm`.

use crate::error::{ensure, Error, Result};
use crate::substrate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self { stride, pad, groups }
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

/// `floor((n + 2·pad − k)/stride) + 1`, or `None` when the window does not fit.
pub fn conv_out_len(n: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
    if stride == 0 || n + 2 * pad < k {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

pub fn conv2d_out_shape(x: &[usize], w: &[usize], g: ConvGeometry) -> Result<Vec<usize>> {
    let (&[b, c, h, wd], &[o, cg, kh, kw]) = (x, w) else {
        return Err(Error::shape(
            "conv2d",
            format!("expected 4-d input and weight, got {x:?} and {w:?}"),
        ));
    };
    ensure!(
        g.groups > 0 && c % g.groups == 0 && o % g.groups == 0,
        Error::shape(
            "conv2d",
            format!("groups={} must divide in={c} and out={o}", g.groups)
        )
    );
    ensure!(
        cg * g.groups == c,
        Error::shape(
            "conv2d",
            format!("weight {w:?} expects {} input channels, input has {c}", cg * g.groups)
        )
    );
    ensure!(kh == kw, Error::shape("conv2d", "only square kernels are supported"));
    let ho = conv_out_len(h, kh, g.pad, g.stride);
    let wo = conv_out_len(wd, kw, g.pad, g.stride);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(vec![b, o, ho, wo]),
        _ => Err(Error::shape(
            "conv2d",
            format!("kernel {kh} with pad {} does not fit {h}×{wd}", g.pad),
        )),
    }
}

struct ConvDims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    cg: usize,
    og: usize,
}

impl ConvDims {
    fn new(x: &[usize], w: &[usize], g: ConvGeometry) -> Result<Self> {
        let out = conv2d_out_shape(x, w, g)?;
        Ok(Self {
            b: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            k: w[2],
            ho: out[2],
            wo: out[3],
            cg: x[1] / g.groups,
            og: w[0] / g.groups,
        })
    }

    fn is_pointwise(&self, g: ConvGeometry) -> bool {
        self.k == 1 && g.stride == 1 && g.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox·s + kj − p` lies inside `0..w`.
fn valid_cols(kj: usize, s: usize, p: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if p > kj { (p - kj).div_ceil(s) } else { 0 };
    let hi = if w + p > kj { ((w + p - kj - 1) / s + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col(src: &[f64], d: &ConvDims, g: ConvGeometry, cols: &mut [f64]) {
    let (k, s, p) = (d.k, g.stride, g.pad);
    let n = d.ho * d.wo;
    for c in 0..d.cg {
        let plane = &src[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * n..][..n];
                let (lo, hi) = valid_cols(kj, s, p, d.w, d.wo);
                for oy in 0..d.ho {
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    let iy = oy * s + ki;
                    if iy < p || iy - p >= d.h || lo == hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[(iy - p) * d.w..(iy - p + 1) * d.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let x0 = lo * s + kj - p;
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&src_row[x0..x0 + hi - lo]);
                    } else {
                        for (i, v) in dst[lo..hi].iter_mut().enumerate() {
                            *v = src_row[x0 + i * s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, g: ConvGeometry, dst: &mut [f64]) {
    let (k, s, p) = (d.k, g.stride, g.pad);
    let n = d.ho * d.wo;
    for c in 0..d.cg {
        let plane = &mut dst[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * n..][..n];
                let (lo, hi) = valid_cols(kj, s, p, d.w, d.wo);
                if lo == hi {
                    continue;
                }
                let x0 = lo * s + kj - p;
                for oy in 0..d.ho {
                    let iy = oy * s + ki;
                    if iy < p || iy - p >= d.h {
                        continue;
                    }
                    let dst_row = &mut plane[(iy - p) * d.w..(iy - p + 1) * d.w];
                    let src = &row[oy * d.wo + lo..oy * d.wo + hi];
                    if s == 1 {
                        for (o, v) in dst_row[x0..x0 + hi - lo].iter_mut().zip(src) {
                            *o += v;
                        }
                    } else {
                        for (i, v) in src.iter().enumerate() {
                            dst_row[x0 + i * s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` with row-major storage; `ta`/`tb` transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are at least as long as the strided views described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let d = ConvDims::new(x.shape(), w.shape(), g)?;
    let n = d.ho * d.wo;
    let kk = d.cg * d.k * d.k;
    let mut out = Tensor::zeros(&[d.b, d.o, d.ho, d.wo]);
    let pointwise = d.is_pointwise(g);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * n] };
    let (xs, ws) = (x.data(), w.data());
    let ys = out.data_mut();
    for b in 0..d.b {
        for grp in 0..g.groups {
            let src = &xs[(b * d.c + grp * d.cg) * d.h * d.w..][..d.cg * d.h * d.w];
            let wg = &ws[grp * d.og * kk..][..d.og * kk];
            let dst = &mut ys[(b * d.o + grp * d.og) * n..][..d.og * n];
            if pointwise {
                gemm(d.og, kk, n, wg, false, src, false, 0.0, dst);
            } else {
                im2col(src, &d, g, &mut cols);
                gemm(d.og, kk, n, wg, false, &cols, false, 0.0, dst);
            }
        }
    }
    Ok(out)
}

/// Returns `(dL/dx, dL/dw)` for `y = conv2d(x, w)`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    g: ConvGeometry,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let d = ConvDims::new(x.shape(), w.shape(), g)?;
    let n = d.ho * d.wo;
    let kk = d.cg * d.k * d.k;
    let pointwise = d.is_pointwise(g);
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut cols = vec![0.0; kk * n];
    let (xs, ws, gys) = (x.data(), w.data(), gy.data());
    for b in 0..d.b {
        for grp in 0..g.groups {
            let src = &xs[(b * d.c + grp * d.cg) * d.h * d.w..][..d.cg * d.h * d.w];
            let wg = &ws[grp * d.og * kk..][..d.og * kk];
            let gyg = &gys[(b * d.o + grp * d.og) * n..][..d.og * n];
            if let Some(gw) = gw.as_mut() {
                let gwg = &mut gw.data_mut()[grp * d.og * kk..][..d.og * kk];
                if pointwise {
                    gemm(d.og, n, kk, gyg, false, src, true, 1.0, gwg);
                } else {
                    im2col(src, &d, g, &mut cols);
                    gemm(d.og, n, kk, gyg, false, &cols, true, 1.0, gwg);
                }
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx.data_mut()[(b * d.c + grp * d.cg) * d.h * d.w..]
                    [..d.cg * d.h * d.w];
                if pointwise {
                    gemm(kk, d.og, n, wg, true, gyg, false, 1.0, dst);
                } else {
                    gemm(kk, d.og, n, wg, true, gyg, false, 0.0, &mut cols);
                    col2im(&cols, &d, g, dst);
                }
            }
        }
    }
    Ok((gx, gw))
}

/// Per-(sample, group) mean and reciprocal standard deviation.
#[derive(Clone, Debug, Default)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn group_norm_check(x: &[usize], gamma: &[usize], beta: &[usize], groups: usize) -> Result<()> {
    let [_, c, _, _] = *x else {
        return Err(Error::shape("group_norm", format!("expected 4-d input, got {x:?}")));
    };
    ensure!(
        groups > 0 && c % groups == 0,
        Error::shape("group_norm", format!("{groups} groups do not divide {c} channels"))
    );
    ensure!(
        gamma == [c] && beta == [c],
        Error::shape(
            "group_norm",
            format!("affine params {gamma:?}/{beta:?} for {c} channels")
        )
    );
    Ok(())
}

pub fn group_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> Result<(Tensor, NormStats)> {
    group_norm_check(x.shape(), gamma.shape(), beta.shape(), groups)?;
    let (b, c, h, w) = x.dims4()?;
    let cg = c / groups;
    let span = cg * h * w;
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut stats = NormStats {
        mean: Vec::with_capacity(b * groups),
        rstd: Vec::with_capacity(b * groups),
    };
    let (xs, gs, bs) = (x.data(), gamma.data(), beta.data());
    let ys = out.data_mut();
    for bi in 0..b {
        for g in 0..groups {
            let off = (bi * c + g * cg) * hw;
            let seg = &xs[off..off + span];
            let mean = seg.iter().sum::<f64>() / span as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = g * cg + ci;
                let (ga, be) = (gs[ch], bs[ch]);
                for i in 0..hw {
                    let j = off + ci * hw + i;
                    ys[j] = ga * (xs[j] - mean) * rstd + be;
                }
            }
            stats.mean.push(mean);
            stats.rstd.push(rstd);
        }
    }
    Ok((out, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    gy: &Tensor,
    groups: usize,
    stats: &NormStats,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, h, w) = x.dims4()?;
    let cg = c / groups;
    let hw = h * w;
    let span = (cg * hw) as f64;
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    let (xs, gs, gys) = (x.data(), gamma.data(), gy.data());
    for bi in 0..b {
        for g in 0..groups {
            let (mean, rstd) = (stats.mean[bi * groups + g], stats.rstd[bi * groups + g]);
            let off = (bi * c + g * cg) * hw;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in 0..cg {
                let ch = g * cg + ci;
                let mut dgam = 0.0;
                let mut dbet = 0.0;
                for i in 0..hw {
                    let j = off + ci * hw + i;
                    let xhat = (xs[j] - mean) * rstd;
                    dgam += gys[j] * xhat;
                    dbet += gys[j];
                    let dxhat = gys[j] * gs[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                ggamma.data_mut()[ch] += dgam;
                gbeta.data_mut()[ch] += dbet;
            }
            let gxs = gx.data_mut();
            for ci in 0..cg {
                let ch = g * cg + ci;
                for i in 0..hw {
                    let j = off + ci * hw + i;
                    let xhat = (xs[j] - mean) * rstd;
                    let dxhat = gys[j] * gs[ch];
                    gxs[j] = rstd / span * (span * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}

/// Source coordinate and blend weight for half-pixel-centre resampling.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_resize_forward(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let ty = bilinear_taps(out_h, h);
    let tx = bilinear_taps(out_w, w);
    let mut out = Tensor::zeros(&[b, c, out_h, out_w]);
    let xs = x.data();
    let ys = out.data_mut();
    for p in 0..b * c {
        let src = &xs[p * h * w..(p + 1) * h * w];
        let dst = &mut ys[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize_backward(gy: &Tensor, in_shape: &[usize]) -> Result<Tensor> {
    let (b, c, out_h, out_w) = gy.dims4()?;
    let (h, w) = (in_shape[2], in_shape[3]);
    let ty = bilinear_taps(out_h, h);
    let tx = bilinear_taps(out_w, w);
    let mut gx = Tensor::zeros(in_shape);
    let gys = gy.data();
    let gxs = gx.data_mut();
    for p in 0..b * c {
        let src = &gys[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut gxs[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * out_w + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    Ok(gx)
}

/// Non-overlapping `kh×kw` max pooling; returns the flat argmax of every output cell.
pub fn max_pool_forward(x: &Tensor, kh: usize, kw: usize) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = x.dims4()?;
    ensure!(
        kh > 0 && kw > 0 && h % kh == 0 && w % kw == 0,
        Error::shape("max_pool2d", format!("window {kh}×{kw} does not tile {h}×{w}"))
    );
    let (ho, wo) = (h / kh, w / kw);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let mut arg = vec![0usize; b * c * ho * wo];
    let xs = x.data();
    let ys = out.data_mut();
    for p in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let j = p * h * w + (oy * kh + dy) * w + ox * kw + dx;
                        if xs[j] > best {
                            best = xs[j];
                            at = j;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                ys[o] = best;
                arg[o] = at;
            }
        }
    }
    Ok((out, arg))
}

/// Nearest-neighbour upsampling by integer factors `fh×fw`.
pub fn upsample_nearest_forward(x: &Tensor, fh: usize, fw: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    ensure!(
        fh > 0 && fw > 0,
        Error::InvalidArgument("upsample factor must be positive".into())
    );
    let (oh, ow) = (h * fh, w * fw);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let xs = x.data();
    let ys = out.data_mut();
    for p in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                ys[(p * oh + oy) * ow + ox] = xs[(p * h + oy / fh) * w + ox / fw];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest_backward(gy: &Tensor, in_shape: &[usize], fh: usize, fw: usize) -> Result<Tensor> {
    let (b, c, oh, ow) = gy.dims4()?;
    let (h, w) = (in_shape[2], in_shape[3]);
    let mut gx = Tensor::zeros(in_shape);
    let gys = gy.data();
    let gxs = gx.data_mut();
    for p in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                gxs[(p * h + oy / fh) * w + ox / fw] += gys[(p * oh + oy) * ow + ox];
            }
        }
    }
    Ok(gx)
}

pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_extents(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    let xs = x.data();
    let ys = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let m = (0..n).map(|j| xs[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (xs[at(j)] - m).exp();
                ys[at(j)] = e;
                z += e;
            }
            for j in 0..n {
                ys[at(j)] /= z;
            }
        }
    }
    out
}

pub fn softmax_backward(y: &Tensor, gy: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_extents(y.shape(), axis);
    let mut gx = Tensor::zeros(y.shape());
    let (ys, gys) = (y.data(), gy.data());
    let gxs = gx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: f64 = (0..n).map(|j| ys[at(j)] * gys[at(j)]).sum();
            for j in 0..n {
                gxs[at(j)] = ys[at(j)] * (gys[at(j)] - dot);
            }
        }
    }
    gx
}

pub fn concat_shape(shapes: &[&[usize]], axis: usize) -> Result<Vec<usize>> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    ensure!(
        axis < first.len(),
        Error::InvalidArgument(format!("concat axis {axis} out of range"))
    );
    let mut out = first.to_vec();
    out[axis] = 0;
    for s in shapes {
        ensure!(
            s.len() == first.len()
                && s.iter().zip(first.iter()).enumerate().all(|(i, (a, b))| i == axis || a == b),
            Error::shape("concat", format!("{first:?} vs {s:?} along axis {axis}"))
        );
        out[axis] += s[axis];
    }
    Ok(out)
}

pub fn concat_forward(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let shapes: Vec<&[usize]> = xs.iter().map(|t| t.shape()).collect();
    let out_shape = concat_shape(&shapes, axis)?;
    let (outer, total, inner) = axis_extents(&out_shape, axis);
    let mut out = Tensor::zeros(&out_shape);
    let ys = out.data_mut();
    let mut start = 0;
    for t in xs {
        let n = t.shape()[axis];
        let src = t.data();
        for o in 0..outer {
            let dst = &mut ys[(o * total + start) * inner..][..n * inner];
            dst.copy_from_slice(&src[o * n * inner..][..n * inner]);
        }
        start += n;
    }
    Ok(out)
}

/// Copies `len` entries along `axis` beginning at `start`.
pub fn narrow_forward(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    ensure!(
        axis < x.rank() && len > 0 && start + len <= x.shape()[axis],
        Error::shape(
            "narrow",
            format!("[{start}, {}) along axis {axis} of {:?}", start + len, x.shape())
        )
    );
    let (outer, n, inner) = axis_extents(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Tensor::zeros(&shape);
    let src = x.data();
    let ys = out.data_mut();
    for o in 0..outer {
        ys[o * len * inner..][..len * inner]
            .copy_from_slice(&src[(o * n + start) * inner..][..len * inner]);
    }
    Ok(out)
}

/// Adds `g` (a narrowed slice) back into a zero tensor of `full` shape.
pub fn narrow_backward(g: &Tensor, full: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, n, inner) = axis_extents(full, axis);
    let len = g.shape()[axis];
    let mut out = Tensor::zeros(full);
    let dst = out.data_mut();
    for o in 0..outer {
        dst[(o * n + start) * inner..][..len * inner]
            .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as the oracle.
    fn conv_naive(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Tensor {
        let (b, c, h, wd) = x.dims4().unwrap();
        let (o, cg, k, _) = w.dims4().unwrap();
        let og = o / g.groups;
        let ho = (h + 2 * g.pad - k) / g.stride + 1;
        let wo = (wd + 2 * g.pad - k) / g.stride + 1;
        let mut out = Tensor::zeros(&[b, o, ho, wo]);
        for bi in 0..b {
            for oc in 0..o {
                let grp = oc / og;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cg {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.at4(bi, grp * cg + ci, iy as usize, ix as usize)
                                        * w.at4(oc, ci, ky, kx);
                                }
                            }
                        }
                        out.data_mut()[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let _ = c;
        out
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(c, o, k, s, p, groups, h) in &[
            (4, 6, 3, 1, 1, 1, 7),
            (4, 6, 3, 2, 1, 2, 8),
            (8, 4, 1, 1, 0, 4, 5),
            (3, 5, 3, 2, 0, 1, 9),
            (6, 6, 3, 1, 1, 3, 6),
        ] {
            let g = ConvGeometry::new(s, p, groups);
            let x = Tensor::randn(&[2, c, h, h + 1], 1.0, &mut rng);
            let w = Tensor::randn(&[o, c / groups, k, k], 1.0, &mut rng);
            let got = conv2d_forward(&x, &w, g).unwrap();
            let want = conv_naive(&x, &w, g);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_bad_groups() {
        let x = Tensor::zeros(&[1, 6, 4, 4]);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        assert!(conv2d_forward(&x, &w, ConvGeometry::new(1, 1, 4)).is_err());
        let w = Tensor::zeros(&[4, 4, 3, 3]);
        assert!(conv2d_forward(&x, &w, ConvGeometry::new(1, 1, 1)).is_err());
    }

    #[test]
    fn stride_two_shape() {
        let x = Tensor::zeros(&[1, 8, 16, 16]);
        let w = Tensor::zeros(&[5, 8, 3, 3]);
        let y = conv2d_forward(&x, &w, ConvGeometry::new(2, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 5, 8, 8]);
    }

    #[test]
    fn bilinear_reference_values() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = bilinear_resize_forward(&x, 4, 4).unwrap();
        for r in 0..4 {
            assert_eq!(&y.data()[r * 4..r * 4 + 4], &[0.0, 0.25, 0.75, 1.0]);
        }
        let one = Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap();
        let up = bilinear_resize_forward(&one, 2, 2).unwrap();
        assert!(up.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 4, 4], 3.0, &mut rng);
        let y = softmax_forward(&x, 1);
        for b in 0..2 {
            for i in 0..16 {
                let s: f64 = (0..3).map(|c| y.data()[(b * 3 + c) * 16 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_then_narrow_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 5, 2, 2], 1.0, &mut rng);
        let c = concat_forward(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 8, 2, 2]);
        assert_eq!(narrow_forward(&c, 1, 0, 3).unwrap(), a);
        assert_eq!(narrow_forward(&c, 1, 3, 5).unwrap(), b);
    }
}

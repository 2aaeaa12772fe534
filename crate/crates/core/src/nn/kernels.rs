//! Forward and backward kernels on raw tensors. No tape bookkeeping here;
//! [`super::Tape`] wires these together.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self, g: ConvGeometry) -> bool {
        self.kh == 1 && self.kw == 1 && g.stride == 1 && g.padding == 0
    }
}

fn conv_dims(input: &Tensor, weight: &Tensor, g: ConvGeometry) -> Result<ConvDims> {
    let (n, c, h, w) = input.dims4()?;
    let (k, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        bail!(Shape, "conv2d: input has {} channels, weight expects {}", c, wc);
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        bail!(Config, "conv2d: kernel extents must be odd, got {}x{}", kh, kw);
    }
    if g.stride == 0 {
        bail!(Config, "conv2d: stride must be positive");
    }
    if h + 2 * g.padding < kh || w + 2 * g.padding < kw {
        bail!(Shape, "conv2d: kernel {}x{} larger than padded input {}x{}", kh, kw, h, w);
    }
    let ho = (h + 2 * g.padding - kh) / g.stride + 1;
    let wo = (w + 2 * g.padding - kw) / g.stride + 1;
    Ok(ConvDims { n, c, h, w, k, kh, kw, ho, wo })
}

/// Output columns `ox` whose input column `ox·stride + j − padding` lies
/// inside `0..w`, as a half-open range.
fn valid_cols(d: &ConvDims, g: ConvGeometry, j: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(j).div_ceil(g.stride);
    let hi = if d.w + g.padding > j { (d.w + g.padding - j - 1) / g.stride + 1 } else { 0 };
    (lo.min(d.wo), hi.min(d.wo).max(lo.min(d.wo)))
}

fn im2col(img: &[f32], d: &ConvDims, g: ConvGeometry, col: &mut [f32]) {
    let p = d.out_pixels();
    for c in 0..d.c {
        let plane = &img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let (lo, hi) = valid_cols(d, g, j);
                let row = &mut col[((c * d.kh + i) * d.kw + j) * p..][..p];
                for oy in 0..d.ho {
                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    if y < 0 || y >= d.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * d.w..(y as usize + 1) * d.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if hi > lo {
                        let x0 = lo * g.stride + j - g.padding;
                        if g.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                        } else {
                            for (k, v) in dst[lo..hi].iter_mut().enumerate() {
                                *v = src[x0 + k * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f32], d: &ConvDims, g: ConvGeometry, img: &mut [f32]) {
    let p = d.out_pixels();
    for c in 0..d.c {
        let plane = &mut img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let (lo, hi) = valid_cols(d, g, j);
                if hi <= lo {
                    continue;
                }
                let x0 = lo * g.stride + j - g.padding;
                let row = &col[((c * d.kh + i) * d.kw + j) * p..][..p];
                for oy in 0..d.ho {
                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                    if y < 0 || y >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * d.w..(y as usize + 1) * d.w];
                    let src = &row[oy * d.wo + lo..oy * d.wo + hi];
                    if g.stride == 1 {
                        for (o, v) in dst[x0..x0 + hi - lo].iter_mut().zip(src) {
                            *o += v;
                        }
                    } else {
                        for (k, v) in src.iter().enumerate() {
                            dst[x0 + k * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation. `input [N,C,H,W]`, `weight [K,C,kh,kw]`,
/// optional `bias [K]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
    let d = conv_dims(input, weight, g)?;
    if let Some(b) = bias {
        if b.shape() != [d.k] {
            bail!(Shape, "conv2d: bias shape {:?}, expected [{}]", b.shape(), d.k);
        }
    }
    let p = d.out_pixels();
    let rows = d.col_rows();
    let mut out = vec![0.0f32; d.n * d.k * p];
    let mut col = if d.is_pointwise(g) { Vec::new() } else { vec![0.0f32; rows * p] };
    let in_stride = d.c * d.h * d.w;
    for n in 0..d.n {
        let img = &input.data()[n * in_stride..(n + 1) * in_stride];
        let dst = &mut out[n * d.k * p..(n + 1) * d.k * p];
        if let Some(b) = bias {
            for (k, chunk) in dst.chunks_exact_mut(p).enumerate() {
                chunk.fill(b.data()[k]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if d.is_pointwise(g) {
            gemm(d.k, rows, p, weight.data(), false, img, false, beta, dst);
        } else {
            im2col(img, &d, g, &mut col);
            gemm(d.k, rows, p, weight.data(), false, &col, false, beta, dst);
        }
    }
    Tensor::new(&[d.n, d.k, d.ho, d.wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
/// Only the requested gradients are computed.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: ConvGeometry,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let d = conv_dims(input, weight, g)?;
    let p = d.out_pixels();
    let rows = d.col_rows();
    if grad_out.shape() != [d.n, d.k, d.ho, d.wo] {
        bail!(Shape, "conv2d backward: grad shape {:?}", grad_out.shape());
    }
    let [need_x, need_w, need_b] = need;
    let mut gx = need_x.then(|| vec![0.0f32; input.len()]);
    let mut gw = need_w.then(|| vec![0.0f32; weight.len()]);
    let mut gb = need_b.then(|| vec![0.0f32; d.k]);
    let pointwise = d.is_pointwise(g);
    let mut col = if pointwise { Vec::new() } else { vec![0.0f32; rows * p] };
    let mut gcol = if pointwise || !need_x { Vec::new() } else { vec![0.0f32; rows * p] };
    let in_stride = d.c * d.h * d.w;
    for n in 0..d.n {
        let img = &input.data()[n * in_stride..(n + 1) * in_stride];
        let dy = &grad_out.data()[n * d.k * p..(n + 1) * d.k * p];
        if let Some(gb) = gb.as_mut() {
            for (k, chunk) in dy.chunks_exact(p).enumerate() {
                gb[k] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        if let Some(gw) = gw.as_mut() {
            let cols: &[f32] = if pointwise {
                img
            } else {
                im2col(img, &d, g, &mut col);
                &col
            };
            // dW[K, rows] += dy[K, P] · col[rows, P]^T
            gemm(d.k, p, rows, dy, false, cols, true, 1.0, gw);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[n * in_stride..(n + 1) * in_stride];
            if pointwise {
                gemm(rows, d.k, p, weight.data(), true, dy, false, 0.0, dst);
            } else {
                gemm(rows, d.k, p, weight.data(), true, dy, false, 0.0, &mut gcol);
                col2im_add(&gcol, &d, g, dst);
            }
        }
    }
    Ok(ConvGrads {
        input: gx.map(|v| Tensor::new(input.shape(), v)).transpose()?,
        weight: gw.map(|v| Tensor::new(weight.shape(), v)).transpose()?,
        bias: gb.map(|v| Tensor::new(&[d.k], v)).transpose()?,
    })
}

/// `input [N, in] · weight[out, in]ᵀ + bias[out]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, fin, fout) = linear_dims(input, weight)?;
    let mut out = vec![0.0f32; n * fout];
    let mut beta = 0.0;
    if let Some(b) = bias {
        if b.shape() != [fout] {
            bail!(Shape, "linear: bias shape {:?}, expected [{}]", b.shape(), fout);
        }
        for row in out.chunks_exact_mut(fout) {
            row.copy_from_slice(b.data());
        }
        beta = 1.0;
    }
    gemm(n, fin, fout, input.data(), false, weight.data(), true, beta, &mut out);
    Tensor::new(&[n, fout], out)
}

fn linear_dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, fin) = match input.shape() {
        &[n, f] => (n, f),
        s => bail!(Shape, "linear: expected [N, in] input, got {:?}", s),
    };
    let fout = match weight.shape() {
        &[o, i] if i == fin => o,
        s => bail!(Shape, "linear: weight {:?} incompatible with input width {}", s, fin),
    };
    Ok((n, fin, fout))
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor, need: [bool; 3]) -> Result<ConvGrads> {
    let (n, fin, fout) = linear_dims(input, weight)?;
    let dy = grad_out.data();
    let gx = if need[0] {
        let mut gx = vec![0.0f32; n * fin];
        gemm(n, fout, fin, dy, false, weight.data(), false, 0.0, &mut gx);
        Some(Tensor::new(&[n, fin], gx)?)
    } else {
        None
    };
    let gw = if need[1] {
        let mut gw = vec![0.0f32; fout * fin];
        gemm(fout, n, fin, dy, true, input.data(), false, 0.0, &mut gw);
        Some(Tensor::new(&[fout, fin], gw)?)
    } else {
        None
    };
    let gb = if need[2] {
        let mut gb = vec![0.0f64; fout];
        for row in dy.chunks_exact(fout) {
            for (a, &v) in gb.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        Some(Tensor::new(&[fout], gb.into_iter().map(|v| v as f32).collect())?)
    } else {
        None
    };
    Ok(ConvGrads { input: gx, weight: gw, bias: gb })
}

/// Per-(sample, group) mean and reciprocal standard deviation.
#[derive(Debug, Clone, Copy)]
pub struct GroupStats {
    pub mean: f32,
    pub rstd: f32,
}

fn group_dims(input: &Tensor, groups: usize) -> Result<(usize, usize, usize)> {
    if input.shape().len() < 2 {
        bail!(Shape, "group_norm: expected [N, C, ...], got {:?}", input.shape());
    }
    let n = input.shape()[0];
    let c = input.shape()[1];
    if groups == 0 || c % groups != 0 {
        bail!(Config, "group_norm: {} channels not divisible into {} groups", c, groups);
    }
    let spatial = input.len() / (n * c);
    Ok((n, c, spatial))
}

pub fn group_norm(
    input: &Tensor,
    groups: usize,
    gain: &Tensor,
    offset: &Tensor,
    eps: f32,
) -> Result<(Tensor, Vec<GroupStats>)> {
    let (n, c, spatial) = group_dims(input, groups)?;
    if gain.shape() != [c] || offset.shape() != [c] {
        bail!(Shape, "group_norm: affine parameters must have shape [{}]", c);
    }
    if eps <= 0.0 {
        bail!(Config, "group_norm: eps must be positive");
    }
    let cpg = c / groups;
    let glen = cpg * spatial;
    let mut out = vec![0.0f32; input.len()];
    let mut stats = Vec::with_capacity(n * groups);
    for (gi, chunk) in input.data().chunks_exact(glen).enumerate() {
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / glen as f64;
        let var = chunk.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / glen as f64;
        let rstd = 1.0 / libm::sqrt(var + eps as f64);
        let (mean, rstd) = (mean as f32, rstd as f32);
        stats.push(GroupStats { mean, rstd });
        let group = gi % groups;
        let dst = &mut out[gi * glen..(gi + 1) * glen];
        for cc in 0..cpg {
            let ch = group * cpg + cc;
            let (a, b) = (gain.data()[ch], offset.data()[ch]);
            let src = &chunk[cc * spatial..(cc + 1) * spatial];
            for (o, &v) in dst[cc * spatial..(cc + 1) * spatial].iter_mut().zip(src) {
                *o = (v - mean) * rstd * a + b;
            }
        }
    }
    Ok((Tensor::new(input.shape(), out)?, stats))
}

pub fn group_norm_backward(
    input: &Tensor,
    groups: usize,
    gain: &Tensor,
    stats: &[GroupStats],
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, c, spatial) = group_dims(input, groups)?;
    let cpg = c / groups;
    let glen = cpg * spatial;
    let mut gx = vec![0.0f32; input.len()];
    let mut ggain = vec![0.0f64; c];
    let mut goffset = vec![0.0f64; c];
    for (gi, (x, dy)) in input.data().chunks_exact(glen).zip(grad_out.data().chunks_exact(glen)).enumerate() {
        let GroupStats { mean, rstd } = stats[gi];
        let group = gi % groups;
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for cc in 0..cpg {
            let ch = group * cpg + cc;
            let a = gain.data()[ch] as f64;
            for s in cc * spatial..(cc + 1) * spatial {
                let xhat = ((x[s] - mean) * rstd) as f64;
                let d = dy[s] as f64;
                ggain[ch] += d * xhat;
                goffset[ch] += d;
                sum_dxhat += d * a;
                sum_dxhat_xhat += d * a * xhat;
            }
        }
        let mean_dxhat = sum_dxhat / glen as f64;
        let mean_dxhat_xhat = sum_dxhat_xhat / glen as f64;
        let dst = &mut gx[gi * glen..(gi + 1) * glen];
        for cc in 0..cpg {
            let a = gain.data()[group * cpg + cc] as f64;
            for s in cc * spatial..(cc + 1) * spatial {
                let xhat = ((x[s] - mean) * rstd) as f64;
                let dxhat = dy[s] as f64 * a;
                dst[s] = (rstd as f64 * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)) as f32;
            }
        }
    }
    let to_t = |v: Vec<f64>| Tensor::new(&[c], v.into_iter().map(|x| x as f32).collect());
    Ok((Tensor::new(input.shape(), gx)?, to_t(ggain)?, to_t(goffset)?))
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Nearest-neighbour 2× upsampling of the two trailing axes.
pub fn upsample2x(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; n * c * h2 * w2];
    for (plane, dst) in input.data().chunks_exact(h * w).zip(out.chunks_exact_mut(h2 * w2)) {
        for y in 0..h2 {
            let src = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for (x, v) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                *v = src[x / 2];
            }
        }
    }
    Tensor::new(&[n, c, h2, w2], out)
}

pub fn upsample2x_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, h2, w2) = grad_out.dims4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0f32; n * c * h * w];
    for (plane, dst) in grad_out.data().chunks_exact(h2 * w2).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += plane[y * w2 + x];
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Softmax over the last axis.
pub fn softmax_last(input: &Tensor) -> Result<Tensor> {
    let last = *input.shape().last().ok_or_else(|| crate::Error::Shape("softmax of a scalar".into()))?;
    let mut out = input.data().to_vec();
    for row in out.chunks_exact_mut(last) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = libm::expf(*v - max);
            sum += *v as f64;
        }
        let inv = (1.0 / sum) as f32;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::new(input.shape(), out)
}

pub fn softmax_last_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let last = *output.shape().last().unwrap_or(&1);
    let mut gx = vec![0.0f32; output.len()];
    for ((y, dy), dx) in output
        .data()
        .chunks_exact(last)
        .zip(grad_out.data().chunks_exact(last))
        .zip(gx.chunks_exact_mut(last))
    {
        let dot: f64 = y.iter().zip(dy).map(|(&a, &b)| a as f64 * b as f64).sum();
        for i in 0..last {
            dx[i] = (y[i] as f64 * (dy[i] as f64 - dot)) as f32;
        }
    }
    Tensor::new(output.shape(), gx)
}

pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<MatmulDims> {
    let (ba, ar, ac) = match a.shape() {
        &[b, r, c] => (b, r, c),
        s => bail!(Shape, "matmul: lhs must be rank 3, got {:?}", s),
    };
    let (bb, br, bc) = match b.shape() {
        &[b, r, c] => (b, r, c),
        s => bail!(Shape, "matmul: rhs must be rank 3, got {:?}", s),
    };
    if ba != bb {
        bail!(Shape, "matmul: batch {} vs {}", ba, bb);
    }
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        bail!(Shape, "matmul: inner dimensions {} vs {}", k, k2);
    }
    Ok(MatmulDims { batch: ba, m, k, n })
}

/// Batched `op(a) · op(b)` over rank-3 tensors.
pub fn batched_matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
    let MatmulDims { batch, m, k, n } = matmul_dims(a, b, trans_a, trans_b)?;
    let mut out = vec![0.0f32; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            trans_a,
            &b.data()[i * k * n..(i + 1) * k * n],
            trans_b,
            0.0,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    Tensor::new(&[batch, m, n], out)
}

/// Gradients of [`batched_matmul`] in the stored layouts of `a` and `b`.
pub fn batched_matmul_backward(
    a: &Tensor,
    b: &Tensor,
    trans_a: bool,
    trans_b: bool,
    grad_out: &Tensor,
    need: [bool; 2],
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let MatmulDims { batch, m, k, n } = matmul_dims(a, b, trans_a, trans_b)?;
    let dc = grad_out.data();
    let ga = need[0].then(|| {
        let mut ga = vec![0.0f32; a.len()];
        for i in 0..batch {
            let bi = &b.data()[i * k * n..(i + 1) * k * n];
            let dci = &dc[i * m * n..(i + 1) * m * n];
            let dst = &mut ga[i * m * k..(i + 1) * m * k];
            if trans_a {
                // stored [k, m] = op(b) · dcᵀ
                gemm(k, n, m, bi, trans_b, dci, true, 0.0, dst);
            } else {
                gemm(m, n, k, dci, false, bi, !trans_b, 0.0, dst);
            }
        }
        ga
    });
    let gb = need[1].then(|| {
        let mut gb = vec![0.0f32; b.len()];
        for i in 0..batch {
            let ai = &a.data()[i * m * k..(i + 1) * m * k];
            let dci = &dc[i * m * n..(i + 1) * m * n];
            let dst = &mut gb[i * k * n..(i + 1) * k * n];
            if trans_b {
                // stored [n, k] = dcᵀ · op(a)
                gemm(n, m, k, dci, true, ai, trans_a, 0.0, dst);
            } else {
                gemm(k, m, n, ai, !trans_a, dci, false, 0.0, dst);
            }
        }
        gb
    });
    Ok((
        ga.map(|v| Tensor::new(a.shape(), v)).transpose()?,
        gb.map(|v| Tensor::new(b.shape(), v)).transpose()?,
    ))
}

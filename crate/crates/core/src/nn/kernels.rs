//! Per-layer forward and backward kernels on NCHW tensors.

use super::{gemm, MatRef, Scalar, Tensor};

/// Unfolds one `[c, h, w]` sample into `[c * k * k, h * w]` patches with
/// zero padding `(k - 1) / 2`.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let p = (k - 1) / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let x_lo = p.saturating_sub(kx);
                let x_hi = (w + p).saturating_sub(kx).min(w);
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < p || sy - p >= h || x_lo >= x_hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(sy - p) * w..(sy - p + 1) * w];
                    dst[..x_lo].fill(T::zero());
                    dst[x_hi..].fill(T::zero());
                    dst[x_lo..x_hi].copy_from_slice(&src[x_lo + kx - p..x_hi + kx - p]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into `dx`.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let p = (k - 1) / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let x_lo = p.saturating_sub(kx);
                let x_hi = (w + p).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < p || sy - p >= h {
                        continue;
                    }
                    let dst = &mut plane[(sy - p) * w..(sy - p + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    for xi in x_lo..x_hi {
                        let d = &mut dst[xi + kx - p];
                        *d = *d + src[xi];
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    k: usize,
) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = Tensor::zeros([n, out_channels, h, w]);
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    let wmat = MatRef::row_major(weight, out_channels, ckk);
    for s in 0..n {
        let xs = x.sample(s);
        let patches = if k == 1 {
            xs
        } else {
            im2col(xs, c, h, w, k, &mut cols);
            &cols
        };
        let ys = out.sample_mut(s);
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                ys[o * hw..(o + 1) * hw].fill(bo);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(T::one(), wmat, MatRef::row_major(patches, ckk, hw), beta, ys);
    }
    out
}

/// Accumulates weight/bias gradients and, when `dx` is given, writes the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    k: usize,
    dweight: &mut [T],
    mut dbias: Option<&mut [T]>,
    mut dx: Option<&mut Tensor<T>>,
) {
    let [n, c, h, w] = x.shape();
    let out_channels = dy.channels();
    let hw = h * w;
    let ckk = c * k * k;
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    let mut dcols = if k == 1 || dx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * hw]
    };
    let wmat = MatRef::row_major(weight, out_channels, ckk);
    for s in 0..n {
        let xs = x.sample(s);
        let dys = dy.sample(s);
        let patches = if k == 1 {
            xs
        } else {
            im2col(xs, c, h, w, k, &mut cols);
            &cols
        };
        let dymat = MatRef::row_major(dys, out_channels, hw);
        gemm(
            T::one(),
            dymat,
            MatRef::row_major(patches, ckk, hw).t(),
            T::one(),
            dweight,
        );
        if let Some(db) = dbias.as_deref_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d = *d + dys[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = dx.sample_mut(s);
            if k == 1 {
                gemm(T::one(), wmat.t(), dymat, T::one(), dxs);
            } else {
                gemm(T::one(), wmat.t(), dymat, T::zero(), &mut dcols);
                col2im(&dcols, c, h, w, k, dxs);
            }
        }
    }
}

pub fn upconv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    out_channels: usize,
) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let o4 = out_channels * 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, out_channels, oh, ow]);
    let mut y4 = vec![T::zero(); o4 * hw];
    // weight is [c, o, 2, 2]; viewed as (o, a, b) × c.
    let wt = MatRef::row_major(weight, c, o4).t();
    for s in 0..n {
        gemm(T::one(), wt, MatRef::row_major(x.sample(s), c, hw), T::zero(), &mut y4);
        let ys = out.sample_mut(s);
        for o in 0..out_channels {
            for a in 0..2 {
                for b in 0..2 {
                    let src = &y4[(o * 4 + a * 2 + b) * hw..][..hw];
                    for i in 0..h {
                        let row = &mut ys[(o * oh + 2 * i + a) * ow..][..ow];
                        for j in 0..w {
                            row[2 * j + b] = src[i * w + j] + bias[o];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn upconv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    mut dx: Option<&mut Tensor<T>>,
) {
    let [n, c, h, w] = x.shape();
    let out_channels = dy.channels();
    let hw = h * w;
    let o4 = out_channels * 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dy4 = vec![T::zero(); o4 * hw];
    for s in 0..n {
        let dys = dy.sample(s);
        for o in 0..out_channels {
            dbias[o] = dbias[o] + dys[o * oh * ow..(o + 1) * oh * ow].iter().copied().sum::<T>();
            for a in 0..2 {
                for b in 0..2 {
                    let dst = &mut dy4[(o * 4 + a * 2 + b) * hw..][..hw];
                    for i in 0..h {
                        let row = &dys[(o * oh + 2 * i + a) * ow..][..ow];
                        for j in 0..w {
                            dst[i * w + j] = row[2 * j + b];
                        }
                    }
                }
            }
        }
        let dy4m = MatRef::row_major(&dy4, o4, hw);
        gemm(
            T::one(),
            MatRef::row_major(x.sample(s), c, hw),
            dy4m.t(),
            T::one(),
            dweight,
        );
        if let Some(dx) = dx.as_deref_mut() {
            gemm(
                T::one(),
                MatRef::row_major(weight, c, o4),
                dy4m,
                T::one(),
                dx.sample_mut(s),
            );
        }
    }
}

/// Returns the pooled tensor and the flat in-plane argmax of every output.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let od = out.data_mut();
    let mut idx = 0;
    for plane in x.data().chunks_exact(h * w) {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (2 * i) * w + 2 * j;
                for cand in [
                    (2 * i) * w + 2 * j + 1,
                    (2 * i + 1) * w + 2 * j,
                    (2 * i + 1) * w + 2 * j + 1,
                ] {
                    if plane[cand] > plane[best] {
                        best = cand;
                    }
                }
                od[idx] = plane[best];
                arg.push(best as u32);
                idx += 1;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(dy: &Tensor<T>, arg: &[u32], input_shape: [usize; 4]) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let in_plane = input_shape[2] * input_shape[3];
    let out_plane = dy.plane();
    for (p, (dyp, argp)) in dy
        .data()
        .chunks_exact(out_plane)
        .zip(arg.chunks_exact(out_plane))
        .enumerate()
    {
        let dxp = &mut dx.data_mut()[p * in_plane..(p + 1) * in_plane];
        for (&g, &a) in dyp.iter().zip(argp) {
            dxp[a as usize] = dxp[a as usize] + g;
        }
    }
    dx
}

fn window(i: usize, len: usize) -> (usize, usize) {
    (i.saturating_sub(1), (i + 2).min(len))
}

pub fn avgpool_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = x.shape();
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x
        .data()
        .chunks_exact(h * w)
        .zip(out.data_mut().chunks_exact_mut(h * w))
    {
        for i in 0..h {
            let (r0, r1) = window(i, h);
            for j in 0..w {
                let (c0, c1) = window(j, w);
                let mut acc = T::zero();
                for r in r0..r1 {
                    for cc in c0..c1 {
                        acc = acc + src[r * w + cc];
                    }
                }
                dst[i * w + j] = acc / T::lit(((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    out
}

pub fn avgpool_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = dy.shape();
    let mut dx = Tensor::zeros(dy.shape());
    for (g, dst) in dy
        .data()
        .chunks_exact(h * w)
        .zip(dx.data_mut().chunks_exact_mut(h * w))
    {
        for i in 0..h {
            let (r0, r1) = window(i, h);
            for j in 0..w {
                let (c0, c1) = window(j, w);
                let share = g[i * w + j] / T::lit(((r1 - r0) * (c1 - c0)) as f64);
                for r in r0..r1 {
                    for cc in c0..c1 {
                        dst[r * w + cc] = dst[r * w + cc] + share;
                    }
                }
            }
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel statistics used by a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Unbiased batch variance, for running-statistics updates.
    pub var_unbiased: Vec<T>,
}

pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> BnStats<T> {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let m = (n * plane) as f64;
    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let mut var_unbiased = vec![T::zero(); c];
    for ch in 0..c {
        let channel = || (0..n).flat_map(move |s| &x.sample(s)[ch * plane..(ch + 1) * plane]);
        // Accumulate in f64 so f32 batches with large planes stay accurate.
        let mu = channel().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / m;
        let ss = channel()
            .map(|v| {
                let d = v.to_f64().unwrap_or(f64::NAN) - mu;
                d * d
            })
            .sum::<f64>();
        mean[ch] = T::lit(mu);
        inv_std[ch] = T::lit(1.0 / (ss / m + BN_EPS).sqrt());
        var_unbiased[ch] = T::lit(if m > 1.0 { ss / (m - 1.0) } else { 0.0 });
    }
    BnStats {
        mean,
        inv_std,
        var_unbiased,
    }
}

pub fn bn_apply<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let mut out = x.clone();
    for s in 0..n {
        let os = out.sample_mut(s);
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for v in &mut os[ch * plane..(ch + 1) * plane] {
                *v = *v * scale + shift;
            }
        }
    }
    out
}

/// Backward through batch norm. With `batch_mode` the statistics are
/// treated as functions of `x`; otherwise they are constants.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch_mode: bool,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let m = T::lit((n * plane) as f64);
    let mut dx = Tensor::zeros(x.shape());
    for ch in 0..c {
        let (mu, is) = (mean[ch], inv_std[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for s in 0..n {
            let xs = &x.sample(s)[ch * plane..(ch + 1) * plane];
            let gs = &dy.sample(s)[ch * plane..(ch + 1) * plane];
            for (&xv, &g) in xs.iter().zip(gs) {
                sum_dy = sum_dy + g;
                sum_dy_xhat = sum_dy_xhat + g * (xv - mu) * is;
            }
        }
        dgamma[ch] = dgamma[ch] + sum_dy_xhat;
        dbeta[ch] = dbeta[ch] + sum_dy;
        let scale = gamma[ch] * is;
        for s in 0..n {
            let xs = &x.sample(s)[ch * plane..(ch + 1) * plane];
            let gs = &dy.sample(s)[ch * plane..(ch + 1) * plane];
            let ds = &mut dx.sample_mut(s)[ch * plane..(ch + 1) * plane];
            if batch_mode {
                let mean_dy = sum_dy / m;
                let mean_dy_xhat = sum_dy_xhat / m;
                for ((d, &xv), &g) in ds.iter_mut().zip(xs).zip(gs) {
                    let xhat = (xv - mu) * is;
                    *d = scale * (g - mean_dy - xhat * mean_dy_xhat);
                }
            } else {
                for (d, &g) in ds.iter_mut().zip(gs) {
                    *d = scale * g;
                }
            }
        }
    }
    dx
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
        if yv <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Logistic sigmoid, kept strictly inside (0, 1) even where it saturates.
pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let one = T::one();
    let hi = one - T::epsilon() / T::lit(2.0);
    let lo = T::min_positive_value();
    let mut out = x.clone();
    for v in out.data_mut() {
        let s = if *v >= T::zero() {
            one / (one + (-*v).exp())
        } else {
            let e = v.exp();
            e / (one + e)
        };
        *v = s.max(lo).min(hi);
    }
    out
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
        *d = *d * yv * (T::one() - yv);
    }
    dx
}

pub fn concat_forward<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let [n, _, h, w] = parts[0].shape();
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = Tensor::zeros([n, c, h, w]);
    for s in 0..n {
        let os = out.sample_mut(s);
        let mut at = 0;
        for p in parts {
            let src = p.sample(s);
            os[at..at + src.len()].copy_from_slice(src);
            at += src.len();
        }
    }
    out
}

pub fn concat_backward<T: Scalar>(dy: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let [n, _, h, w] = dy.shape();
    let plane = h * w;
    let mut parts: Vec<Tensor<T>> = channels
        .iter()
        .map(|&c| Tensor::zeros([n, c, h, w]))
        .collect();
    for s in 0..n {
        let src = dy.sample(s);
        let mut at = 0;
        for (p, &c) in parts.iter_mut().zip(channels) {
            let len = c * plane;
            p.sample_mut(s).copy_from_slice(&src[at..at + len]);
            at += len;
        }
    }
    parts
}

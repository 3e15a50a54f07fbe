//! Forward and backward kernels on NHWC buffers.
//!
//! Batch-parallel loops only split work by sample. Reductions across the
//! batch (kernel and weight gradients) are computed per sample and summed in
//! sample order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that keeps `ceil(extent / stride)` outputs. When the total
    /// padding is odd the extra row/column goes to the bottom/right.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub k: usize,
    pub stride: (usize, usize),
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub pad: (usize, usize),
}

fn axis_geometry(extent: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(extent);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if extent < k {
                None
            } else {
                Some(((extent - k) / stride + 1, 0))
            }
        }
    }
}

pub(crate) fn conv_geometry(
    op: &'static str,
    h: usize,
    w: usize,
    k: usize,
    stride: (usize, usize),
    padding: Padding,
) -> Result<ConvGeometry> {
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::Shape {
            op,
            shape: vec![stride.0, stride.1],
            reason: "stride must be positive".into(),
        });
    }
    let (oh, pt) = axis_geometry(h, k, stride.0, padding).ok_or(Error::Dimension {
        op,
        axis: "height",
        expected: k,
        found: h,
    })?;
    let (ow, pl) = axis_geometry(w, k, stride.1, padding).ok_or(Error::Dimension {
        op,
        axis: "width",
        expected: k,
        found: w,
    })?;
    Ok(ConvGeometry {
        k,
        stride,
        in_hw: (h, w),
        out_hw: (oh, ow),
        pad: (pt, pl),
    })
}

impl ConvGeometry {
    /// Half-open range of output indices whose tap `t` lands inside the input.
    #[inline]
    fn valid_outputs(t: usize, stride: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(t).div_ceil(stride);
        if extent + pad <= t {
            return (0, 0);
        }
        let hi = ((extent - 1 + pad - t) / stride + 1).min(out);
        (lo, hi)
    }

    /// Input coordinate for output index `o` and kernel tap `t`, if in bounds.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let i = (o * stride + t).checked_sub(pad)?;
        (i < extent).then_some(i)
    }
}

/// Validates `kernel` against `input` and returns `(n, c, geometry)`.
pub(crate) fn depthwise_shapes<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<([usize; 4], ConvGeometry)> {
    let op = "depthwise_conv2d";
    let dims = input.dims4(op)?;
    let [kh, kw, kc] = match kernel.shape()[..] {
        [a, b, c] => [a, b, c],
        _ => {
            return Err(Error::Shape {
                op,
                shape: kernel.shape().to_vec(),
                reason: "kernel must be (K, K, C)".into(),
            })
        }
    };
    if kh != kw {
        return Err(Error::Dimension {
            op,
            axis: "kernel width",
            expected: kh,
            found: kw,
        });
    }
    if kh % 2 == 0 {
        return Err(Error::Shape {
            op,
            shape: kernel.shape().to_vec(),
            reason: "kernel size must be odd".into(),
        });
    }
    if kc != dims[3] {
        return Err(Error::Dimension {
            op,
            axis: "channels",
            expected: dims[3],
            found: kc,
        });
    }
    let geom = conv_geometry(op, dims[1], dims[2], kh, stride, padding)?;
    Ok((dims, geom))
}

pub fn depthwise_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>> {
    let ([n, h, w, c], g) = depthwise_shapes(input, kernel, stride, padding)?;
    let (oh, ow) = g.out_hw;
    let mut out = vec![T::zero(); n * oh * ow * c];
    let kdata = kernel.data();
    out.par_chunks_mut(oh * ow * c)
        .zip(input.data().par_chunks(h * w * c))
        .for_each(|(out, inp)| {
            for oy in 0..oh {
                for ky in 0..g.k {
                    let Some(iy) = ConvGeometry::src(oy, ky, g.stride.0, g.pad.0, h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        let (lo, hi) = ConvGeometry::valid_outputs(kx, g.stride.1, g.pad.1, w, ow);
                        if lo >= hi {
                            continue;
                        }
                        let ix = lo * g.stride.1 + kx - g.pad.1;
                        let kr = &kdata[(ky * g.k + kx) * c..][..c];
                        let dst = &mut out[(oy * ow + lo) * c..(oy * ow + hi) * c];
                        let src = inp[(iy * w + ix) * c..].chunks(c).step_by(g.stride.1);
                        for (d, x) in dst.chunks_exact_mut(c).zip(src) {
                            for ((dv, &xv), &kv) in d.iter_mut().zip(x).zip(kr) {
                                *dv += xv * kv;
                            }
                        }
                    }
                }
            }
        });
    Ok(Tensor::new_unchecked(vec![n, oh, ow, c], out))
}

/// Returns `(grad_input, grad_kernel)`; `grad_input` is skipped when not needed.
pub fn depthwise_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: (usize, usize),
    padding: Padding,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let ([n, h, w, c], g) = depthwise_shapes(input, kernel, stride, padding)?;
    let (oh, ow) = g.out_hw;
    let kdata = kernel.data();
    let klen = kernel.len();
    let mut grad_in = if need_input_grad {
        vec![T::zero(); input.len()]
    } else {
        Vec::new()
    };
    let per_sample = |gout: &[T], inp: &[T], mut gin: Option<&mut [T]>| -> Vec<T> {
        let mut gk = vec![T::zero(); klen];
        for oy in 0..oh {
            for ky in 0..g.k {
                let Some(iy) = ConvGeometry::src(oy, ky, g.stride.0, g.pad.0, h) else {
                    continue;
                };
                for kx in 0..g.k {
                    let (lo, hi) = ConvGeometry::valid_outputs(kx, g.stride.1, g.pad.1, w, ow);
                    if lo >= hi {
                        continue;
                    }
                    let ix = lo * g.stride.1 + kx - g.pad.1;
                    let koff = (ky * g.k + kx) * c;
                    let go = &gout[(oy * ow + lo) * c..(oy * ow + hi) * c];
                    let base = (iy * w + ix) * c;
                    let gkr = &mut gk[koff..koff + c];
                    for (gv, x) in go.chunks_exact(c).zip(inp[base..].chunks(c).step_by(g.stride.1)) {
                        for ((gkv, &xv), &gvv) in gkr.iter_mut().zip(x).zip(gv) {
                            *gkv += xv * gvv;
                        }
                    }
                    if let Some(gin) = gin.as_deref_mut() {
                        let kr = &kdata[koff..][..c];
                        for (gv, gi) in go.chunks_exact(c).zip(gin[base..].chunks_mut(c).step_by(g.stride.1)) {
                            for ((giv, &kv), &gvv) in gi.iter_mut().zip(kr).zip(gv) {
                                *giv += kv * gvv;
                            }
                        }
                    }
                }
            }
        }
        gk
    };
    let partials: Vec<Vec<T>> = if need_input_grad {
        grad_in
            .par_chunks_mut(h * w * c)
            .zip(input.data().par_chunks(h * w * c))
            .zip(grad_out.data().par_chunks(oh * ow * c))
            .map(|((gin, inp), gout)| per_sample(gout, inp, Some(gin)))
            .collect()
    } else {
        input
            .data()
            .par_chunks(h * w * c)
            .zip(grad_out.data().par_chunks(oh * ow * c))
            .map(|(inp, gout)| per_sample(gout, inp, None))
            .collect()
    };
    let grad_kernel = sum_partials(partials, klen);
    let grad_in = need_input_grad.then(|| Tensor::new_unchecked(vec![n, h, w, c], grad_in));
    Ok((grad_in, Tensor::new_unchecked(kernel.shape().to_vec(), grad_kernel)))
}

fn sum_partials<T: Real>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in partials {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    acc
}

pub(crate) fn pointwise_shapes<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<([usize; 4], usize)> {
    let op = "pointwise_conv2d";
    let dims = input.dims4(op)?;
    let [ci, co] = match weights.shape()[..] {
        [a, b] => [a, b],
        _ => {
            return Err(Error::Shape {
                op,
                shape: weights.shape().to_vec(),
                reason: "weights must be (C_in, C_out)".into(),
            })
        }
    };
    if ci != dims[3] {
        return Err(Error::Dimension {
            op,
            axis: "channels",
            expected: dims[3],
            found: ci,
        });
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::Dimension {
                op,
                axis: "bias",
                expected: co,
                found: b.shape().iter().product(),
            });
        }
    }
    Ok((dims, co))
}

pub fn pointwise_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let ([n, h, w, ci], co) = pointwise_shapes(input, weights, bias)?;
    let wdata = weights.data();
    let mut out = vec![T::zero(); n * h * w * co];
    out.par_chunks_mut(h * w * co)
        .zip(input.data().par_chunks(h * w * ci))
        .for_each(|(out, inp)| {
            for (o, x) in out.chunks_exact_mut(co).zip(inp.chunks_exact(ci)) {
                if let Some(b) = bias {
                    o.copy_from_slice(b.data());
                }
                for (&xv, wrow) in x.iter().zip(wdata.chunks_exact(co)) {
                    for (ov, &wv) in o.iter_mut().zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
        });
    Ok(Tensor::new_unchecked(vec![n, h, w, co], out))
}

pub struct PointwiseGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn pointwise_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<PointwiseGrads<T>> {
    let ([n, h, w, ci], co) = pointwise_shapes(input, weights, None)?;
    let wdata = weights.data();
    let per_sample = |inp: &[T], gout: &[T], mut gin: Option<&mut [T]>| -> (Vec<T>, Vec<T>) {
        let mut gw = vec![T::zero(); ci * co];
        let mut gb = vec![T::zero(); co];
        for (p, (x, go)) in inp.chunks_exact(ci).zip(gout.chunks_exact(co)).enumerate() {
            for (b, &g) in gb.iter_mut().zip(go) {
                *b += g;
            }
            for (i, &xv) in x.iter().enumerate() {
                let wrow = &wdata[i * co..][..co];
                for (gwv, &g) in gw[i * co..][..co].iter_mut().zip(go) {
                    *gwv += xv * g;
                }
                if let Some(gin) = gin.as_deref_mut() {
                    gin[p * ci + i] = wrow.iter().zip(go).map(|(&wv, &g)| wv * g).sum();
                }
            }
        }
        (gw, gb)
    };
    let mut grad_in = if need_input_grad {
        vec![T::zero(); input.len()]
    } else {
        Vec::new()
    };
    let partials: Vec<(Vec<T>, Vec<T>)> = if need_input_grad {
        grad_in
            .par_chunks_mut(h * w * ci)
            .zip(input.data().par_chunks(h * w * ci))
            .zip(grad_out.data().par_chunks(h * w * co))
            .map(|((gin, inp), gout)| per_sample(inp, gout, Some(gin)))
            .collect()
    } else {
        input
            .data()
            .par_chunks(h * w * ci)
            .zip(grad_out.data().par_chunks(h * w * co))
            .map(|(inp, gout)| per_sample(inp, gout, None))
            .collect()
    };
    let (gws, gbs): (Vec<_>, Vec<_>) = partials.into_iter().unzip();
    Ok(PointwiseGrads {
        input: need_input_grad.then(|| Tensor::new_unchecked(vec![n, h, w, ci], grad_in)),
        weights: Tensor::new_unchecked(vec![ci, co], sum_partials(gws, ci * co)),
        bias: Tensor::new_unchecked(vec![co], sum_partials(gbs, co)),
    })
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_last<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let c = *input.shape().last().unwrap_or(&1);
    let mut out = input.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub fn log_softmax_last<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let c = *input.shape().last().unwrap_or(&1);
    let mut out = input.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// `(outer, axis, inner)` extents around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Mean along `axis`, keeping the axis with extent 1.
pub fn reduce_mean<T: Real>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= input.rank() {
        return Err(Error::AxisOutOfRange {
            op: "reduce_mean",
            axis,
            rank: input.rank(),
        });
    }
    let (outer, len, inner) = split_axis(input.shape(), axis);
    let scale = T::one() / T::from_usize(len);
    let data = input.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..][..inner];
        for a in 0..len {
            let src = &data[(o * len + a) * inner..][..inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        for d in dst.iter_mut() {
            *d *= scale;
        }
    }
    let mut shape = input.shape().to_vec();
    shape[axis] = 1;
    Ok(Tensor::new_unchecked(shape, out))
}

/// Cached quantities of a standardization, reused by the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    /// Standardized input before the affine transform.
    pub xhat: Tensor<T>,
    /// `1 / sqrt(var + eps)` per group.
    pub inv_std: Vec<T>,
}

/// Per-sample standardization over all of `(H, W, C)` followed by a
/// per-channel affine map.
pub fn layer_norm_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let [n, h, w, c] = input.dims4("layer_norm")?;
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(Error::Dimension {
                op: "layer_norm",
                axis: "channels",
                expected: c,
                found: p.len(),
            });
        }
    }
    let m = h * w * c;
    let count = T::from_usize(m);
    let mut xhat = input.clone();
    let mut out = input.clone();
    let mut inv_std = Vec::with_capacity(n);
    for (xs, ys) in xhat
        .data_mut()
        .chunks_exact_mut(m)
        .zip(out.data_mut().chunks_exact_mut(m))
    {
        let mean = xs.iter().copied().sum::<T>() / count;
        let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / count;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for (px, py) in xs.chunks_exact_mut(c).zip(ys.chunks_exact_mut(c)) {
            for (((x, y), &g), &b) in px.iter_mut().zip(py.iter_mut()).zip(gamma.data()).zip(beta.data()) {
                *x = (*x - mean) * is;
                *y = g * *x + b;
            }
        }
    }
    Ok((out, NormCache { xhat, inv_std }))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn layer_norm_backward<T: Real>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.len();
    let n = cache.inv_std.len();
    let m = cache.xhat.len() / n;
    let count = T::from_usize(m);
    let mut gx = Tensor::zeros_like(&cache.xhat);
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for (((xs, gs), gxs), &is) in cache
        .xhat
        .data()
        .chunks_exact(m)
        .zip(grad_out.data().chunks_exact(m))
        .zip(gx.data_mut().chunks_exact_mut(m))
        .zip(&cache.inv_std)
    {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for (i, (&x, &g)) in xs.iter().zip(gs).enumerate() {
            let ch = i % c;
            gg[ch] += g * x;
            gb[ch] += g;
            let d = g * gamma.data()[ch];
            sum_d += d;
            sum_dx += d * x;
        }
        let mean_d = sum_d / count;
        let mean_dx = sum_dx / count;
        for (i, ((gxv, &x), &g)) in gxs.iter_mut().zip(xs).zip(gs).enumerate() {
            let d = g * gamma.data()[i % c];
            *gxv = is * (d - mean_d - x * mean_dx);
        }
    }
    (
        gx,
        Tensor::new_unchecked(vec![c], gg),
        Tensor::new_unchecked(vec![c], gb),
    )
}

/// Per-channel mean and biased variance over `(N, H, W)`.
pub fn channel_moments<T: Real>(input: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let [n, h, w, c] = input.dims4("batch_norm")?;
    let count = n * h * w;
    let mut mean = vec![T::zero(); c];
    for px in input.data().chunks_exact(c) {
        for (m, &x) in mean.iter_mut().zip(px) {
            *m += x;
        }
    }
    let cnt = T::from_usize(count);
    mean.iter_mut().for_each(|m| *m /= cnt);
    let mut var = vec![T::zero(); c];
    for px in input.data().chunks_exact(c) {
        for ((v, &x), &m) in var.iter_mut().zip(px).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= cnt);
    Ok((mean, var))
}

/// `xhat = (x - shift[c]) * scale[c]` per channel.
pub fn channel_affine<T: Real>(input: &Tensor<T>, shift: &[T], scale: &[T]) -> Tensor<T> {
    let c = shift.len();
    let mut out = input.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for ((x, &s), &k) in px.iter_mut().zip(shift).zip(scale) {
            *x = (*x - s) * k;
        }
    }
    out
}

/// Backward of per-channel standardization using batch statistics:
/// `d = upstream * r[c]`, `dx = inv_std * (d - mean(d) - xhat * mean(d * xhat))`.
pub fn batch_standardize_backward<T: Real>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    upstream: &Tensor<T>,
) -> Tensor<T> {
    let c = inv_std.len();
    let rows = xhat.len() / c;
    let cnt = T::from_usize(rows);
    let mut sum_d = vec![T::zero(); c];
    let mut sum_dx = vec![T::zero(); c];
    for (xs, ds) in xhat.data().chunks_exact(c).zip(upstream.data().chunks_exact(c)) {
        for ch in 0..c {
            sum_d[ch] += ds[ch];
            sum_dx[ch] += ds[ch] * xs[ch];
        }
    }
    let mut gx = Tensor::zeros_like(xhat);
    for ((gs, xs), ds) in gx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(xhat.data().chunks_exact(c))
        .zip(upstream.data().chunks_exact(c))
    {
        for ch in 0..c {
            gs[ch] = inv_std[ch] * (ds[ch] - sum_d[ch] / cnt - xs[ch] * sum_dx[ch] / cnt);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let g = conv_geometry("t", 5, 6, 3, (1, 1), Padding::Same).unwrap();
        assert_eq!(g.out_hw, (5, 6));
        assert_eq!(g.pad, (1, 1));
        // K-1 = 1 is odd total padding under stride 2: extra row goes to the bottom.
        let g = conv_geometry("t", 6, 6, 2, (2, 2), Padding::Same).unwrap();
        assert_eq!(g.out_hw, (3, 3));
        assert_eq!(g.pad, (0, 0));
        let g = conv_geometry("t", 5, 5, 4, (2, 2), Padding::Same).unwrap();
        assert_eq!(g.out_hw, (3, 3));
        assert_eq!(g.pad, (1, 1));
        let g = conv_geometry("t", 7, 7, 3, (2, 2), Padding::Valid).unwrap();
        assert_eq!(g.out_hw, (3, 3));
        assert!(conv_geometry("t", 2, 7, 3, (1, 1), Padding::Valid).is_err());
    }

    #[test]
    fn softmax_of_zero_and_ln3() {
        let t = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let s = softmax_last(&t);
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn reduce_mean_axis_out_of_range() {
        let t = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            reduce_mean(&t, 2),
            Err(Error::AxisOutOfRange { axis: 2, rank: 2, .. })
        ));
    }
}

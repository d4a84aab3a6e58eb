//! Forward and backward compute kernels on `Tensor4`.
//!
//! These are plain functions over values; the tape records which kernel
//! produced which node and calls the matching backward during reverse
//! replay. Convolutions run at stride 1 with same-size padding and
//! support grouping (groups == 1 dense, groups == channels depthwise).

use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, Shape4, Tensor4};

pub const LAYER_NORM_EPS: f64 = 1e-6;

fn check_conv_shapes(x: &Tensor4, w: &Tensor4, groups: usize) -> Result<()> {
    let xs = x.shape();
    let ws = w.shape();
    if groups == 0 || xs.channels % groups != 0 || ws.batch % groups != 0 {
        return Err(Error::invalid(format!(
            "groups {} incompatible with in {} / out {} channels",
            groups, xs.channels, ws.batch
        )));
    }
    if ws.channels != xs.channels / groups {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.as_array().to_vec(),
            rhs: ws.as_array().to_vec(),
        });
    }
    if ws.height != ws.width || ws.height % 2 == 0 {
        return Err(Error::invalid(format!("kernel size {} must be odd", ws.height)));
    }
    Ok(())
}

/// Grouped 2-D convolution, stride 1, padding (k-1)/2.
/// `w` is (out_channels, in_channels/groups, k, k); `bias` is (1, out_channels, 1, 1).
pub fn conv2d_raw(x: &Tensor4, w: &Tensor4, bias: &Tensor4, groups: usize) -> Result<Tensor4> {
    check_conv_shapes(x, w, groups)?;
    let xs = x.shape();
    let ws = w.shape();
    let (out_c, k) = (ws.batch, ws.height);
    let pad = (k - 1) / 2;
    let group_in = xs.channels / groups;
    let group_out = out_c / groups;
    // a 1x1 kernel has no spatial extent, so the plane flattens to one row
    let (h, width) = if k == 1 { (1, xs.height * xs.width) } else { (xs.height, xs.width) };
    let xd = x.data();
    let wd = w.data();
    let mut od = vec![0.0f64; xs.batch * out_c * h * width];
    // fixed accumulation order: bias, then (cl, dy, dx) shifted-row adds
    for b in 0..xs.batch {
        for o in 0..out_c {
            let g = o / group_out;
            let o_base = (b * out_c + o) * h * width;
            od[o_base..o_base + h * width].fill(bias.data()[o]);
            for cl in 0..group_in {
                let ci = g * group_in + cl;
                let x_ch = (b * xs.channels + ci) * h * width;
                let w_ch = (o * group_in + cl) * k * k;
                for dy in 0..k {
                    for y in 0..h {
                        let yi = y + dy;
                        if yi < pad || yi >= h + pad {
                            continue;
                        }
                        let xr = &xd[x_ch + (yi - pad) * width..][..width];
                        let or = &mut od[o_base + y * width..][..width];
                        let wrow = &wd[w_ch + dy * k..][..k];
                        match k {
                            1 => row_conv_fwd::<1>(xr, or, wrow, pad),
                            3 => row_conv_fwd::<3>(xr, or, wrow, pad),
                            5 => row_conv_fwd::<5>(xr, or, wrow, pad),
                            7 => row_conv_fwd::<7>(xr, or, wrow, pad),
                            _ => row_conv_fwd_any(xr, or, wrow, pad, k),
                        }
                    }
                }
            }
        }
    }
    Tensor4::from_vec(Shape4::new(xs.batch, out_c, xs.height, xs.width), od)
}

/// One output row of a 1-D convolution pass: or[x] += Σ_dx w[dx]·xr[x+dx-pad],
/// taps outside the row dropped. Monomorphized per kernel size so the
/// interior loop unrolls and vectorizes.
#[inline]
fn row_conv_fwd<const K: usize>(xr: &[f64], or: &mut [f64], wrow: &[f64], pad: usize) {
    let width = xr.len();
    let w: &[f64; K] = wrow.try_into().expect("row length");
    let lo = pad.min(width);
    let hi = width.saturating_sub(pad).max(lo);
    for xcol in 0..lo {
        let mut acc = 0.0;
        for (dx, wv) in w.iter().enumerate() {
            let xi = xcol + dx;
            if xi >= pad && xi < width + pad {
                acc += wv * xr[xi - pad];
            }
        }
        or[xcol] += acc;
    }
    for xcol in lo..hi {
        let base = xcol - pad;
        let mut acc = 0.0;
        for (dx, wv) in w.iter().enumerate() {
            acc += wv * xr[base + dx];
        }
        or[xcol] += acc;
    }
    for xcol in hi..width {
        let mut acc = 0.0;
        for (dx, wv) in w.iter().enumerate() {
            let xi = xcol + dx;
            if xi >= pad && xi < width + pad {
                acc += wv * xr[xi - pad];
            }
        }
        or[xcol] += acc;
    }
}

fn row_conv_fwd_any(xr: &[f64], or: &mut [f64], wrow: &[f64], pad: usize, k: usize) {
    let width = xr.len();
    for (xcol, ov) in or.iter_mut().enumerate() {
        let mut acc = 0.0;
        for dx in 0..k {
            let xi = xcol + dx;
            if xi >= pad && xi < width + pad {
                acc += wrow[dx] * xr[xi - pad];
            }
        }
        *ov += acc;
    }
}

/// Weight-gradient taps for one row pair: gw[dx] += Σ_x gor[x]·xr[x+dx-pad].
#[inline]
fn row_conv_gw<const K: usize>(xr: &[f64], gor: &[f64], gw_row: &mut [f64], pad: usize) {
    let width = xr.len();
    let mut acc = [0.0f64; K];
    let lo = pad.min(width);
    let hi = width.saturating_sub(pad).max(lo);
    for (xcol, &gv) in gor.iter().enumerate().take(lo) {
        for (dx, a) in acc.iter_mut().enumerate() {
            let xi = xcol + dx;
            if xi >= pad && xi < width + pad {
                *a += gv * xr[xi - pad];
            }
        }
    }
    for xcol in lo..hi {
        let gv = gor[xcol];
        let base = xcol - pad;
        for (dx, a) in acc.iter_mut().enumerate() {
            *a += gv * xr[base + dx];
        }
    }
    for xcol in hi..width {
        let gv = gor[xcol];
        for (dx, a) in acc.iter_mut().enumerate() {
            let xi = xcol + dx;
            if xi >= pad && xi < width + pad {
                *a += gv * xr[xi - pad];
            }
        }
    }
    for (dx, a) in acc.iter().enumerate() {
        gw_row[dx] += a;
    }
}

fn row_conv_gw_any(xr: &[f64], gor: &[f64], gw_row: &mut [f64], pad: usize, k: usize) {
    let width = xr.len();
    for (xcol, &gv) in gor.iter().enumerate() {
        for dx in 0..k {
            let xi = xcol + dx;
            if xi >= pad && xi < width + pad {
                gw_row[dx] += gv * xr[xi - pad];
            }
        }
    }
}

/// Gradients of `conv2d_raw` w.r.t. input, weights, and bias.
pub fn conv2d_backward(
    x: &Tensor4,
    w: &Tensor4,
    groups: usize,
    gout: &Tensor4,
) -> (Tensor4, Tensor4, Tensor4) {
    let xs = x.shape();
    let ws = w.shape();
    let (out_c, k) = (ws.batch, ws.height);
    let pad = (k - 1) / 2;
    let group_in = xs.channels / groups;
    let group_out = out_c / groups;
    let (h, width) = if k == 1 { (1, xs.height * xs.width) } else { (xs.height, xs.width) };
    let xd = x.data();
    let wd = w.data();
    let god = gout.data();
    let mut gxd = vec![0.0f64; xd.len()];
    let mut gwd = vec![0.0f64; wd.len()];
    let mut gbd = vec![0.0f64; out_c];
    for b in 0..xs.batch {
        for o in 0..out_c {
            let g = o / group_out;
            let go_ch = (b * out_c + o) * h * width;
            gbd[o] += god[go_ch..go_ch + h * width].iter().sum::<f64>();
            for cl in 0..group_in {
                let ci = g * group_in + cl;
                let x_ch = (b * xs.channels + ci) * h * width;
                let w_ch = (o * group_in + cl) * k * k;
                for dy in 0..k {
                    let wrow = &wd[w_ch + dy * k..][..k];
                    // gx is a correlation with the taps reversed
                    let wrev: Vec<f64> = wrow.iter().rev().copied().collect();
                    let gw_row = &mut gwd[w_ch + dy * k..w_ch + dy * k + k];
                    for y in 0..h {
                        let yi = y + dy;
                        if yi < pad || yi >= h + pad {
                            continue;
                        }
                        let xr = &xd[x_ch + (yi - pad) * width..][..width];
                        let gor = &god[go_ch + y * width..][..width];
                        let gxr = &mut gxd[x_ch + (yi - pad) * width..][..width];
                        match k {
                            1 => {
                                row_conv_fwd::<1>(gor, gxr, &wrev, pad);
                                row_conv_gw::<1>(xr, gor, gw_row, pad);
                            }
                            3 => {
                                row_conv_fwd::<3>(gor, gxr, &wrev, pad);
                                row_conv_gw::<3>(xr, gor, gw_row, pad);
                            }
                            5 => {
                                row_conv_fwd::<5>(gor, gxr, &wrev, pad);
                                row_conv_gw::<5>(xr, gor, gw_row, pad);
                            }
                            7 => {
                                row_conv_fwd::<7>(gor, gxr, &wrev, pad);
                                row_conv_gw::<7>(xr, gor, gw_row, pad);
                            }
                            _ => {
                                row_conv_fwd_any(gor, gxr, &wrev, pad, k);
                                row_conv_gw_any(xr, gor, gw_row, pad, k);
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor4::from_vec(xs, gxd).expect("gx shape"),
        Tensor4::from_vec(ws, gwd).expect("gw shape"),
        Tensor4::from_vec(Shape4::new(1, out_c, 1, 1), gbd).expect("gb shape"),
    )
}

/// Dense convolution with a `ConvKernel` value (inference path).
pub fn conv2d(x: &Tensor4, k: &ConvKernel) -> Result<Tensor4> {
    if k.in_channels() != x.shape().channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().as_array().to_vec(),
            rhs: k.weights.shape().as_array().to_vec(),
        });
    }
    let bias = Tensor4::from_vec(Shape4::new(1, k.out_channels(), 1, 1), k.bias.clone())?;
    conv2d_raw(x, &k.weights, &bias, k.groups)
}

/// Depthwise convolution: one k×k filter per channel, channels never mix.
pub fn dwconv2d(x: &Tensor4, k: &ConvKernel) -> Result<Tensor4> {
    if k.groups != x.shape().channels || k.out_channels() != x.shape().channels {
        return Err(Error::ShapeMismatch {
            op: "dwconv2d",
            lhs: x.shape().as_array().to_vec(),
            rhs: k.weights.shape().as_array().to_vec(),
        });
    }
    conv2d(x, k)
}

/// Normalize across channels at every (batch, y, x) position, then apply
/// a per-channel affine. `gamma`/`beta` are (1, C, 1, 1).
pub fn layer_norm(x: &Tensor4, gamma: &Tensor4, beta: &Tensor4) -> Result<Tensor4> {
    let s = x.shape();
    if gamma.shape().channels != s.channels || beta.shape().channels != s.channels {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: s.as_array().to_vec(),
            rhs: gamma.shape().as_array().to_vec(),
        });
    }
    let c = s.channels;
    let mut out = Tensor4::zeros(s);
    for b in 0..s.batch {
        for y in 0..s.height {
            for xcol in 0..s.width {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += x.at(b, ci, y, xcol);
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = x.at(b, ci, y, xcol) - mean;
                    var += d * d;
                }
                var /= c as f64;
                let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for ci in 0..c {
                    let xhat = (x.at(b, ci, y, xcol) - mean) * inv_std;
                    out.set(b, ci, y, xcol, gamma.data()[ci] * xhat + beta.data()[ci]);
                }
            }
        }
    }
    Ok(out)
}

pub fn layer_norm_backward(
    x: &Tensor4,
    gamma: &Tensor4,
    gout: &Tensor4,
) -> (Tensor4, Tensor4, Tensor4) {
    let s = x.shape();
    let c = s.channels;
    let cf = c as f64;
    let mut gx = Tensor4::zeros(s);
    let mut ggamma = Tensor4::zeros(Shape4::new(1, c, 1, 1));
    let mut gbeta = Tensor4::zeros(Shape4::new(1, c, 1, 1));
    for b in 0..s.batch {
        for y in 0..s.height {
            for xcol in 0..s.width {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += x.at(b, ci, y, xcol);
                }
                mean /= cf;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = x.at(b, ci, y, xcol) - mean;
                    var += d * d;
                }
                var /= cf;
                let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                // dxhat = gout * gamma; reduce the two means over channels first
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for ci in 0..c {
                    let xhat = (x.at(b, ci, y, xcol) - mean) * inv_std;
                    let go = gout.at(b, ci, y, xcol);
                    let dxhat = go * gamma.data()[ci];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    ggamma.data_mut()[ci] += go * xhat;
                    gbeta.data_mut()[ci] += go;
                }
                for ci in 0..c {
                    let xhat = (x.at(b, ci, y, xcol) - mean) * inv_std;
                    let dxhat = gout.at(b, ci, y, xcol) * gamma.data()[ci];
                    let v = inv_std * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
                    gx.set(b, ci, y, xcol, v);
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// PReLU with per-channel slope `alpha` shaped (1, C, 1, 1).
pub fn prelu(x: &Tensor4, alpha: &Tensor4) -> Result<Tensor4> {
    let s = x.shape();
    if alpha.shape().channels != s.channels {
        return Err(Error::ShapeMismatch {
            op: "prelu",
            lhs: s.as_array().to_vec(),
            rhs: alpha.shape().as_array().to_vec(),
        });
    }
    let mut out = Tensor4::zeros(s);
    for b in 0..s.batch {
        for ci in 0..s.channels {
            let a = alpha.data()[ci];
            for y in 0..s.height {
                for xcol in 0..s.width {
                    let v = x.at(b, ci, y, xcol);
                    out.set(b, ci, y, xcol, if v >= 0.0 { v } else { a * v });
                }
            }
        }
    }
    Ok(out)
}

pub fn prelu_backward(x: &Tensor4, alpha: &Tensor4, gout: &Tensor4) -> (Tensor4, Tensor4) {
    let s = x.shape();
    let mut gx = Tensor4::zeros(s);
    let mut galpha = Tensor4::zeros(Shape4::new(1, s.channels, 1, 1));
    for b in 0..s.batch {
        for ci in 0..s.channels {
            let a = alpha.data()[ci];
            for y in 0..s.height {
                for xcol in 0..s.width {
                    let v = x.at(b, ci, y, xcol);
                    let go = gout.at(b, ci, y, xcol);
                    if v >= 0.0 {
                        gx.set(b, ci, y, xcol, go);
                    } else {
                        gx.set(b, ci, y, xcol, a * go);
                        galpha.data_mut()[ci] += v * go;
                    }
                }
            }
        }
    }
    (gx, galpha)
}

pub fn channel_concat(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width {
        return Err(Error::ShapeMismatch {
            op: "channel_concat",
            lhs: sa.as_array().to_vec(),
            rhs: sb.as_array().to_vec(),
        });
    }
    let out_shape = Shape4::new(sa.batch, sa.channels + sb.channels, sa.height, sa.width);
    let mut out = Tensor4::zeros(out_shape);
    let plane = sa.height * sa.width;
    for bi in 0..sa.batch {
        let dst = out.data_mut();
        let base = bi * out_shape.channels * plane;
        let a_src = &a.data()[bi * sa.channels * plane..(bi + 1) * sa.channels * plane];
        dst[base..base + a_src.len()].copy_from_slice(a_src);
        let b_src = &b.data()[bi * sb.channels * plane..(bi + 1) * sb.channels * plane];
        dst[base + a_src.len()..base + a_src.len() + b_src.len()].copy_from_slice(b_src);
    }
    Ok(out)
}

/// Copy channels [start, start+len) of `x` into a new tensor.
pub fn slice_channels(x: &Tensor4, start: usize, len: usize) -> Result<Tensor4> {
    let s = x.shape();
    if start + len > s.channels || len == 0 {
        return Err(Error::invalid(format!(
            "channel slice {}..{} out of range for {} channels",
            start,
            start + len,
            s.channels
        )));
    }
    let plane = s.height * s.width;
    let mut out = Tensor4::zeros(Shape4::new(s.batch, len, s.height, s.width));
    for bi in 0..s.batch {
        let src = &x.data()[(bi * s.channels + start) * plane..(bi * s.channels + start + len) * plane];
        out.data_mut()[bi * len * plane..(bi + 1) * len * plane].copy_from_slice(src);
    }
    Ok(out)
}

pub fn channel_split(x: &Tensor4, c: usize) -> Result<(Tensor4, Tensor4)> {
    let total = x.shape().channels;
    if c == 0 || c >= total {
        return Err(Error::invalid(format!("split point {} invalid for {} channels", c, total)));
    }
    Ok((slice_channels(x, 0, c)?, slice_channels(x, c, total - c)?))
}

/// Two-way softmax across the (wa, wb) logit pair at every element.
/// Stabilized by subtracting the pairwise max before exponentiation.
pub fn paired_softmax(wa: &Tensor4, wb: &Tensor4) -> Result<(Tensor4, Tensor4)> {
    if wa.shape() != wb.shape() {
        return Err(Error::ShapeMismatch {
            op: "paired_softmax",
            lhs: wa.shape().as_array().to_vec(),
            rhs: wb.shape().as_array().to_vec(),
        });
    }
    let mut oa = Tensor4::zeros(wa.shape());
    let mut ob = Tensor4::zeros(wa.shape());
    for i in 0..wa.numel() {
        let (a, b) = (wa.data()[i], wb.data()[i]);
        let m = a.max(b);
        let ea = (a - m).exp();
        let eb = (b - m).exp();
        let denom = ea + eb;
        oa.data_mut()[i] = ea / denom;
        ob.data_mut()[i] = eb / denom;
    }
    Ok((oa, ob))
}

/// 2×2 average pooling; spatial dims must be even.
pub fn downsample2x(x: &Tensor4) -> Result<Tensor4> {
    let s = x.shape();
    if s.height % 2 != 0 || s.width % 2 != 0 {
        return Err(Error::invalid(format!(
            "downsample2x needs even spatial dims, got {}x{}",
            s.height, s.width
        )));
    }
    let mut out = Tensor4::zeros(Shape4::new(s.batch, s.channels, s.height / 2, s.width / 2));
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..s.height / 2 {
                for xcol in 0..s.width / 2 {
                    let v = (x.at(b, c, 2 * y, 2 * xcol)
                        + x.at(b, c, 2 * y, 2 * xcol + 1)
                        + x.at(b, c, 2 * y + 1, 2 * xcol)
                        + x.at(b, c, 2 * y + 1, 2 * xcol + 1))
                        / 4.0;
                    out.set(b, c, y, xcol, v);
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor 2× upsampling (the learnable 1×1 mixing lives in the
/// network definition, not here).
pub fn upsample_nearest2x(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let mut out = Tensor4::zeros(Shape4::new(s.batch, s.channels, s.height * 2, s.width * 2));
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..s.height * 2 {
                for xcol in 0..s.width * 2 {
                    out.set(b, c, y, xcol, x.at(b, c, y / 2, xcol / 2));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(b: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        Tensor4::full(Shape4::new(b, c, h, w), 1.0)
    }

    #[test]
    fn identity_1x1_kernel() {
        let x = ones(1, 1, 2, 2);
        let k = ConvKernel::new(
            Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![1.0]).unwrap(),
            vec![0.0],
            1,
        )
        .unwrap();
        let y = conv2d(&x, &k).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn full_window_sum_center() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 3, 3), (1..=9).map(|v| v as f64).collect())
            .unwrap();
        let k = ConvKernel::new(Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0), vec![0.0], 1).unwrap();
        let y = conv2d(&x, &k).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 45.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = ones(1, 2, 4, 4);
        let k = ConvKernel::new(Tensor4::zeros(Shape4::new(1, 3, 3, 3)), vec![0.0], 1).unwrap();
        let err = conv2d(&x, &k).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn dwconv_delta_kernel_is_identity() {
        let x = Tensor4::from_vec(
            Shape4::new(1, 2, 3, 3),
            (0..18).map(|v| v as f64 * 0.3 - 2.0).collect(),
        )
        .unwrap();
        let mut w = Tensor4::zeros(Shape4::new(2, 1, 3, 3));
        w.set(0, 0, 1, 1, 1.0);
        w.set(1, 0, 1, 1, 1.0);
        let k = ConvKernel::new(w, vec![0.0; 2], 2).unwrap();
        let y = dwconv2d(&x, &k).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn dwconv_never_mixes_channels() {
        let mut x = ones(1, 2, 4, 4);
        let k = ConvKernel::new(Tensor4::full(Shape4::new(2, 1, 3, 3), 0.5), vec![0.0; 2], 2)
            .unwrap();
        let y0 = dwconv2d(&x, &k).unwrap();
        x.set(0, 0, 2, 2, 100.0); // perturb channel 0 only
        let y1 = dwconv2d(&x, &k).unwrap();
        let c1_before = slice_channels(&y0, 1, 1).unwrap();
        let c1_after = slice_channels(&y1, 1, 1).unwrap();
        assert_eq!(c1_before, c1_after);
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let x = Tensor4::full(Shape4::new(1, 4, 2, 2), 3.7);
        let gamma = Tensor4::full(Shape4::new(1, 4, 1, 1), 1.0);
        let beta = Tensor4::zeros(Shape4::new(1, 4, 1, 1));
        let y = layer_norm(&x, &gamma, &beta).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_two_channel_closed_form() {
        let x = Tensor4::from_vec(Shape4::new(1, 2, 1, 1), vec![1.0, 3.0]).unwrap();
        let gamma = Tensor4::full(Shape4::new(1, 2, 1, 1), 1.0);
        let beta = Tensor4::zeros(Shape4::new(1, 2, 1, 1));
        let y = layer_norm(&x, &gamma, &beta).unwrap();
        let mu = 2.0;
        let s = (1.0f64 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - (1.0 - mu) / s).abs() < 1e-12);
        assert!((y.data()[1] - (3.0 - mu) / s).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_moments() {
        let x = Tensor4::from_vec(
            Shape4::new(1, 8, 2, 2),
            (0..32).map(|v| (v as f64 * 0.77).sin() * 10.0).collect(),
        )
        .unwrap();
        let gamma = Tensor4::full(Shape4::new(1, 8, 1, 1), 1.0);
        let beta = Tensor4::zeros(Shape4::new(1, 8, 1, 1));
        let y = layer_norm(&x, &gamma, &beta).unwrap();
        for yy in 0..2 {
            for xx in 0..2 {
                let vals: Vec<f64> = (0..8).map(|c| y.at(0, c, yy, xx)).collect();
                let mean = vals.iter().sum::<f64>() / 8.0;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
                assert!(mean.abs() < 1e-8);
                assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn prelu_definition() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let alpha = Tensor4::full(Shape4::new(1, 1, 1, 1), 0.25);
        let y = prelu(&x, &alpha).unwrap();
        assert_eq!(y.data(), &[-0.25, 0.0, 2.0]);
        let id = prelu(&x, &Tensor4::full(Shape4::new(1, 1, 1, 1), 1.0)).unwrap();
        assert_eq!(id, x);
        let relu = prelu(&x, &Tensor4::zeros(Shape4::new(1, 1, 1, 1))).unwrap();
        assert_eq!(relu.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor4::from_vec(Shape4::new(2, 2, 2, 2), (0..16).map(|v| v as f64).collect())
            .unwrap();
        let b = Tensor4::from_vec(Shape4::new(2, 3, 2, 2), (0..24).map(|v| -(v as f64)).collect())
            .unwrap();
        let cat = channel_concat(&a, &b).unwrap();
        assert_eq!(cat.shape().channels, 5);
        let (a2, b2) = channel_split(&cat, 2).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn paired_softmax_symmetry_and_closed_form() {
        let wa = Tensor4::full(Shape4::new(1, 1, 1, 2), 0.3);
        let wb = Tensor4::full(Shape4::new(1, 1, 1, 2), 0.3);
        let (oa, ob) = paired_softmax(&wa, &wb).unwrap();
        assert!(oa.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
        assert!(ob.data().iter().all(|v| (v - 0.5).abs() < 1e-15));

        let wa = Tensor4::full(Shape4::new(1, 1, 1, 1), 2.0f64.ln());
        let wb = Tensor4::zeros(Shape4::new(1, 1, 1, 1));
        let (oa, ob) = paired_softmax(&wa, &wb).unwrap();
        assert!((oa.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((ob.data()[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn paired_softmax_stable_at_large_magnitude() {
        let wa = Tensor4::full(Shape4::new(1, 1, 1, 1), 1e4);
        let wb = Tensor4::full(Shape4::new(1, 1, 1, 1), -1e4);
        let (oa, ob) = paired_softmax(&wa, &wb).unwrap();
        assert!(oa.is_finite() && ob.is_finite());
        assert!((oa.data()[0] + ob.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn downsample_average_and_constancy() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = downsample2x(&x).unwrap();
        assert_eq!(y.data(), &[2.5]);

        let c = Tensor4::full(Shape4::new(1, 2, 4, 4), 0.7);
        let d = downsample2x(&c).unwrap();
        assert!(d.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        let u = upsample_nearest2x(&c);
        assert!(u.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        let back = downsample2x(&upsample_nearest2x(&c)).unwrap();
        assert!(back.max_abs_diff(&c) < 1e-15);
    }

    #[test]
    fn downsample_rejects_odd_dims() {
        assert!(downsample2x(&ones(1, 1, 3, 4)).is_err());
    }
}

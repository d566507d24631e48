//! Scalar kernels behind the tape ops.
//!
//! All functions work on flat row-major slices with explicit dims so the
//! differentiated path (tape) and the plain path (data synthesis, metrics)
//! share one implementation. Layout for volumetric tensors is
//! `[batch, channel, depth, height, width]`; displacement fields carry the
//! (depth, height, width) components in channels 0/1/2, in voxel units.
//!
//! Everything here is single-threaded and runs in a fixed order, so results
//! are bit-reproducible run to run.

use crate::error::{Error, Result};

/// Output dims of a cross-correlation with a cubic odd kernel.
pub fn conv3d_out_dims(xs: [usize; 5], ws: [usize; 5], stride: usize, pad: usize) -> Result<[usize; 5]> {
    let [b, cin, d, h, w] = xs;
    let [cout, wcin, kd, kh, kw] = ws;
    if kd != kh || kh != kw {
        return Err(Error::shape(format!("conv3d kernel must be cubic, got {}x{}x{}", kd, kh, kw)));
    }
    if kd % 2 == 0 {
        return Err(Error::shape(format!("conv3d kernel extent must be odd, got {}", kd)));
    }
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv3d input has {} channels but weight expects {}",
            cin, wcin
        )));
    }
    if stride == 0 {
        return Err(Error::shape("conv3d stride must be >= 1".to_string()));
    }
    let ext = |n: usize| -> Result<usize> {
        let span = (n + 2 * pad)
            .checked_sub(kd)
            .ok_or_else(|| Error::shape(format!("conv3d output extent non-positive for input extent {}", n)))?;
        if span % stride != 0 {
            return Err(Error::shape(format!(
                "conv3d extent {} with pad {} and kernel {} is not divisible by stride {}",
                n, pad, kd, stride
            )));
        }
        Ok(span / stride + 1)
    };
    Ok([b, cout, ext(d)?, ext(h)?, ext(w)?])
}

/// Cross-correlation (deep-learning convention: no kernel flip).
pub fn conv3d_forward(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    bias: &[f64],
    stride: usize,
    pad: usize,
    os: [usize; 5],
) -> Vec<f64> {
    let [bsz, cin, d, h, wd] = xs;
    let [cout, _, k, _, _] = ws;
    let [_, _, od, oh, ow] = os;
    let in_sp = d * h * wd;
    let out_sp = od * oh * ow;
    let k3 = k * k * k;
    let mut out = vec![0.0; bsz * cout * out_sp];
    for b in 0..bsz {
        for co in 0..cout {
            let o = &mut out[(b * cout + co) * out_sp..][..out_sp];
            o.fill(bias[co]);
            for ci in 0..cin {
                let xc = &x[(b * cin + ci) * in_sp..][..in_sp];
                let wc = &w[(co * cin + ci) * k3..][..k3];
                if stride == 1 {
                    corr_accum_s1(xc, [d, h, wd], wc, k, pad, o, [od, oh, ow]);
                } else {
                    corr_accum_gen(xc, [d, h, wd], wc, k, stride, pad, o, [od, oh, ow]);
                }
            }
        }
    }
    out
}

/// out[p] += sum_k w[k] * x[p + k - pad], stride 1, zero padding.
#[allow(clippy::too_many_arguments)]
fn corr_accum_s1(
    x: &[f64],
    [d, h, wd]: [usize; 3],
    wk: &[f64],
    k: usize,
    pad: usize,
    out: &mut [f64],
    [od, oh, ow]: [usize; 3],
) {
    for kd in 0..k {
        let od_lo = pad.saturating_sub(kd);
        let od_hi = (d + pad).saturating_sub(kd).min(od);
        for kh in 0..k {
            let oh_lo = pad.saturating_sub(kh);
            let oh_hi = (h + pad).saturating_sub(kh).min(oh);
            for kw in 0..k {
                let wv = wk[(kd * k + kh) * k + kw];
                if wv == 0.0 {
                    continue;
                }
                let ow_lo = pad.saturating_sub(kw);
                let ow_hi = (wd + pad).saturating_sub(kw).min(ow);
                if ow_lo >= ow_hi || od_lo >= od_hi || oh_lo >= oh_hi {
                    continue;
                }
                let n = ow_hi - ow_lo;
                let iw0 = ow_lo + kw - pad;
                for odi in od_lo..od_hi {
                    let id = odi + kd - pad;
                    for ohi in oh_lo..oh_hi {
                        let ih = ohi + kh - pad;
                        let xrow = &x[(id * h + ih) * wd + iw0..][..n];
                        let orow = &mut out[(odi * oh + ohi) * ow + ow_lo..][..n];
                        for (ov, xv) in orow.iter_mut().zip(xrow) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

/// General-stride fallback, element at a time.
#[allow(clippy::too_many_arguments)]
fn corr_accum_gen(
    x: &[f64],
    [d, h, wd]: [usize; 3],
    wk: &[f64],
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
    [od, oh, ow]: [usize; 3],
) {
    for odi in 0..od {
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut acc = 0.0;
                for kd in 0..k {
                    let id = (odi * stride + kd) as isize - pad as isize;
                    if id < 0 || id >= d as isize {
                        continue;
                    }
                    for kh in 0..k {
                        let ih = (ohi * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (owi * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= wd as isize {
                                continue;
                            }
                            let xi = (id as usize * h + ih as usize) * wd + iw as usize;
                            acc += wk[(kd * k + kh) * k + kw] * x[xi];
                        }
                    }
                }
                out[(odi * oh + ohi) * ow + owi] += acc;
            }
        }
    }
}

/// Gradient w.r.t. the convolution input. Stride 1 takes the vectorized
/// row path; other strides fall back to an elementwise scatter.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward_input(
    g: &[f64],
    os: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    xs: [usize; 5],
    stride: usize,
    pad: usize,
    gx: &mut [f64],
) {
    if stride != 1 {
        return conv3d_backward_input_gen(g, os, w, ws, xs, stride, pad, gx);
    }
    let [bsz, cin, d, h, wd] = xs;
    let [cout, _, k, _, _] = ws;
    let [_, _, od, oh, ow] = os;
    let in_sp = d * h * wd;
    let out_sp = od * oh * ow;
    let k3 = k * k * k;
    for b in 0..bsz {
        for ci in 0..cin {
            let gxc = &mut gx[(b * cin + ci) * in_sp..][..in_sp];
            for co in 0..cout {
                let gc = &g[(b * cout + co) * out_sp..][..out_sp];
                let wc = &w[(co * cin + ci) * k3..][..k3];
                for kd in 0..k {
                    let od_lo = pad.saturating_sub(kd);
                    let od_hi = (d + pad).saturating_sub(kd).min(od);
                    for kh in 0..k {
                        let oh_lo = pad.saturating_sub(kh);
                        let oh_hi = (h + pad).saturating_sub(kh).min(oh);
                        for kw in 0..k {
                            let wv = wc[(kd * k + kh) * k + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            let ow_lo = pad.saturating_sub(kw);
                            let ow_hi = (wd + pad).saturating_sub(kw).min(ow);
                            if ow_lo >= ow_hi || od_lo >= od_hi || oh_lo >= oh_hi {
                                continue;
                            }
                            let n = ow_hi - ow_lo;
                            let iw0 = ow_lo + kw - pad;
                            for odi in od_lo..od_hi {
                                let id = odi + kd - pad;
                                for ohi in oh_lo..oh_hi {
                                    let ih = ohi + kh - pad;
                                    let grow = &gc[(odi * oh + ohi) * ow + ow_lo..][..n];
                                    let xrow = &mut gxc[(id * h + ih) * wd + iw0..][..n];
                                    for (xv, gv) in xrow.iter_mut().zip(grow) {
                                        *xv += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward_input_gen(
    g: &[f64],
    os: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    xs: [usize; 5],
    stride: usize,
    pad: usize,
    gx: &mut [f64],
) {
    let [bsz, cin, d, h, wd] = xs;
    let [cout, _, k, _, _] = ws;
    let [_, _, od, oh, ow] = os;
    let in_sp = d * h * wd;
    let out_sp = od * oh * ow;
    let k3 = k * k * k;
    for b in 0..bsz {
        for co in 0..cout {
            let gc = &g[(b * cout + co) * out_sp..][..out_sp];
            for odi in 0..od {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let gv = gc[(odi * oh + ohi) * ow + owi];
                        if gv == 0.0 {
                            continue;
                        }
                        for kd in 0..k {
                            let id = (odi * stride + kd) as isize - pad as isize;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for kh in 0..k {
                                let ih = (ohi * stride + kh) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kw in 0..k {
                                    let iw = (owi * stride + kw) as isize - pad as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        let xi = (b * cin + ci) * in_sp
                                            + (id as usize * h + ih as usize) * wd
                                            + iw as usize;
                                        gx[xi] += gv * w[(co * cin + ci) * k3 + (kd * k + kh) * k + kw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution weight; same stride split as the input
/// gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward_weight(
    g: &[f64],
    os: [usize; 5],
    x: &[f64],
    xs: [usize; 5],
    ws: [usize; 5],
    stride: usize,
    pad: usize,
    gw: &mut [f64],
) {
    if stride != 1 {
        return conv3d_backward_weight_gen(g, os, x, xs, ws, stride, pad, gw);
    }
    let [bsz, cin, d, h, wd] = xs;
    let [cout, _, k, _, _] = ws;
    let [_, _, od, oh, ow] = os;
    let in_sp = d * h * wd;
    let out_sp = od * oh * ow;
    let k3 = k * k * k;
    for co in 0..cout {
        for ci in 0..cin {
            let acc = &mut gw[(co * cin + ci) * k3..][..k3];
            for b in 0..bsz {
                let gc = &g[(b * cout + co) * out_sp..][..out_sp];
                let xc = &x[(b * cin + ci) * in_sp..][..in_sp];
                for kd in 0..k {
                    let od_lo = pad.saturating_sub(kd);
                    let od_hi = (d + pad).saturating_sub(kd).min(od);
                    for kh in 0..k {
                        let oh_lo = pad.saturating_sub(kh);
                        let oh_hi = (h + pad).saturating_sub(kh).min(oh);
                        for odi in od_lo..od_hi {
                            let id = odi + kd - pad;
                            for ohi in oh_lo..oh_hi {
                                let ih = ohi + kh - pad;
                                let grow_base = (odi * oh + ohi) * ow;
                                let xrow_base = (id * h + ih) * wd;
                                for kw in 0..k {
                                    let ow_lo = pad.saturating_sub(kw);
                                    let ow_hi = (wd + pad).saturating_sub(kw).min(ow);
                                    if ow_lo >= ow_hi {
                                        continue;
                                    }
                                    let n = ow_hi - ow_lo;
                                    let iw0 = ow_lo + kw - pad;
                                    acc[(kd * k + kh) * k + kw] +=
                                        dot(&gc[grow_base + ow_lo..][..n], &xc[xrow_base + iw0..][..n]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward_weight_gen(
    g: &[f64],
    os: [usize; 5],
    x: &[f64],
    xs: [usize; 5],
    ws: [usize; 5],
    stride: usize,
    pad: usize,
    gw: &mut [f64],
) {
    let [bsz, cin, d, h, wd] = xs;
    let [cout, _, k, _, _] = ws;
    let [_, _, od, oh, ow] = os;
    let in_sp = d * h * wd;
    let out_sp = od * oh * ow;
    let k3 = k * k * k;
    for b in 0..bsz {
        for co in 0..cout {
            let gc = &g[(b * cout + co) * out_sp..][..out_sp];
            for odi in 0..od {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let gv = gc[(odi * oh + ohi) * ow + owi];
                        if gv == 0.0 {
                            continue;
                        }
                        for kd in 0..k {
                            let id = (odi * stride + kd) as isize - pad as isize;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for kh in 0..k {
                                let ih = (ohi * stride + kh) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kw in 0..k {
                                    let iw = (owi * stride + kw) as isize - pad as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        let xi = (b * cin + ci) * in_sp
                                            + (id as usize * h + ih as usize) * wd
                                            + iw as usize;
                                        gw[(co * cin + ci) * k3 + (kd * k + kh) * k + kw] += gv * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_backward_bias(g: &[f64], os: [usize; 5], gb: &mut [f64]) {
    let [bsz, cout, od, oh, ow] = os;
    let out_sp = od * oh * ow;
    for b in 0..bsz {
        for co in 0..cout {
            let gc = &g[(b * cout + co) * out_sp..][..out_sp];
            gb[co] += gc.iter().sum::<f64>();
        }
    }
}

/// Sliding window sums along one spatial axis via prefix sums; windows are
/// clipped at the volume border (zero padding).
fn box_sum_axis(data: &mut [f64], dims: [usize; 3], axis: usize, half: usize) {
    let [d, h, w] = dims;
    let (n, lines, stride): (usize, usize, usize) = match axis {
        0 => (d, h * w, h * w),
        1 => (h, d * w, w),
        _ => (w, d * h, 1),
    };
    let mut prefix = vec![0.0f64; n + 1];
    for line in 0..lines {
        // Lines along h are strided by w but restart every plane.
        let start = match axis {
            0 => line,
            1 => (line / w) * h * w + line % w,
            _ => line * w,
        };
        for i in 0..n {
            prefix[i + 1] = prefix[i] + data[start + i * stride];
        }
        for i in 0..n {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            data[start + i * stride] = prefix[hi] - prefix[lo];
        }
    }
}

/// Sum over the cubic window of odd size `window` centered at each voxel,
/// clipped at the border. Equivalent to correlation with an all-ones kernel
/// at `pad = window/2`, but separable: O(1) per voxel per axis.
pub fn box_sum_forward(x: &[f64], xs: [usize; 5], window: usize) -> Vec<f64> {
    let [bsz, c, d, h, w] = xs;
    let half = window / 2;
    let sp = d * h * w;
    let mut out = x.to_vec();
    for bc in 0..bsz * c {
        let block = &mut out[bc * sp..][..sp];
        for axis in 0..3 {
            box_sum_axis(block, [d, h, w], axis, half);
        }
    }
    out
}

/// Four-lane dot product; fixed association order, so deterministic.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (pa, pb) in ca.zip(cb) {
        lanes[0] += pa[0] * pb[0];
        lanes[1] += pa[1] * pb[1];
        lanes[2] += pa[2] * pb[2];
        lanes[3] += pa[3] * pb[3];
    }
    let mut s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (pa, pb) in ra.iter().zip(rb) {
        s += pa * pb;
    }
    s
}

/// 2x2x2 max pooling. Returns the pooled values and, per output element, the
/// flat index (into the full input) of the max. Ties keep the first index in
/// scan order, which is what backward routes the gradient to.
pub fn maxpool3d_forward(x: &[f64], xs: [usize; 5]) -> Result<(Vec<f64>, Vec<usize>, [usize; 5])> {
    let [bsz, c, d, h, w] = xs;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool3d needs even spatial extents, got {}x{}x{}",
            d, h, w
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let out_sp = od * oh * ow;
    let in_sp = d * h * w;
    let mut out = vec![0.0; bsz * c * out_sp];
    let mut arg = vec![0usize; bsz * c * out_sp];
    for bc in 0..bsz * c {
        let base = bc * in_sp;
        let xc = &x[base..][..in_sp];
        for odi in 0..od {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for kd in 0..2 {
                        for kh in 0..2 {
                            for kw in 0..2 {
                                let i = ((2 * odi + kd) * h + 2 * ohi + kh) * w + 2 * owi + kw;
                                if xc[i] > best {
                                    best = xc[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = (odi * oh + ohi) * ow + owi;
                    out[bc * out_sp + o] = best;
                    arg[bc * out_sp + o] = base + best_i;
                }
            }
        }
    }
    Ok((out, arg, [bsz, c, od, oh, ow]))
}

pub fn maxpool3d_backward(g: &[f64], arg: &[usize], gx: &mut [f64]) {
    for (gv, &i) in g.iter().zip(arg) {
        gx[i] += gv;
    }
}

/// Per-axis interpolation table for 2x trilinear upsampling,
/// align-corners-false: source = (o + 0.5)/2 - 0.5, clamped into the grid.
fn up2x_axis_table(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2x_forward(x: &[f64], xs: [usize; 5]) -> (Vec<f64>, [usize; 5]) {
    let [bsz, c, d, h, w] = xs;
    let (td, th, tw) = (up2x_axis_table(d), up2x_axis_table(h), up2x_axis_table(w));
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let in_sp = d * h * w;
    let out_sp = od * oh * ow;
    let mut out = vec![0.0; bsz * c * out_sp];
    for bc in 0..bsz * c {
        let xc = &x[bc * in_sp..][..in_sp];
        let oc = &mut out[bc * out_sp..][..out_sp];
        for (odi, &(d0, d1, fd)) in td.iter().enumerate() {
            for (ohi, &(h0, h1, fh)) in th.iter().enumerate() {
                let r00 = &xc[(d0 * h + h0) * w..][..w];
                let r01 = &xc[(d0 * h + h1) * w..][..w];
                let r10 = &xc[(d1 * h + h0) * w..][..w];
                let r11 = &xc[(d1 * h + h1) * w..][..w];
                let orow = &mut oc[(odi * oh + ohi) * ow..][..ow];
                for (owi, &(w0, w1, fw)) in tw.iter().enumerate() {
                    let c00 = r00[w0] + fw * (r00[w1] - r00[w0]);
                    let c01 = r01[w0] + fw * (r01[w1] - r01[w0]);
                    let c10 = r10[w0] + fw * (r10[w1] - r10[w0]);
                    let c11 = r11[w0] + fw * (r11[w1] - r11[w0]);
                    let c0 = c00 + fh * (c01 - c00);
                    let c1 = c10 + fh * (c11 - c10);
                    orow[owi] = c0 + fd * (c1 - c0);
                }
            }
        }
    }
    (out, [bsz, c, od, oh, ow])
}

/// Transposed 2x trilinear interpolation: scatter each output gradient back
/// to its eight source corners.
pub fn upsample2x_backward(g: &[f64], xs: [usize; 5], gx: &mut [f64]) {
    let [bsz, c, d, h, w] = xs;
    let (td, th, tw) = (up2x_axis_table(d), up2x_axis_table(h), up2x_axis_table(w));
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let in_sp = d * h * w;
    let out_sp = od * oh * ow;
    for bc in 0..bsz * c {
        let gc = &g[bc * out_sp..][..out_sp];
        let gxc = &mut gx[bc * in_sp..][..in_sp];
        for (odi, &(d0, d1, fd)) in td.iter().enumerate() {
            for (ohi, &(h0, h1, fh)) in th.iter().enumerate() {
                let grow = &gc[(odi * oh + ohi) * ow..][..ow];
                for (owi, &(w0, w1, fw)) in tw.iter().enumerate() {
                    let gv = grow[owi];
                    if gv == 0.0 {
                        continue;
                    }
                    let (ad, bd) = (1.0 - fd, fd);
                    let (ah, bh) = (1.0 - fh, fh);
                    let (aw, bw) = (1.0 - fw, fw);
                    gxc[(d0 * h + h0) * w + w0] += gv * ad * ah * aw;
                    gxc[(d0 * h + h0) * w + w1] += gv * ad * ah * bw;
                    gxc[(d0 * h + h1) * w + w0] += gv * ad * bh * aw;
                    gxc[(d0 * h + h1) * w + w1] += gv * ad * bh * bw;
                    gxc[(d1 * h + h0) * w + w0] += gv * bd * ah * aw;
                    gxc[(d1 * h + h0) * w + w1] += gv * bd * ah * bw;
                    gxc[(d1 * h + h1) * w + w0] += gv * bd * bh * aw;
                    gxc[(d1 * h + h1) * w + w1] += gv * bd * bh * bw;
                }
            }
        }
    }
}

/// Per-voxel sample corners and fractions for a warp: sample position is
/// voxel + displacement; corner indices clamp to the border.
struct WarpSample {
    d0: u32,
    d1: u32,
    h0: u32,
    h1: u32,
    w0: u32,
    w1: u32,
    fd: f64,
    fh: f64,
    fw: f64,
}

fn warp_table(field_b: &[f64], [d, h, w]: [usize; 3]) -> Vec<WarpSample> {
    let sp = d * h * w;
    let (fd_ch, rest) = field_b.split_at(sp);
    let (fh_ch, fw_ch) = rest.split_at(sp);
    let clamp = |f0: f64, n: usize| -> (u32, u32) {
        let i0 = (f0.max(0.0) as usize).min(n - 1) as u32;
        let i1 = ((f0 + 1.0).max(0.0) as usize).min(n - 1) as u32;
        (i0, i1)
    };
    let mut table = Vec::with_capacity(sp);
    let mut p = 0usize;
    for id in 0..d {
        for ih in 0..h {
            for iw in 0..w {
                let cd = id as f64 + fd_ch[p];
                let ch = ih as f64 + fh_ch[p];
                let cw = iw as f64 + fw_ch[p];
                let (f0d, f0h, f0w) = (cd.floor(), ch.floor(), cw.floor());
                let (d0, d1) = clamp(f0d, d);
                let (h0, h1) = clamp(f0h, h);
                let (w0, w1) = clamp(f0w, w);
                table.push(WarpSample {
                    d0,
                    d1,
                    h0,
                    h1,
                    w0,
                    w1,
                    fd: cd - f0d,
                    fh: ch - f0h,
                    fw: cw - f0w,
                });
                p += 1;
            }
        }
    }
    table
}

pub fn warp_check_shapes(xs: [usize; 5], fs: [usize; 5]) -> Result<()> {
    if fs[1] != 3 {
        return Err(Error::shape(format!(
            "warp field must have 3 channels, got {}",
            fs[1]
        )));
    }
    if fs[0] != xs[0] || fs[2] != xs[2] || fs[3] != xs[3] || fs[4] != xs[4] {
        return Err(Error::shape(format!(
            "warp field grid {:?} does not match input {:?}",
            fs, xs
        )));
    }
    Ok(())
}

/// out(p) = trilinear sample of `x` at p + field(p), clamped at the border.
pub fn warp_forward(x: &[f64], xs: [usize; 5], field: &[f64]) -> Vec<f64> {
    let [bsz, c, d, h, w] = xs;
    let sp = d * h * w;
    let mut out = vec![0.0; x.len()];
    for b in 0..bsz {
        let table = warp_table(&field[b * 3 * sp..][..3 * sp], [d, h, w]);
        for ci in 0..c {
            let xc = &x[(b * c + ci) * sp..][..sp];
            let oc = &mut out[(b * c + ci) * sp..][..sp];
            for (ov, s) in oc.iter_mut().zip(&table) {
                *ov = gather(xc, h, w, s);
            }
        }
    }
    out
}

#[inline]
fn gather(xc: &[f64], h: usize, w: usize, s: &WarpSample) -> f64 {
    let (d0, d1) = (s.d0 as usize, s.d1 as usize);
    let (h0, h1) = (s.h0 as usize, s.h1 as usize);
    let (w0, w1) = (s.w0 as usize, s.w1 as usize);
    let v000 = xc[(d0 * h + h0) * w + w0];
    let v001 = xc[(d0 * h + h0) * w + w1];
    let v010 = xc[(d0 * h + h1) * w + w0];
    let v011 = xc[(d0 * h + h1) * w + w1];
    let v100 = xc[(d1 * h + h0) * w + w0];
    let v101 = xc[(d1 * h + h0) * w + w1];
    let v110 = xc[(d1 * h + h1) * w + w0];
    let v111 = xc[(d1 * h + h1) * w + w1];
    let c00 = v000 + s.fw * (v001 - v000);
    let c01 = v010 + s.fw * (v011 - v010);
    let c10 = v100 + s.fw * (v101 - v100);
    let c11 = v110 + s.fw * (v111 - v110);
    let c0 = c00 + s.fh * (c01 - c00);
    let c1 = c10 + s.fh * (c11 - c10);
    c0 + s.fd * (c1 - c0)
}

/// Gradients of a warp w.r.t. both the sampled volume and the field.
pub fn warp_backward(
    g: &[f64],
    x: &[f64],
    xs: [usize; 5],
    field: &[f64],
    gx: Option<&mut [f64]>,
    gfield: Option<&mut [f64]>,
) {
    let [bsz, c, d, h, w] = xs;
    let sp = d * h * w;
    let mut gx = gx;
    let mut gfield = gfield;
    for b in 0..bsz {
        let table = warp_table(&field[b * 3 * sp..][..3 * sp], [d, h, w]);
        if let Some(gx) = gx.as_deref_mut() {
            for ci in 0..c {
                let gc = &g[(b * c + ci) * sp..][..sp];
                let gxc = &mut gx[(b * c + ci) * sp..][..sp];
                for (gv, s) in gc.iter().zip(&table) {
                    if *gv == 0.0 {
                        continue;
                    }
                    let (ad, bd) = (1.0 - s.fd, s.fd);
                    let (ah, bh) = (1.0 - s.fh, s.fh);
                    let (aw, bw) = (1.0 - s.fw, s.fw);
                    let (d0, d1) = (s.d0 as usize, s.d1 as usize);
                    let (h0, h1) = (s.h0 as usize, s.h1 as usize);
                    let (w0, w1) = (s.w0 as usize, s.w1 as usize);
                    gxc[(d0 * h + h0) * w + w0] += gv * ad * ah * aw;
                    gxc[(d0 * h + h0) * w + w1] += gv * ad * ah * bw;
                    gxc[(d0 * h + h1) * w + w0] += gv * ad * bh * aw;
                    gxc[(d0 * h + h1) * w + w1] += gv * ad * bh * bw;
                    gxc[(d1 * h + h0) * w + w0] += gv * bd * ah * aw;
                    gxc[(d1 * h + h0) * w + w1] += gv * bd * ah * bw;
                    gxc[(d1 * h + h1) * w + w0] += gv * bd * bh * aw;
                    gxc[(d1 * h + h1) * w + w1] += gv * bd * bh * bw;
                }
            }
        }
        if let Some(gf) = gfield.as_deref_mut() {
            let gfb = &mut gf[b * 3 * sp..][..3 * sp];
            let (gfd, rest) = gfb.split_at_mut(sp);
            let (gfh, gfw) = rest.split_at_mut(sp);
            for ci in 0..c {
                let gc = &g[(b * c + ci) * sp..][..sp];
                let xc = &x[(b * c + ci) * sp..][..sp];
                for (p, (gv, s)) in gc.iter().zip(&table).enumerate() {
                    if *gv == 0.0 {
                        continue;
                    }
                    let (d0, d1) = (s.d0 as usize, s.d1 as usize);
                    let (h0, h1) = (s.h0 as usize, s.h1 as usize);
                    let (w0, w1) = (s.w0 as usize, s.w1 as usize);
                    let v000 = xc[(d0 * h + h0) * w + w0];
                    let v001 = xc[(d0 * h + h0) * w + w1];
                    let v010 = xc[(d0 * h + h1) * w + w0];
                    let v011 = xc[(d0 * h + h1) * w + w1];
                    let v100 = xc[(d1 * h + h0) * w + w0];
                    let v101 = xc[(d1 * h + h0) * w + w1];
                    let v110 = xc[(d1 * h + h1) * w + w0];
                    let v111 = xc[(d1 * h + h1) * w + w1];
                    let (ah, bh) = (1.0 - s.fh, s.fh);
                    let (aw, bw) = (1.0 - s.fw, s.fw);
                    let (ad, bd) = (1.0 - s.fd, s.fd);
                    // d/d(coord_depth): difference along depth of the bilinear
                    // interpolations in the h/w plane.
                    gfd[p] += gv
                        * (ah * aw * (v100 - v000)
                            + ah * bw * (v101 - v001)
                            + bh * aw * (v110 - v010)
                            + bh * bw * (v111 - v011));
                    gfh[p] += gv
                        * (ad * aw * (v010 - v000)
                            + ad * bw * (v011 - v001)
                            + bd * aw * (v110 - v100)
                            + bd * bw * (v111 - v101));
                    gfw[p] += gv
                        * (ad * ah * (v001 - v000)
                            + ad * bh * (v011 - v010)
                            + bd * ah * (v101 - v100)
                            + bd * bh * (v111 - v110));
                }
            }
        }
    }
}

/// Nearest-neighbour label warp: labels never blend, only move.
pub fn warp_nearest_labels(labels: &[u16], [d, h, w]: [usize; 3], field: &[f64]) -> Vec<u16> {
    let sp = d * h * w;
    let (fd_ch, rest) = field.split_at(sp);
    let (fh_ch, fw_ch) = rest.split_at(sp);
    let mut out = vec![0u16; sp];
    let mut p = 0usize;
    for id in 0..d {
        for ih in 0..h {
            for iw in 0..w {
                let sd = (id as f64 + fd_ch[p]).round().clamp(0.0, (d - 1) as f64) as usize;
                let sh = (ih as f64 + fh_ch[p]).round().clamp(0.0, (h - 1) as f64) as usize;
                let sw = (iw as f64 + fw_ch[p]).round().clamp(0.0, (w - 1) as f64) as usize;
                out[p] = labels[(sd * h + sh) * w + sw];
                p += 1;
            }
        }
    }
    out
}

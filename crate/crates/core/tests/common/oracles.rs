//! Straight-loop reference implementations, written independently of the
//! library kernels and kept deliberately naive: direct per-element loops,
//! isize indexing with explicit bounds tests, no precomputed tables, no
//! row slicing. The library must agree with these to tight tolerances.

/// Plain 7-loop cross-correlation with zero padding.
pub fn conv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let [bsz, cin, d, h, wd] = xs;
    let [cout, _, k, _, _] = ws;
    let od = (d + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(bsz * cout * od * oh * ow);
    for b in 0..bsz {
        for co in 0..cout {
            for odi in 0..od {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let id = (odi * stride + kd) as isize - pad as isize;
                                        let ih = (ohi * stride + kh) as isize - pad as isize;
                                        let iw = (owi * stride + kw) as isize - pad as isize;
                                        if id < 0
                                            || ih < 0
                                            || iw < 0
                                            || id >= d as isize
                                            || ih >= h as isize
                                            || iw >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((b * cin + ci) * d + id as usize) * h * wd
                                            + ih as usize * wd
                                            + iw as usize;
                                        let wi = ((co * cin + ci) * k + kd) * k * k + kh * k + kw;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    out
}

/// Blockwise max over 2x2x2 cells.
pub fn maxpool3d(x: &[f64], xs: [usize; 5]) -> Vec<f64> {
    let [bsz, c, d, h, w] = xs;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Vec::with_capacity(bsz * c * od * oh * ow);
    for bc in 0..bsz * c {
        for odi in 0..od {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for kd in 0..2 {
                        for kh in 0..2 {
                            for kw in 0..2 {
                                let xi = bc * d * h * w
                                    + (2 * odi + kd) * h * w
                                    + (2 * ohi + kh) * w
                                    + (2 * owi + kw);
                                if x[xi] > m {
                                    m = x[xi];
                                }
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

/// Per-voxel trilinear sample of a single channel at real coordinates,
/// clamping each corner into the grid. The fractional weights come from the
/// unclamped coordinate.
fn sample_trilinear(xc: &[f64], [d, h, w]: [usize; 3], cd: f64, ch: f64, cw: f64) -> f64 {
    let fd = cd.floor();
    let fh = ch.floor();
    let fw = cw.floor();
    let (td, th, tw) = (cd - fd, ch - fh, cw - fw);
    let mut acc = 0.0;
    for dd in 0..2 {
        for dh in 0..2 {
            for dw in 0..2 {
                let id = (fd as isize + dd).clamp(0, d as isize - 1) as usize;
                let ih = (fh as isize + dh).clamp(0, h as isize - 1) as usize;
                let iw = (fw as isize + dw).clamp(0, w as isize - 1) as usize;
                let weight = (if dd == 1 { td } else { 1.0 - td })
                    * (if dh == 1 { th } else { 1.0 - th })
                    * (if dw == 1 { tw } else { 1.0 - tw });
                acc += weight * xc[(id * h + ih) * w + iw];
            }
        }
    }
    acc
}

/// Align-corners-false 2x trilinear upsampling, one output voxel at a time.
pub fn upsample2x(x: &[f64], xs: [usize; 5]) -> Vec<f64> {
    let [bsz, c, d, h, w] = xs;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let src = |o: usize| ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let mut out = Vec::with_capacity(bsz * c * od * oh * ow);
    for bc in 0..bsz * c {
        let xc = &x[bc * d * h * w..][..d * h * w];
        for odi in 0..od {
            for ohi in 0..oh {
                for owi in 0..ow {
                    out.push(sample_trilinear(xc, [d, h, w], src(odi), src(ohi), src(owi)));
                }
            }
        }
    }
    out
}

/// Trilinear warp: out(p) = sample of input at p + field(p).
pub fn warp(x: &[f64], xs: [usize; 5], field: &[f64]) -> Vec<f64> {
    let [bsz, c, d, h, w] = xs;
    let sp = d * h * w;
    let mut out = Vec::with_capacity(x.len());
    for b in 0..bsz {
        let fb = &field[b * 3 * sp..][..3 * sp];
        for ci in 0..c {
            let xc = &x[(b * c + ci) * sp..][..sp];
            for id in 0..d {
                for ih in 0..h {
                    for iw in 0..w {
                        let p = (id * h + ih) * w + iw;
                        out.push(sample_trilinear(
                            xc,
                            [d, h, w],
                            id as f64 + fb[p],
                            ih as f64 + fb[sp + p],
                            iw as f64 + fb[2 * sp + p],
                        ));
                    }
                }
            }
        }
    }
    out
}

/// Windowed local NCC, one window at a time, windows clipped at the volume
/// border. Returns the negated (mean or sum) of per-voxel correlations.
pub fn ncc_loss(
    fv: &[f64],
    wv: &[f64],
    [bsz, c, d, h, w]: [usize; 5],
    window: usize,
    eps: f64,
    mean_norm: bool,
) -> f64 {
    assert_eq!(c, 1, "oracle handles single-channel volumes");
    let half = window / 2;
    let sp = d * h * w;
    let mut total = 0.0;
    for b in 0..bsz {
        let fc = &fv[b * sp..][..sp];
        let wc = &wv[b * sp..][..sp];
        for id in 0..d {
            for ih in 0..h {
                for iw in 0..w {
                    let (d0, d1) = (id.saturating_sub(half), (id + half + 1).min(d));
                    let (h0, h1) = (ih.saturating_sub(half), (ih + half + 1).min(h));
                    let (w0, w1) = (iw.saturating_sub(half), (iw + half + 1).min(w));
                    let mut n = 0.0;
                    let (mut sf, mut sw, mut sff, mut sww, mut sfw) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for jd in d0..d1 {
                        for jh in h0..h1 {
                            for jw in w0..w1 {
                                let q = (jd * h + jh) * w + jw;
                                n += 1.0;
                                sf += fc[q];
                                sw += wc[q];
                                sff += fc[q] * fc[q];
                                sww += wc[q] * wc[q];
                                sfw += fc[q] * wc[q];
                            }
                        }
                    }
                    let cross = sfw - sf * sw / n;
                    let var_f = sff - sf * sf / n;
                    let var_w = sww - sw * sw / n;
                    total += cross / (var_f * var_w + eps).sqrt();
                }
            }
        }
    }
    if mean_norm {
        -total / (bsz * sp) as f64
    } else {
        -total
    }
}

/// Sum of squared forward differences of the field along each spatial axis,
/// optionally divided by the element count.
pub fn diffusion(field: &[f64], [bsz, c, d, h, w]: [usize; 5], mean_norm: bool) -> f64 {
    let sp = d * h * w;
    let mut total = 0.0;
    for bc in 0..bsz * c {
        let f = &field[bc * sp..][..sp];
        for id in 0..d {
            for ih in 0..h {
                for iw in 0..w {
                    let p = (id * h + ih) * w + iw;
                    if id + 1 < d {
                        let dv = f[p + h * w] - f[p];
                        total += dv * dv;
                    }
                    if ih + 1 < h {
                        let dv = f[p + w] - f[p];
                        total += dv * dv;
                    }
                    if iw + 1 < w {
                        let dv = f[p + 1] - f[p];
                        total += dv * dv;
                    }
                }
            }
        }
    }
    if mean_norm {
        total / (bsz * c * sp) as f64
    } else {
        total
    }
}

/// det(I + grad(field)) per voxel, central differences on the interior and
/// one-sided at the faces. Field layout [3,D,H,W].
pub fn jacobian_determinant(field: &[f64], [d, h, w]: [usize; 3]) -> Vec<f64> {
    let sp = d * h * w;
    let idx = |id: usize, ih: usize, iw: usize| (id * h + ih) * w + iw;
    // d(channel r)/d(axis a) at one voxel.
    let deriv = |r: usize, a: usize, id: usize, ih: usize, iw: usize| -> f64 {
        let ch = &field[r * sp..][..sp];
        let (pos, ext) = match a {
            0 => (id, d),
            1 => (ih, h),
            _ => (iw, w),
        };
        let at = |q: usize| -> f64 {
            match a {
                0 => ch[idx(q, ih, iw)],
                1 => ch[idx(id, q, iw)],
                _ => ch[idx(id, ih, q)],
            }
        };
        if ext == 1 {
            0.0
        } else if pos == 0 {
            at(1) - at(0)
        } else if pos == ext - 1 {
            at(ext - 1) - at(ext - 2)
        } else {
            (at(pos + 1) - at(pos - 1)) / 2.0
        }
    };
    let mut out = Vec::with_capacity(sp);
    for id in 0..d {
        for ih in 0..h {
            for iw in 0..w {
                let mut j = [[0.0f64; 3]; 3];
                for (r, row) in j.iter_mut().enumerate() {
                    for (a, cell) in row.iter_mut().enumerate() {
                        *cell = deriv(r, a, id, ih, iw) + if r == a { 1.0 } else { 0.0 };
                    }
                }
                out.push(
                    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]),
                );
            }
        }
    }
    out
}

/// Brute-force symmetric 95th-percentile Hausdorff distance. Boundary =
/// labeled voxel with a face neighbor that is out of volume or differently
/// labeled; distances by all-pairs search; nearest-rank percentile.
pub fn hd95(a: &[u16], b: &[u16], dims: [usize; 3], label: u16, spacing: f64) -> Option<f64> {
    let ba = boundary_points(a, dims, label);
    let bb = boundary_points(b, dims, label);
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        let mut dists: Vec<f64> = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let dd = p[0] - q[0];
                        let dh = p[1] - q[1];
                        let dw = p[2] - q[2];
                        (dd * dd + dh * dh + dw * dw).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = ((0.95 * dists.len() as f64).ceil() as usize).max(1);
        dists[rank - 1]
    };
    Some(directed(&ba, &bb).max(directed(&bb, &ba)) * spacing)
}

fn boundary_points(map: &[u16], [d, h, w]: [usize; 3], label: u16) -> Vec<[f64; 3]> {
    let at = |z: isize, y: isize, x: isize| -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && map[((z as usize) * h + y as usize) * w + x as usize] == label
    };
    let mut pts = Vec::new();
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !at(z, y, x) {
                    continue;
                }
                let neighbors = [
                    (z - 1, y, x),
                    (z + 1, y, x),
                    (z, y - 1, x),
                    (z, y + 1, x),
                    (z, y, x - 1),
                    (z, y, x + 1),
                ];
                if neighbors.iter().any(|&(nz, ny, nx)| !at(nz, ny, nx)) {
                    pts.push([z as f64, y as f64, x as f64]);
                }
            }
        }
    }
    pts
}

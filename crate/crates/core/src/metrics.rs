//! Evaluation suite: Dice overlap, 95th-percentile Hausdorff distance, and
//! Jacobian-based field regularity (SDlogJ, folding fraction).
//!
//! Everything here is pure and deterministic. HD95 uses an exact Euclidean
//! distance transform (Felzenszwalb's separable lower-envelope algorithm),
//! so results are identical to a brute-force all-pairs search, just not
//! quadratic in the boundary size.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::TensorData;

/// Clamp floor for `log(det J)`; non-positive determinants are reported
/// separately as `neg_jacobian_fraction` instead of poisoning the log.
pub const LOG_DET_EPS: f64 = 1e-9;

/// One evaluation record for a registered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub dsc_per_label: BTreeMap<u16, f64>,
    pub dsc_mean: f64,
    /// In mm under the isotropic spacing passed at computation time.
    pub hd95_per_label: BTreeMap<u16, f64>,
    pub sdlogj: f64,
    pub neg_jacobian_fraction: f64,
}

impl MetricReport {
    /// Flat `key=value` lines, one per metric, labels ascending. This is
    /// the record the CLI prints and writes next to checkpoints.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "dsc_mean={:.6}", self.dsc_mean);
        for (label, v) in &self.dsc_per_label {
            let _ = writeln!(out, "dsc_label_{}={:.6}", label, v);
        }
        for (label, v) in &self.hd95_per_label {
            let _ = writeln!(out, "hd95_label_{}={:.6}", label, v);
        }
        let _ = writeln!(out, "sdlogj={:.6}", self.sdlogj);
        let _ = writeln!(out, "neg_jacobian_fraction={:.6}", self.neg_jacobian_fraction);
        out
    }
}

/// Per-label Dice: 2|A∩B| / (|A|+|B|). A label absent from both maps
/// counts as perfectly registered (1.0): nothing was there, and nothing
/// was produced.
pub fn dice(a: &LabelMap, b: &LabelMap, labels: &[u16]) -> Result<BTreeMap<u16, f64>> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "label maps differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut counts: BTreeMap<u16, [usize; 3]> = labels.iter().map(|&l| (l, [0; 3])).collect();
    for (&va, &vb) in a.data().iter().zip(b.data()) {
        if let Some(c) = counts.get_mut(&va) {
            c[0] += 1;
        }
        if let Some(c) = counts.get_mut(&vb) {
            c[1] += 1;
        }
        if va == vb {
            if let Some(c) = counts.get_mut(&va) {
                c[2] += 1;
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|(l, [na, nb, ni])| {
            let d = if na + nb == 0 {
                1.0
            } else {
                2.0 * ni as f64 / (na + nb) as f64
            };
            (l, d)
        })
        .collect())
}

/// Symmetric 95th-percentile Hausdorff distance between the boundaries of
/// one label, in mm. Boundaries use 6-connectivity (a labeled voxel with a
/// face neighbor outside the label, where out-of-volume counts as outside).
/// The percentile is nearest-rank; the result is the max of the two
/// directed percentiles.
pub fn hd95(a: &LabelMap, b: &LabelMap, label: u16, spacing: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "label maps differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let dims = a.dims();
    let bound_a = boundary_mask(a, label);
    let bound_b = boundary_mask(b, label);
    if bound_a.iter().all(|&v| !v) || bound_b.iter().all(|&v| !v) {
        return Err(Error::Numeric(format!(
            "hd95 undefined: label {} is empty in at least one map",
            label
        )));
    }

    let edt_b = squared_edt(dims, &bound_b);
    let edt_a = squared_edt(dims, &bound_a);
    let a_to_b = directed_distances(&bound_a, &edt_b);
    let b_to_a = directed_distances(&bound_b, &edt_a);
    Ok(nearest_rank_p95(a_to_b).max(nearest_rank_p95(b_to_a)) * spacing)
}

/// det(I + ∇φ) per voxel. Input `[3,D,H,W]` (channels = displacement along
/// depth, height, width), output `[D,H,W]`. Central differences on the
/// interior, one-sided at faces.
pub fn jacobian_determinant(field: &TensorData) -> Result<TensorData> {
    let dims = field_dims(field)?;
    let [d, h, w] = dims;
    let n = d * h * w;
    // grad[i][j] = dphi_i / dx_j, three derivative volumes per channel.
    let mut grad = vec![vec![0.0f64; n]; 9];
    for (i, chan) in field.data().chunks_exact(n).enumerate() {
        for (j, g) in grad[3 * i..3 * i + 3].iter_mut().enumerate() {
            derivative_along(chan, dims, j, g);
        }
    }
    let mut det = vec![0.0f64; n];
    for p in 0..n {
        let m = [
            1.0 + grad[0][p],
            grad[1][p],
            grad[2][p],
            grad[3][p],
            1.0 + grad[4][p],
            grad[5][p],
            grad[6][p],
            grad[7][p],
            1.0 + grad[8][p],
        ];
        det[p] = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6]);
    }
    TensorData::new(vec![d, h, w], det)
}

/// Standard deviation of `log(max(det J, ε))` together with the fraction
/// of voxels where `det J ≤ 0` (folding). Both statistics run over the
/// interior (voxels with two neighbors along every axis), where the
/// central-difference determinant is trustworthy.
pub fn sdlogj(field: &TensorData) -> Result<(f64, f64)> {
    let dims = field_dims(field)?;
    let [d, h, w] = dims;
    if d < 3 || h < 3 || w < 3 {
        return Err(Error::shape(format!(
            "sdlogj needs at least 3 voxels per axis for an interior, got {:?}",
            dims
        )));
    }
    let det = jacobian_determinant(field)?;
    let dd = det.data();
    let mut logs = Vec::with_capacity((d - 2) * (h - 2) * (w - 2));
    let mut folded = 0usize;
    for z in 1..d - 1 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let v = dd[(z * h + y) * w + x];
                if v <= 0.0 {
                    folded += 1;
                }
                logs.push(v.max(LOG_DET_EPS).ln());
            }
        }
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((var.sqrt(), folded as f64 / n))
}

/// Assemble the full report for one registered pair: overlap metrics
/// between `reference` and `warped` plus regularity of the field that
/// produced `warped`.
pub fn metric_report(
    reference: &LabelMap,
    warped: &LabelMap,
    field: &TensorData,
    labels: &[u16],
    spacing: f64,
) -> Result<MetricReport> {
    let dsc_per_label = dice(reference, warped, labels)?;
    let dsc_mean = if dsc_per_label.is_empty() {
        0.0
    } else {
        dsc_per_label.values().sum::<f64>() / dsc_per_label.len() as f64
    };
    let mut hd95_per_label = BTreeMap::new();
    for &label in labels {
        hd95_per_label.insert(label, hd95(reference, warped, label, spacing)?);
    }
    let (sd, neg) = sdlogj(field)?;
    Ok(MetricReport {
        dsc_per_label,
        dsc_mean,
        hd95_per_label,
        sdlogj: sd,
        neg_jacobian_fraction: neg,
    })
}

/// Labels to evaluate on: everything present in the reference map except
/// background 0.
pub fn foreground_labels(reference: &LabelMap) -> Vec<u16> {
    reference
        .present_labels()
        .into_iter()
        .filter(|&l| l != 0)
        .collect()
}

fn field_dims(field: &TensorData) -> Result<[usize; 3]> {
    let shape = field.shape();
    match shape {
        [3, d, h, w] => Ok([*d, *h, *w]),
        _ => Err(Error::shape(format!(
            "expected a [3,D,H,W] displacement field, got {:?}",
            shape
        ))),
    }
}

/// d/dx_axis of one scalar volume: central differences inside, one-sided
/// at the two faces, zero when the axis has a single voxel.
fn derivative_along(chan: &[f64], [d, h, w]: [usize; 3], axis: usize, out: &mut [f64]) {
    let ext = [d, h, w][axis];
    let stride = match axis {
        0 => h * w,
        1 => w,
        _ => 1,
    };
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let pos = [z, y, x][axis];
                out[i] = if ext == 1 {
                    0.0
                } else if pos == 0 {
                    chan[i + stride] - chan[i]
                } else if pos == ext - 1 {
                    chan[i] - chan[i - stride]
                } else {
                    (chan[i + stride] - chan[i - stride]) / 2.0
                };
            }
        }
    }
}

/// Voxels of `label` with at least one of their 6 face neighbors outside
/// the label (out-of-volume counts as outside).
fn boundary_mask(map: &LabelMap, label: u16) -> Vec<bool> {
    let [d, h, w] = map.dims();
    let data = map.data();
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && data[idx(z as usize, y as usize, x as usize)] == label
    };
    let mut mask = vec![false; data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if data[idx(z, y, x)] != label {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let exposed = !inside(zi - 1, yi, xi)
                    || !inside(zi + 1, yi, xi)
                    || !inside(zi, yi - 1, xi)
                    || !inside(zi, yi + 1, xi)
                    || !inside(zi, yi, xi - 1)
                    || !inside(zi, yi, xi + 1);
                if exposed {
                    mask[idx(z, y, x)] = true;
                }
            }
        }
    }
    mask
}

/// Large-but-finite stand-in for "no source yet"; keeps the lower-envelope
/// intersections finite.
const FAR: f64 = 1e20;

/// Exact squared Euclidean distance to the nearest `true` voxel, by three
/// separable 1D lower-envelope transforms.
fn squared_edt([d, h, w]: [usize; 3], sources: &[bool]) -> Vec<f64> {
    let mut dist: Vec<f64> = sources.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let mut scratch = Dt1dScratch::default();
    // Along W: contiguous rows.
    let mut line = Vec::new();
    for row in dist.chunks_exact_mut(w) {
        line.clear();
        line.extend_from_slice(row);
        dt1d(&line, row, &mut scratch);
    }
    // Along H.
    let mut out = Vec::new();
    for z in 0..d {
        for x in 0..w {
            line.clear();
            line.extend((0..h).map(|y| dist[(z * h + y) * w + x]));
            out.resize(h, 0.0);
            dt1d(&line, &mut out, &mut scratch);
            for (y, &v) in out.iter().enumerate() {
                dist[(z * h + y) * w + x] = v;
            }
        }
    }
    // Along D.
    for y in 0..h {
        for x in 0..w {
            line.clear();
            line.extend((0..d).map(|z| dist[(z * h + y) * w + x]));
            out.resize(d, 0.0);
            dt1d(&line, &mut out, &mut scratch);
            for (z, &v) in out.iter().enumerate() {
                dist[(z * h + y) * w + x] = v;
            }
        }
    }
    dist
}

#[derive(Default)]
struct Dt1dScratch {
    v: Vec<usize>,
    z: Vec<f64>,
}

/// One pass of the squared-distance transform: out[q] = min_p (q−p)² + f[p].
fn dt1d(f: &[f64], out: &mut [f64], s: &mut Dt1dScratch) {
    let n = f.len();
    if n == 1 {
        out[0] = f[0];
        return;
    }
    s.v.clear();
    s.v.resize(n, 0);
    s.z.clear();
    s.z.resize(n + 1, 0.0);
    s.z[0] = f64::NEG_INFINITY;
    s.z[1] = f64::INFINITY;
    let mut k = 0usize;
    for q in 1..n {
        let mut sect;
        loop {
            let p = s.v[k];
            sect = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64;
            if sect <= s.z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        s.v[k] = q;
        s.z[k] = sect;
        s.z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while s.z[k + 1] < q as f64 {
            k += 1;
        }
        let p = s.v[k];
        let diff = q as isize - p as isize;
        *o = (diff * diff) as f64 + f[p];
    }
}

fn directed_distances(from: &[bool], edt_to: &[f64]) -> Vec<f64> {
    from.iter()
        .zip(edt_to)
        .filter_map(|(&on, &d2)| on.then(|| d2.sqrt()))
        .collect()
}

/// Nearest-rank percentile: the ⌈0.95·n⌉-th smallest value.
fn nearest_rank_p95(mut dists: Vec<f64>) -> f64 {
    dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let rank = ((0.95 * dists.len() as f64).ceil() as usize).max(1);
    dists[rank - 1]
}

//! Phantom and deformation synthesis.
//!
//! A phantom starts as white noise, gets box-blurred into smooth blobs, and
//! is then cut into labels at intensity quantiles, so every label is a set
//! of closed smooth regions with a known voxel budget. Ground-truth fields
//! come from the same recipe (blurred noise, rescaled), which keeps them
//! smooth enough that trilinear resampling of the phantom stays faithful.

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use super::{mix_seed, LabelMap, SyntheticPairSpec, Volume};
use crate::error::{Error, Result};
use crate::tensor::{kernels, TensorData};

/// Seed-stream tags so the phantom, its texture, and the field never draw
/// from the same RNG sequence.
const STREAM_SHAPE: u64 = 0x01;
const STREAM_TEXTURE: u64 = 0x02;
const STREAM_FIELD: u64 = 0x03;

/// One generated registration problem with known correspondence.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub fixed: Volume,
    pub fixed_labels: LabelMap,
    pub moving: Volume,
    pub moving_labels: LabelMap,
    /// Ground-truth displacement, `[3,D,H,W]`, voxel units.
    pub field_gt: TensorData,
}

/// Generate the phantom volume and its label map.
pub fn synth_phantom(spec: &SyntheticPairSpec) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let dims = spec.extents;
    let n: usize = dims.iter().product();

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, STREAM_SHAPE));
    let mut shape: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    box_blur3(&mut shape, dims, spec.smoothness, 3);
    normalize_unit(&mut shape);

    // Cut at quantiles: background keeps 35% of the voxels, the labels
    // split the rest evenly. Quantile cuts guarantee each class a voxel
    // budget no matter how the blur redistributed mass.
    let labels = spec.num_labels as usize;
    let mut sorted = shape.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut cuts = Vec::with_capacity(labels);
    for k in 0..labels {
        let frac = 0.35 + 0.65 * k as f64 / labels as f64;
        let idx = ((frac * n as f64) as usize).min(n - 1);
        cuts.push(sorted[idx]);
    }
    let label_data: Vec<u16> = shape
        .iter()
        .map(|&v| cuts.iter().take_while(|&&c| v >= c).count() as u16)
        .collect();

    let mut counts = vec![0usize; labels + 1];
    for &l in &label_data {
        counts[l as usize] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::config(format!(
            "degenerate spec: label {} came out empty; enlarge extents or lower num_labels",
            missing
        )));
    }

    // Intensity: one band center per class plus gentle smooth texture, so
    // classes are separable but not piecewise constant.
    let mut tex_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, STREAM_TEXTURE));
    let mut texture: Vec<f64> = (0..n).map(|_| tex_rng.random_range(-1.0..1.0)).collect();
    box_blur3(&mut texture, dims, spec.smoothness.max(1), 2);
    let bands = labels as f64 + 1.0;
    let intensity: Vec<f64> = label_data
        .iter()
        .zip(&texture)
        .map(|(&l, &t)| {
            let center = (l as f64 + 0.5) / bands;
            (center + 0.06 * t).clamp(0.0, 1.0)
        })
        .collect();

    let volume = Volume::new(dims, 1.0, intensity)?;
    let label_map = LabelMap::new(dims, label_data)?;
    Ok((volume, label_map))
}

/// Generate a fixed/moving pair. The moving image is the phantom resampled
/// through the ground-truth field, so `warp(fixed, field_gt)` reproduces it
/// bit-exactly by construction.
pub fn make_pair(spec: &SyntheticPairSpec) -> Result<SyntheticPair> {
    let (fixed, fixed_labels) = synth_phantom(spec)?;
    let dims = spec.extents;
    let field_gt = smooth_field(spec, dims)?;

    let [d, h, w] = dims;
    let moving_t = kernels::warp_forward(fixed.data(), [1, 1, d, h, w], field_gt.data());
    let moving = Volume::new(dims, fixed.spacing(), moving_t)?;
    let moving_labels = LabelMap::new(
        dims,
        kernels::warp_nearest_labels(fixed_labels.data(), dims, field_gt.data()),
    )?;

    Ok(SyntheticPair {
        fixed,
        fixed_labels,
        moving,
        moving_labels,
        field_gt,
    })
}

/// Smooth random displacement with peak component magnitude
/// `max_displacement`, `[3,D,H,W]`.
fn smooth_field(spec: &SyntheticPairSpec, dims: [usize; 3]) -> Result<TensorData> {
    let n: usize = dims.iter().product();
    let mut data = vec![0.0f64; 3 * n];
    if spec.max_displacement > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, STREAM_FIELD));
        let mut peak = 0.0f64;
        for chan in data.chunks_exact_mut(n) {
            for v in chan.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            box_blur3(chan, dims, spec.smoothness.max(1), 3);
            for v in chan.iter() {
                peak = peak.max(v.abs());
            }
        }
        if peak > 0.0 {
            let scale = spec.max_displacement / peak;
            for v in &mut data {
                *v *= scale;
            }
        }
    }
    TensorData::new(vec![3, dims[0], dims[1], dims[2]], data)
}

/// Reinterpret a bare `[3,D,H,W]` field as the `[1,3,D,H,W]` the kernels
/// and the network expect.
pub fn field_to_batch(field: &TensorData) -> TensorData {
    let shape = field.shape();
    debug_assert_eq!(shape.len(), 4);
    debug_assert_eq!(shape[0], 3);
    let mut batched = vec![1usize];
    batched.extend_from_slice(shape);
    field.clone().reshaped(&batched).expect("same element count")
}

/// Inverse of [`field_to_batch`] for a single-batch field.
pub fn field_from_batch(field: &TensorData) -> Result<TensorData> {
    let [b, c, d, h, w] = field.dims5()?;
    if b != 1 || c != 3 {
        return Err(Error::shape(format!(
            "expected a [1,3,D,H,W] field, got {:?}",
            field.shape()
        )));
    }
    field.clone().reshaped(&[3, d, h, w])
}

/// In-place separable box blur with border-clipped windows (the window
/// shrinks near faces, so no mass is invented there).
pub fn box_blur3(data: &mut [f64], dims: [usize; 3], radius: usize, passes: usize) {
    if radius == 0 {
        return;
    }
    let [d, h, w] = dims;
    let mut line = Vec::new();
    for _ in 0..passes {
        // Along W.
        for row in data.chunks_exact_mut(w) {
            blur_line_into(row, 1, radius, &mut line);
            row.copy_from_slice(&line);
        }
        // Along H: rows of stride w within each (d-slice, w-column).
        for z in 0..d {
            for x in 0..w {
                let base = z * h * w + x;
                blur_strided(data, base, h, w, radius, &mut line);
            }
        }
        // Along D: stride h*w.
        for y in 0..h {
            for x in 0..w {
                let base = y * w + x;
                blur_strided(data, base, d, h * w, radius, &mut line);
            }
        }
    }
}

fn blur_strided(data: &mut [f64], base: usize, n: usize, stride: usize, radius: usize, line: &mut Vec<f64>) {
    line.clear();
    line.extend((0..n).map(|i| data[base + i * stride]));
    let copy = line.clone();
    blur_line_into(&copy, 1, radius, line);
    for (i, &v) in line.iter().enumerate() {
        data[base + i * stride] = v;
    }
}

fn blur_line_into(src: &[f64], stride: usize, radius: usize, out: &mut Vec<f64>) {
    let n = src.len() / stride;
    out.clear();
    out.reserve(n);
    // Prefix sums give O(1) window sums; windows clip at the ends.
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for i in 0..n {
        prefix.push(prefix[i] + src[i * stride]);
    }
    for i in 0..n {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius + 1).min(n);
        out.push((prefix[hi] - prefix[lo]) / (hi - lo) as f64);
    }
}

fn normalize_unit(data: &mut [f64]) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in data.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-12);
    for v in data.iter_mut() {
        *v = (*v - lo) / span;
    }
}

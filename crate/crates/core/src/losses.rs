//! Training objective: windowed local NCC similarity plus a diffusion
//! (squared-gradient) smoothness penalty on the displacement field.
//!
//! Local NCC is computed with box-filter convolutions: the per-window sums
//! of I_f, I_w, their squares and their product all come from `conv3d` with
//! a constant all-ones kernel. Windows are clipped at the volume border —
//! the zero padding contributes nothing to the sums, and the per-window
//! element count comes from convolving an all-ones volume — so boundary
//! windows compute true statistics over fewer voxels instead of correlating
//! against padded zeros. That keeps the affine-invariance property
//! (ncc(I, a·I+b) = −1) intact right up to the border.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorData, Var};

/// Epsilon added inside the square root of the NCC denominator so
/// zero-variance windows stay finite.
pub const NCC_VAR_EPS: f64 = 1e-5;

/// How per-voxel correlations and squared gradients are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the voxel count; loss scale independent of volume size.
    #[default]
    Mean,
    /// Raw sum over voxels.
    Sum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// NCC window extent (odd).
    pub ncc_window: usize,
    /// Weight of the smoothness term in the total loss.
    pub lambda: f64,
    pub normalization: Normalization,
    /// Shrink the window to fit small volumes instead of erroring.
    pub auto_shrink_window: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ncc_window: 9,
            lambda: 1.0,
            normalization: Normalization::Mean,
            auto_shrink_window: true,
        }
    }
}

impl LossConfig {
    /// Window actually used for a volume with the given spatial extents:
    /// the configured one, or (when auto-shrink is on) the largest odd
    /// value fitting the smallest extent.
    pub fn effective_window(&self, dims: [usize; 3]) -> Result<usize> {
        let n = self.ncc_window;
        if n < 3 || n % 2 == 0 {
            return Err(Error::config(format!("ncc_window must be odd and >= 3, got {}", n)));
        }
        if self.lambda < 0.0 {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        let min_ext = dims[0].min(dims[1]).min(dims[2]);
        if n <= min_ext {
            return Ok(n);
        }
        if !self.auto_shrink_window {
            return Err(Error::config(format!(
                "ncc_window {} exceeds the smallest volume extent {}",
                n, min_ext
            )));
        }
        let shrunk = if min_ext % 2 == 1 { min_ext } else { min_ext - 1 };
        if shrunk < 3 {
            return Err(Error::config(format!(
                "volume extent {} too small for any odd NCC window >= 3",
                min_ext
            )));
        }
        Ok(shrunk)
    }
}

fn check_volume(tape: &Tape, v: Var, what: &str) -> Result<[usize; 5]> {
    let s = tape.shape(v);
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::shape(format!(
            "{} must be a single-channel volume [B,1,D,H,W], got {:?}",
            what, s
        )));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

/// Negative mean (or sum) of per-voxel local correlation coefficients
/// between `i_f` and `i_w`.
pub fn ncc_loss(tape: &mut Tape, i_f: Var, i_w: Var, config: &LossConfig) -> Result<Var> {
    let fs = check_volume(tape, i_f, "ncc fixed input")?;
    let ws = check_volume(tape, i_w, "ncc warped input")?;
    if fs != ws {
        return Err(Error::shape(format!(
            "ncc inputs must match, got {:?} vs {:?}",
            fs, ws
        )));
    }
    let window = config.effective_window([fs[2], fs[3], fs[4]])?;

    // Window-size map: box sum of ones counts the clipped window around
    // each voxel. A constant, so no gradient work happens on its branch.
    let ones = tape.constant(TensorData::full(&fs, 1.0));
    let count = tape.box_sum(ones, window)?;

    let boxsum = |tape: &mut Tape, v: Var| tape.box_sum(v, window);
    let ff = tape.mul(i_f, i_f)?;
    let ww = tape.mul(i_w, i_w)?;
    let fw = tape.mul(i_f, i_w)?;
    let sum_f = boxsum(tape, i_f)?;
    let sum_w = boxsum(tape, i_w)?;
    let sum_ff = boxsum(tape, ff)?;
    let sum_ww = boxsum(tape, ww)?;
    let sum_fw = boxsum(tape, fw)?;

    // cross = Σfw − ΣfΣw/n; var = Σx² − (Σx)²/n, all per window.
    let f_times_w = tape.mul(sum_f, sum_w)?;
    let fw_over_n = tape.div(f_times_w, count)?;
    let cross = tape.sub(sum_fw, fw_over_n)?;
    let f_sq = tape.mul(sum_f, sum_f)?;
    let f_sq_n = tape.div(f_sq, count)?;
    let var_f = tape.sub(sum_ff, f_sq_n)?;
    let w_sq = tape.mul(sum_w, sum_w)?;
    let w_sq_n = tape.div(w_sq, count)?;
    let var_w = tape.sub(sum_ww, w_sq_n)?;

    let var_prod = tape.mul(var_f, var_w)?;
    let guarded = tape.add_scalar(var_prod, NCC_VAR_EPS);
    let denom = tape.sqrt(guarded)?;
    let corr = tape.div(cross, denom)?;

    let agg = match config.normalization {
        Normalization::Mean => tape.mean_all(corr),
        Normalization::Sum => tape.sum_all(corr),
    };
    Ok(tape.mul_scalar(agg, -1.0))
}

/// Mean (or sum) of squared forward differences of the field along each
/// spatial axis. Exactly zero for a constant field.
pub fn diffusion_reg(tape: &mut Tape, field: Var, config: &LossConfig) -> Result<Var> {
    let s = tape.shape(field);
    if s.len() != 5 || s[1] != 3 {
        return Err(Error::shape(format!(
            "diffusion_reg expects a displacement field [B,3,D,H,W], got {:?}",
            s
        )));
    }
    let numel = tape.numel(field);
    let mut acc: Option<Var> = None;
    for axis in 0..3 {
        let d = tape.spatial_diff(field, axis)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum_all(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    let total = acc.expect("three axes accumulated");
    Ok(match config.normalization {
        Normalization::Mean => tape.mul_scalar(total, 1.0 / numel as f64),
        Normalization::Sum => total,
    })
}

/// ncc_loss(I_f, warp(I_m, φ)) + λ · diffusion_reg(φ).
pub fn total_loss(tape: &mut Tape, i_f: Var, i_m: Var, field: Var, config: &LossConfig) -> Result<Var> {
    let warped = tape.warp(i_m, field)?;
    let sim = ncc_loss(tape, i_f, warped, config)?;
    let reg = diffusion_reg(tape, field, config)?;
    let weighted = tape.mul_scalar(reg, config.lambda);
    tape.add(sim, weighted)
}

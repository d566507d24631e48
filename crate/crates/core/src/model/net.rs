//! Forward pass: pyramid encoder, skip decoder, the two fusion streams,
//! and their superposition into the final displacement field.
//!
//! Everything is expressed against a [`Tape`], so one code path serves
//! training (parameters inserted as tape params) and inference (inserted
//! as constants, which prunes the backward graph entirely).

use super::params::{BaselineHead, Cfm, Conv, FTheta, ModelConfig, ModelParams, RdffmLevel, RffmLevel};
use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorData, Var};

/// Negative-side slope of every activation in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Named snapshots of the intermediate fields of one forward pass, for
/// inspection and tests. Values are detached copies.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub fields: Vec<(String, TensorData)>,
}

impl Diagnostics {
    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    fn record(&mut self, tape: &Tape, name: impl Into<String>, v: Var) {
        self.fields.push((name.into(), tape.to_tensor(v)));
    }
}

/// Insert every parameter tensor into the tape. `trainable` decides
/// between gradient-carrying params and pruned constants.
pub fn params_to_tape(
    tape: &mut Tape,
    params: &ModelParams<TensorData>,
    trainable: bool,
) -> ModelParams<Var> {
    params.map_ref(&mut |_, t| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    })
}

fn conv_block(tape: &mut Tape, x: Var, conv: &Conv<Var>) -> Result<Var> {
    let y = tape.conv3d(x, conv.weight, conv.bias, 1, 1)?;
    Ok(tape.leaky_relu(y, LEAKY_SLOPE))
}

fn conv_linear(tape: &mut Tape, x: Var, conv: &Conv<Var>) -> Result<Var> {
    tape.conv3d(x, conv.weight, conv.bias, 1, 1)
}

/// Concatenate and fuse back to the level's nominal width.
pub fn cnc(tape: &mut Tape, a: Var, b: Var, conv: &Conv<Var>) -> Result<Var> {
    let cat = tape.concat_channels(a, b)?;
    conv_block(tape, cat, conv)
}

/// Shared-weight feature pyramid: conv at full resolution, then
/// pool → conv per coarser level. Channel widths double per level.
pub fn encode(
    tape: &mut Tape,
    volume: Var,
    params: &ModelParams<Var>,
    config: &ModelConfig,
) -> Result<Vec<Var>> {
    let shape = tape.shape(volume);
    let [_, c, d, h, w] = match shape {
        [b, c, d, h, w] => [*b, *c, *d, *h, *w],
        _ => {
            return Err(Error::shape(format!(
                "encode expects [B,1,D,H,W], got {:?}",
                shape
            )))
        }
    };
    if c != 1 {
        return Err(Error::shape(format!(
            "encode expects a single-channel volume, got {} channels",
            c
        )));
    }
    let div = config.extent_divisor();
    if d % div != 0 || h % div != 0 || w % div != 0 {
        return Err(Error::shape(format!(
            "extents {:?} must divide by {} for a {}-level pyramid",
            [d, h, w],
            div,
            config.levels
        )));
    }
    let mut levels = Vec::with_capacity(params.encoder.len());
    let mut x = volume;
    for (i, conv) in params.encoder.iter().enumerate() {
        if i > 0 {
            x = tape.maxpool3d(x)?;
        }
        x = conv_block(tape, x, conv)?;
        levels.push(x);
    }
    Ok(levels)
}

/// Skip-connected decoder. Takes the encoder pyramid, returns decoded
/// levels coarse → fine (level L−1 down to level 1), each at its level's
/// nominal channel count.
pub fn decode_features(
    tape: &mut Tape,
    pyramid: &[Var],
    params: &ModelParams<Var>,
) -> Result<Vec<Var>> {
    let mut decoded = Vec::with_capacity(params.decoder.len());
    let mut above = *pyramid.last().expect("pyramid is never empty");
    for (j, convs) in params.decoder.iter().enumerate() {
        let skip = pyramid[pyramid.len() - 2 - j];
        let up = tape.upsample2x(above)?;
        let cat = tape.concat_channels(up, skip)?;
        let mid = conv_block(tape, cat, &convs[0])?;
        above = conv_block(tape, mid, &convs[1])?;
        decoded.push(above);
    }
    Ok(decoded)
}

/// Field generator: stacked double-conv blocks then the linear 3-channel
/// head. With a zero head this returns the zero field for any input.
pub fn f_theta(tape: &mut Tape, features: Var, params: &FTheta<Var>) -> Result<Var> {
    let mut x = features;
    for [narrow, keep] in &params.blocks {
        x = conv_block(tape, x, narrow)?;
        x = conv_block(tape, x, keep)?;
    }
    conv_linear(tape, x, &params.head)
}

/// Fuse the coarsest fixed/moving features and lift them one level up:
/// ψ = upsample(cnc(F_f, F_m)).
pub fn coarsest_fuse(tape: &mut Tape, f_top: Var, m_top: Var, conv: &Conv<Var>) -> Result<Var> {
    let fused = cnc(tape, f_top, m_top, conv)?;
    tape.upsample2x(fused)
}

/// Trilinear ×2 upsampling of a displacement field, with the value
/// doubling that converts displacements to the finer grid's voxel units.
pub fn upsample_field(tape: &mut Tape, field: Var) -> Result<Var> {
    let up = tape.upsample2x(field)?;
    Ok(tape.mul_scalar(up, 2.0))
}

/// Field composition `compose(a, b) = warp(a, b) + b`: apply `b`, then `a`
/// as refined by `b`'s coordinate change.
pub fn compose_fields(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let warped = tape.warp(a, b)?;
    tape.add(warped, b)
}

/// Cross-fusion of the residual stream: pairwise merges of (ψ′, ψ̲) and
/// (ψ′, F_f′), then a joint merge. Asymmetric in its arguments by design.
pub fn cfm(
    tape: &mut Tape,
    psi_p: Var,
    psi_u: Var,
    f_fixed: Var,
    params: &Cfm<Var>,
) -> Result<Var> {
    let a = cnc(tape, psi_p, psi_u, &params.pair_resid)?;
    let b = cnc(tape, psi_p, f_fixed, &params.pair_fixed)?;
    cnc(tape, a, b, &params.joint)
}

/// Everything one feature-flow step produces; the internal fields are kept
/// visible so callers can instrument the two warps.
pub struct RffmStepOut {
    pub psi: Var,
    pub field_warp: Var,
    pub field_resid: Var,
}

/// One feature-flow level: warp the moving features by a field predicted
/// from the carried state, fuse with the fixed features, re-warp the
/// carried state by a field predicted from the fusion, then cross-fuse.
pub fn rffm_step(
    tape: &mut Tape,
    psi_prev: Var,
    f_fixed: Var,
    f_moving: Var,
    params: &RffmLevel<Var>,
) -> Result<RffmStepOut> {
    let field_warp = f_theta(tape, psi_prev, &params.f_warp)?;
    let f_w = tape.warp(f_moving, field_warp)?;
    let psi_p = cnc(tape, f_fixed, f_w, &params.psi_cnc)?;
    let field_resid = f_theta(tape, psi_p, &params.f_resid)?;
    let psi_u = tape.warp(psi_prev, field_resid)?;
    let psi = cfm(tape, psi_p, psi_u, f_fixed, &params.cfm)?;
    Ok(RffmStepOut {
        psi,
        field_warp,
        field_resid,
    })
}

pub struct RdffmStepOut {
    pub phi: Var,
    /// Per-iteration field increments, for inspection.
    pub deltas: Vec<Var>,
}

/// One direct-stream level: iteratively warp the moving features by the
/// current field, predict an increment from the fused features, and
/// compose it on. The level's parameters are shared across iterations.
pub fn rdffm_step(
    tape: &mut Tape,
    phi_prev: Var,
    f_fixed: Var,
    f_moving: Var,
    params: &RdffmLevel<Var>,
    iterations: usize,
) -> Result<RdffmStepOut> {
    let mut phi = phi_prev;
    let mut deltas = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let f_w = tape.warp(f_moving, phi)?;
        let fused = cnc(tape, f_fixed, f_w, &params.cnc)?;
        let delta = f_theta(tape, fused, &params.f_theta)?;
        phi = compose_fields(tape, phi, delta)?;
        deltas.push(delta);
    }
    Ok(RdffmStepOut { phi, deltas })
}

/// Full coarse-to-fine pass. Returns the final displacement field (on the
/// tape, differentiable) plus detached snapshots of every intermediate
/// field.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    fixed: Var,
    moving: Var,
) -> Result<(Var, Diagnostics)> {
    config.validate()?;
    if tape.shape(fixed) != tape.shape(moving) {
        return Err(Error::shape(format!(
            "fixed {:?} and moving {:?} volumes must match",
            tape.shape(fixed),
            tape.shape(moving)
        )));
    }
    let mut diag = Diagnostics::default();

    let pyr_f = encode(tape, fixed, params, config)?;
    let pyr_m = encode(tape, moving, params, config)?;
    let dec_f = decode_features(tape, &pyr_f, params)?;
    let dec_m = decode_features(tape, &pyr_m, params)?;

    // Plain encoder-decoder head when both fusion modules are ablated.
    if let Some(BaselineHead { cnc: head_cnc, f_theta: head }) = &params.baseline {
        let full_f = *dec_f.last().expect("decoder has levels");
        let full_m = *dec_m.last().expect("decoder has levels");
        let fused = cnc(tape, full_f, full_m, head_cnc)?;
        let phi = f_theta(tape, fused, head)?;
        diag.record(tape, "final", phi);
        return Ok((phi, diag));
    }

    let top_cnc = params
        .coarsest_cnc
        .as_ref()
        .expect("modular configs carry the coarsest fuse");
    let psi_seed = coarsest_fuse(
        tape,
        *pyr_f.last().expect("pyramid"),
        *pyr_m.last().expect("pyramid"),
        top_cnc,
    )?;

    // Direct field stream, coarse → fine.
    let mut phi_direct = None;
    if let Some(seed_f) = &params.seed_f {
        let mut phi = f_theta(tape, psi_seed, seed_f)?;
        diag.record(tape, "phi.seed", phi);
        for (idx, level) in params.rdffm.iter().enumerate() {
            let name = config.levels - 1 - idx;
            let out = rdffm_step(
                tape,
                phi,
                dec_f[idx],
                dec_m[idx],
                level,
                config.rdffm_iterations,
            )?;
            phi = out.phi;
            for (k, d) in out.deltas.iter().enumerate() {
                diag.record(tape, format!("rdffm.l{name}.delta{k}"), *d);
            }
            diag.record(tape, format!("rdffm.l{name}.phi"), phi);
            if idx + 1 < params.rdffm.len() {
                phi = upsample_field(tape, phi)?;
            }
        }
        phi_direct = Some(phi);
    }

    // Feature-flow stream, coarse → fine.
    let mut phi_flow = None;
    if let Some(final_f) = &params.final_f {
        let mut psi = psi_seed;
        for (idx, level) in params.rffm.iter().enumerate() {
            let name = config.levels - 1 - idx;
            let out = rffm_step(tape, psi, dec_f[idx], dec_m[idx], level)?;
            diag.record(tape, format!("rffm.l{name}.field_warp"), out.field_warp);
            diag.record(tape, format!("rffm.l{name}.field_resid"), out.field_resid);
            psi = out.psi;
            if idx + 1 < params.rffm.len() {
                let up = tape.upsample2x(psi)?;
                psi = conv_block(tape, up, &params.psi_up[idx])?;
            }
        }
        let head_field = f_theta(tape, psi, final_f)?;
        diag.record(tape, "rffm.head", head_field);
        phi_flow = Some(head_field);
    }

    let phi_final = match (phi_flow, phi_direct) {
        (Some(flow), Some(direct)) => {
            if config.compose_superposition {
                // Apply the direct field first, then the flow field in the
                // coordinates it induces.
                compose_fields(tape, flow, direct)?
            } else {
                tape.add(flow, direct)?
            }
        }
        (Some(flow), None) => flow,
        (None, Some(direct)) => direct,
        (None, None) => unreachable!("non-modular configs take the baseline branch"),
    };
    diag.record(tape, "final", phi_final);
    Ok((phi_final, diag))
}

/// Inference entry point: run the network over plain tensors on a private
/// constant-only tape (no gradient bookkeeping survives).
pub fn register(
    params: &ModelParams<TensorData>,
    config: &ModelConfig,
    fixed: &TensorData,
    moving: &TensorData,
) -> Result<(TensorData, Diagnostics)> {
    let mut tape = Tape::new();
    let vars = params_to_tape(&mut tape, params, false);
    let f = tape.constant(fixed.clone());
    let m = tape.constant(moving.clone());
    let (phi, diag) = forward(&mut tape, &vars, config, f, m)?;
    Ok((tape.to_tensor(phi), diag))
}

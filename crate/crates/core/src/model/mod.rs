//! The registration network: shared-weight feature pyramid, skip decoder,
//! and the two coarse-to-fine fusion streams whose fields superpose into
//! the final displacement.

mod check;
mod net;
mod params;

pub use check::full_network_check;
pub use net::{
    cfm, cnc, coarsest_fuse, compose_fields, decode_features, encode, f_theta, forward,
    params_to_tape, rdffm_step, register, rffm_step, upsample_field, Diagnostics, RdffmStepOut,
    RffmStepOut, LEAKY_SLOPE,
};
pub use params::{
    init, init_random_all, BaselineHead, Cfm, Conv, FTheta, ModelConfig, ModelParams, RdffmLevel,
    RffmLevel, KERNEL,
};

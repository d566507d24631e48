//! Parameter containers for the registration network.
//!
//! `ModelParams<T>` is generic over the leaf type so the same structure
//! serves three roles: `TensorData` leaves for storage and optimization,
//! `Var` leaves once inserted into a tape, and whatever a caller needs via
//! [`ModelParams::map_ref`]. Traversal order is fixed (declaration order,
//! fields before nested lists) and is the contract for checkpoints and
//! optimizer state, so it must never change.

use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorData;

/// Kernel edge for every convolution in the network.
pub const KERNEL: usize = 3;

/// Architecture switches. `base_channels` follows the desk-scale default;
/// the ablation toggles reproduce the reduced variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Number of double-conv blocks in each field generator.
    pub f_theta_depth: usize,
    pub rdffm_iterations: usize,
    pub enable_rffm: bool,
    pub enable_rdffm: bool,
    /// Pyramid depth; 3 is the production shape, 4 is the deeper ablation.
    pub levels: usize,
    /// Combine the two output fields by warp-composition instead of
    /// addition.
    pub compose_superposition: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            f_theta_depth: 2,
            rdffm_iterations: 2,
            enable_rffm: true,
            enable_rdffm: true,
            levels: 3,
            compose_superposition: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 1 {
            return Err(Error::config("base_channels must be >= 1".to_string()));
        }
        if self.f_theta_depth < 1 {
            return Err(Error::config("f_theta_depth must be >= 1".to_string()));
        }
        if self.rdffm_iterations < 1 {
            return Err(Error::config("rdffm_iterations must be >= 1".to_string()));
        }
        if !(self.levels == 3 || self.levels == 4) {
            return Err(Error::config(format!(
                "levels must be 3 or 4, got {}",
                self.levels
            )));
        }
        Ok(())
    }

    /// Nominal channel count of pyramid level `level` (1-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Every spatial extent must divide by this for the pyramid to pool
    /// cleanly.
    pub fn extent_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// One convolution layer: weight `[out,in,3,3,3]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: T,
    pub bias: T,
}

/// Field generator: `depth` double-conv blocks (the first conv of each
/// halves the channel count, the second keeps it) and a 3-channel linear
/// head.
#[derive(Debug, Clone, PartialEq)]
pub struct FTheta<T> {
    pub blocks: Vec<[Conv<T>; 2]>,
    pub head: Conv<T>,
}

/// Cross-fusion: two pairwise merges followed by a joint merge.
#[derive(Debug, Clone, PartialEq)]
pub struct Cfm<T> {
    pub pair_resid: Conv<T>,
    pub pair_fixed: Conv<T>,
    pub joint: Conv<T>,
}

/// One level of the feature-flow stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RffmLevel<T> {
    pub f_warp: FTheta<T>,
    pub psi_cnc: Conv<T>,
    pub f_resid: FTheta<T>,
    pub cfm: Cfm<T>,
}

/// One level of the direct field stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RdffmLevel<T> {
    pub cnc: Conv<T>,
    pub f_theta: FTheta<T>,
}

/// Field head used when both modules are disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineHead<T> {
    pub cnc: Conv<T>,
    pub f_theta: FTheta<T>,
}

/// All learnable tensors. Lists run coarse → fine; absent options belong
/// to disabled modules.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: Vec<Conv<T>>,
    pub decoder: Vec<[Conv<T>; 2]>,
    pub coarsest_cnc: Option<Conv<T>>,
    pub seed_f: Option<FTheta<T>>,
    pub rffm: Vec<RffmLevel<T>>,
    pub psi_up: Vec<Conv<T>>,
    pub final_f: Option<FTheta<T>>,
    pub rdffm: Vec<RdffmLevel<T>>,
    pub baseline: Option<BaselineHead<T>>,
}

impl<T> Conv<T> {
    fn map_ref<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Conv<U> {
        Conv {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }
}

impl<T> FTheta<T> {
    fn map_ref<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> FTheta<U> {
        FTheta {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, [a, b])| {
                    [
                        a.map_ref(&format!("{prefix}.block{i}.conv0"), f),
                        b.map_ref(&format!("{prefix}.block{i}.conv1"), f),
                    ]
                })
                .collect(),
            head: self.head.map_ref(&format!("{prefix}.head"), f),
        }
    }
}

impl<T> ModelParams<T> {
    /// Rebuild the structure with new leaves, visiting every tensor in the
    /// fixed traversal order. The callback receives a stable dotted name.
    pub fn map_ref<'a, U>(&'a self, f: &mut impl FnMut(&str, &'a T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self
                .encoder
                .iter()
                .enumerate()
                .map(|(i, c)| c.map_ref(&format!("encoder.{i}"), f))
                .collect(),
            decoder: self
                .decoder
                .iter()
                .enumerate()
                .map(|(i, [a, b])| {
                    [
                        a.map_ref(&format!("decoder.{i}.conv0"), f),
                        b.map_ref(&format!("decoder.{i}.conv1"), f),
                    ]
                })
                .collect(),
            coarsest_cnc: self
                .coarsest_cnc
                .as_ref()
                .map(|c| c.map_ref("coarsest_cnc", f)),
            seed_f: self.seed_f.as_ref().map(|t| t.map_ref("seed_f", f)),
            rffm: self
                .rffm
                .iter()
                .enumerate()
                .map(|(i, lvl)| RffmLevel {
                    f_warp: lvl.f_warp.map_ref(&format!("rffm.{i}.f_warp"), f),
                    psi_cnc: lvl.psi_cnc.map_ref(&format!("rffm.{i}.psi_cnc"), f),
                    f_resid: lvl.f_resid.map_ref(&format!("rffm.{i}.f_resid"), f),
                    cfm: Cfm {
                        pair_resid: lvl.cfm.pair_resid.map_ref(&format!("rffm.{i}.cfm.pair_resid"), f),
                        pair_fixed: lvl.cfm.pair_fixed.map_ref(&format!("rffm.{i}.cfm.pair_fixed"), f),
                        joint: lvl.cfm.joint.map_ref(&format!("rffm.{i}.cfm.joint"), f),
                    },
                })
                .collect(),
            psi_up: self
                .psi_up
                .iter()
                .enumerate()
                .map(|(i, c)| c.map_ref(&format!("psi_up.{i}"), f))
                .collect(),
            final_f: self.final_f.as_ref().map(|t| t.map_ref("final_f", f)),
            rdffm: self
                .rdffm
                .iter()
                .enumerate()
                .map(|(i, lvl)| RdffmLevel {
                    cnc: lvl.cnc.map_ref(&format!("rdffm.{i}.cnc"), f),
                    f_theta: lvl.f_theta.map_ref(&format!("rdffm.{i}.f_theta"), f),
                })
                .collect(),
            baseline: self.baseline.as_ref().map(|b| BaselineHead {
                cnc: b.cnc.map_ref("baseline.cnc", f),
                f_theta: b.f_theta.map_ref("baseline.f_theta", f),
            }),
        }
    }

    /// Visit every leaf in traversal order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&str, &'a T)) {
        // map_ref with a unit target doubles as a read-only walk.
        let _ = self.map_ref(&mut |name, t| f(name, t));
    }
}

impl ModelParams<TensorData> {
    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Leaf names and tensors in traversal order.
    pub fn flatten(&self) -> Vec<(String, &TensorData)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t)));
        out
    }
}

/// Production initialization: every non-head convolution uniform in
/// ±1/√fan_in, every field head exactly zero so the initial model is the
/// identity registration.
pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams<TensorData>> {
    build(config, seed, true)
}

/// Like [`init`] but with random field heads. The production zero heads
/// block gradient flow past themselves at step 0, so structural gradient
/// checks use this variant.
pub fn init_random_all(config: &ModelConfig, seed: u64) -> Result<ModelParams<TensorData>> {
    build(config, seed, false)
}

fn build(config: &ModelConfig, seed: u64, zero_heads: bool) -> Result<ModelParams<TensorData>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = config.levels;
    let c = |level: usize| config.channels(level);
    let modular = config.enable_rffm || config.enable_rdffm;

    let mut encoder = Vec::with_capacity(l);
    for level in 1..=l {
        let cin = if level == 1 { 1 } else { c(level - 1) };
        encoder.push(conv_init(cin, c(level), &mut rng));
    }

    // Decoder levels coarse → fine: at level i the upsampled feature above
    // carries c(i+1) channels and the skip carries c(i).
    let mut decoder = Vec::with_capacity(l - 1);
    for level in (1..l).rev() {
        decoder.push([
            conv_init(c(level + 1) + c(level), c(level), &mut rng),
            conv_init(c(level), c(level), &mut rng),
        ]);
    }

    let coarsest_cnc = modular.then(|| conv_init(2 * c(l), c(l - 1), &mut rng));
    let seed_f = config
        .enable_rdffm
        .then(|| f_theta_init(c(l - 1), config.f_theta_depth, zero_heads, &mut rng));

    let mut rffm = Vec::new();
    let mut psi_up = Vec::new();
    let mut final_f = None;
    if config.enable_rffm {
        for level in (1..l).rev() {
            let ch = c(level);
            rffm.push(RffmLevel {
                f_warp: f_theta_init(ch, config.f_theta_depth, zero_heads, &mut rng),
                psi_cnc: conv_init(2 * ch, ch, &mut rng),
                f_resid: f_theta_init(ch, config.f_theta_depth, zero_heads, &mut rng),
                cfm: Cfm {
                    pair_resid: conv_init(2 * ch, ch, &mut rng),
                    pair_fixed: conv_init(2 * ch, ch, &mut rng),
                    joint: conv_init(2 * ch, ch, &mut rng),
                },
            });
            if level > 1 {
                psi_up.push(conv_init(ch, c(level - 1), &mut rng));
            }
        }
        final_f = Some(f_theta_init(c(1), config.f_theta_depth, zero_heads, &mut rng));
    }

    let mut rdffm = Vec::new();
    if config.enable_rdffm {
        for level in (1..l).rev() {
            let ch = c(level);
            rdffm.push(RdffmLevel {
                cnc: conv_init(2 * ch, ch, &mut rng),
                f_theta: f_theta_init(ch, config.f_theta_depth, zero_heads, &mut rng),
            });
        }
    }

    let baseline = (!modular).then(|| BaselineHead {
        cnc: conv_init(2 * c(1), c(1), &mut rng),
        f_theta: f_theta_init(c(1), config.f_theta_depth, zero_heads, &mut rng),
    });

    Ok(ModelParams {
        encoder,
        decoder,
        coarsest_cnc,
        seed_f,
        rffm,
        psi_up,
        final_f,
        rdffm,
        baseline,
    })
}

fn conv_init(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Conv<TensorData> {
    let bound = 1.0 / ((cin * KERNEL * KERNEL * KERNEL) as f64).sqrt();
    Conv {
        weight: TensorData::random_uniform(
            &[cout, cin, KERNEL, KERNEL, KERNEL],
            -bound,
            bound,
            rng,
        ),
        bias: TensorData::random_uniform(&[cout], -bound, bound, rng),
    }
}

fn conv_zero(cin: usize, cout: usize) -> Conv<TensorData> {
    Conv {
        weight: TensorData::zeros(&[cout, cin, KERNEL, KERNEL, KERNEL]),
        bias: TensorData::zeros(&[cout]),
    }
}

fn f_theta_init(
    cin: usize,
    depth: usize,
    zero_head: bool,
    rng: &mut ChaCha8Rng,
) -> FTheta<TensorData> {
    let mut blocks = Vec::with_capacity(depth);
    let mut ch = cin;
    for _ in 0..depth {
        // "Channel indentation": the first conv halves the width, the
        // second works at the narrowed width.
        let narrow = (ch / 2).max(1);
        blocks.push([conv_init(ch, narrow, rng), conv_init(narrow, narrow, rng)]);
        ch = narrow;
    }
    let head = if zero_head {
        conv_zero(ch, 3)
    } else {
        conv_init(ch, 3, rng)
    };
    FTheta { blocks, head }
}

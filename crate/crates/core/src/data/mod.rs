//! Synthetic labeled phantoms, ground-truth deformations, and volume I/O.
//!
//! Real registration datasets are access-gated, so everything here is
//! generated: a phantom volume with contiguous labels, a smooth random
//! displacement field, and a moving image defined as the phantom warped by
//! that field. Generation is a pure function of the spec (including its
//! seed), which is what makes training runs and tests reproducible.

mod phantom;
pub mod vgrid;

pub use phantom::{field_from_batch, field_to_batch, make_pair, synth_phantom, SyntheticPair};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorData;

/// Scalar intensity grid in `[0,1]`, isotropic spacing in mm per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: f64,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: f64, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "volume dims {:?} need {} values, got {}",
                dims,
                n,
                data.len()
            )));
        }
        if dims.iter().any(|&e| e == 0 || e % 4 != 0) {
            return Err(Error::shape(format!(
                "volume extents must be positive multiples of 4 (pyramid halves twice), got {:?}",
                dims
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("volume contains non-finite values".to_string()));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// View as a `[1,1,D,H,W]` tensor for the network and losses.
    pub fn to_tensor(&self) -> TensorData {
        let [d, h, w] = self.dims;
        TensorData::new(vec![1, 1, d, h, w], self.data.clone()).expect("dims agree")
    }

    pub fn from_tensor(t: &TensorData, spacing: f64) -> Result<Self> {
        let [b, c, d, h, w] = t.dims5()?;
        if b != 1 || c != 1 {
            return Err(Error::shape(format!(
                "expected a [1,1,D,H,W] tensor, got {:?}",
                t.shape()
            )));
        }
        Self::new([d, h, w], spacing, t.data().to_vec())
    }
}

/// Integer segmentation grid; label values are contiguous from zero
/// (zero = background).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: [usize; 3],
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], data: Vec<u16>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "label map dims {:?} need {} values, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    /// Distinct labels present, ascending.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut seen = std::collections::BTreeSet::new();
        seen.extend(self.data.iter().copied());
        seen.into_iter().collect()
    }
}

/// Everything needed to generate one synthetic registration pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticPairSpec {
    pub extents: [usize; 3],
    pub num_labels: u16,
    /// Box-blur radius used to smooth both the phantom and the field.
    pub smoothness: usize,
    /// Peak displacement magnitude per component, in voxels.
    pub max_displacement: f64,
    pub seed: u64,
}

impl Default for SyntheticPairSpec {
    fn default() -> Self {
        Self {
            extents: [32, 32, 32],
            num_labels: 5,
            smoothness: 2,
            max_displacement: 3.0,
            seed: 0,
        }
    }
}

impl SyntheticPairSpec {
    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.extents;
        let min_ext = d.min(h).min(w);
        if d % 4 != 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::config(format!(
                "extents must be divisible by 4 for the pyramid, got {:?}",
                self.extents
            )));
        }
        if min_ext < 8 {
            return Err(Error::config(format!(
                "extents {:?} too small to carve {} labels out of",
                self.extents, self.num_labels
            )));
        }
        if self.num_labels < 1 {
            return Err(Error::config("num_labels must be >= 1".to_string()));
        }
        if self.max_displacement < 0.0 || self.max_displacement > min_ext as f64 / 4.0 {
            return Err(Error::config(format!(
                "max_displacement {} outside [0, {}] (min extent / 4)",
                self.max_displacement,
                min_ext as f64 / 4.0
            )));
        }
        Ok(())
    }
}

/// Derive an independent RNG seed for one named stream of a run. Streams
/// (train pairs, held-out pairs, model init, ...) must never share raw
/// seeds, or "independent" data would be correlated.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined value.
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

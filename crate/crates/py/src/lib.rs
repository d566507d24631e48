//! Python bindings for voxreg.
//!
//! Volumes cross the boundary as flat row-major `list[float]` plus a
//! `(d, h, w)` extent tuple; label maps as `list[int]`; displacement
//! fields as flat `[3, d, h, w]` lists in voxel units (component-major:
//! all z-offsets, then y, then x). Desk-scale grids are small enough
//! that plain lists beat pulling in an array protocol dependency.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use voxreg::data::{make_pair, field_from_batch, LabelMap, SyntheticPairSpec, Volume};
use voxreg::losses::{ncc_loss, LossConfig};
use voxreg::metrics;
use voxreg::model::{self, ModelConfig, ModelParams};
use voxreg::tensor::{kernels, Tape, TensorData};
use voxreg::trainer::{load_checkpoint, save_checkpoint};

fn err(e: voxreg::Error) -> PyErr {
    match e {
        voxreg::Error::FileNotFound { .. } | voxreg::Error::Io { .. } => {
            PyIOError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn volume_from(data: Vec<f64>, dims: (usize, usize, usize)) -> Result<Volume, voxreg::Error> {
    Volume::new([dims.0, dims.1, dims.2], 1.0, data)
}

fn labels_from(data: Vec<u16>, dims: (usize, usize, usize)) -> Result<LabelMap, voxreg::Error> {
    LabelMap::new([dims.0, dims.1, dims.2], data)
}

fn field_from(data: Vec<f64>, dims: (usize, usize, usize)) -> Result<TensorData, voxreg::Error> {
    TensorData::new(vec![3, dims.0, dims.1, dims.2], data)
}

/// One synthetic registration problem with known correspondence.
#[pyclass(frozen)]
pub struct Pair {
    /// Flat fixed volume, intensities in [0, 1].
    #[pyo3(get)]
    pub fixed: Vec<f64>,
    /// Flat moving volume.
    #[pyo3(get)]
    pub moving: Vec<f64>,
    /// Flat fixed label map (0 = background).
    #[pyo3(get)]
    pub fixed_labels: Vec<u16>,
    /// Flat moving label map.
    #[pyo3(get)]
    pub moving_labels: Vec<u16>,
    /// Ground-truth displacement, `[3, d, h, w]`, voxel units.
    #[pyo3(get)]
    pub field_gt: Vec<f64>,
    /// Grid extents `(d, h, w)`.
    #[pyo3(get)]
    pub dims: (usize, usize, usize),
}

/// Generate a smooth random phantom pair. The same arguments always
/// produce the same pair.
#[pyfunction]
#[pyo3(signature = (size=16, num_labels=5, smoothness=2, max_displacement=3.0, seed=0))]
fn synth_pair(
    size: usize,
    num_labels: u16,
    smoothness: usize,
    max_displacement: f64,
    seed: u64,
) -> PyResult<Pair> {
    let spec = SyntheticPairSpec {
        extents: [size, size, size],
        num_labels,
        smoothness,
        max_displacement,
        seed,
    };
    let pair = make_pair(&spec).map_err(err)?;
    let dims = pair.fixed.dims();
    Ok(Pair {
        fixed: pair.fixed.data().to_vec(),
        moving: pair.moving.data().to_vec(),
        fixed_labels: pair.fixed_labels.data().to_vec(),
        moving_labels: pair.moving_labels.data().to_vec(),
        field_gt: pair.field_gt.into_data(),
        dims: (dims[0], dims[1], dims[2]),
    })
}

/// A registration network: configuration plus parameter tensors.
#[pyclass]
pub struct Model {
    config: ModelConfig,
    params: ModelParams<TensorData>,
}

#[pymethods]
impl Model {
    /// Fresh model with production initialization (field heads start at
    /// zero, so an untrained model predicts the identity transform).
    #[new]
    #[pyo3(signature = (base_channels=8, levels=3, enable_rffm=true, enable_rdffm=true, seed=0))]
    fn new(
        base_channels: usize,
        levels: usize,
        enable_rffm: bool,
        enable_rdffm: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            base_channels,
            levels,
            enable_rffm,
            enable_rdffm,
            ..Default::default()
        };
        let params = model::init(&config, seed).map_err(err)?;
        Ok(Model { config, params })
    }

    /// Load a model from a `.vckpt` checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint(&path).map_err(err)?;
        Ok(Model {
            config: ckpt.model,
            params: ckpt.params,
        })
    }

    /// Save the model as a `.vckpt` checkpoint (no optimizer state).
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.config, &self.params, None, 0).map_err(err)
    }

    /// Total number of scalar parameters.
    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Architecture description as a JSON string.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.config)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Predict the displacement field aligning `moving` to `fixed`.
    /// Returns a flat `[3, d, h, w]` field in voxel units.
    fn register(
        &self,
        fixed: Vec<f64>,
        moving: Vec<f64>,
        dims: (usize, usize, usize),
    ) -> PyResult<Vec<f64>> {
        let f = volume_from(fixed, dims).map_err(err)?;
        let m = volume_from(moving, dims).map_err(err)?;
        let (batch, _diag) =
            model::register(&self.params, &self.config, &f.to_tensor(), &m.to_tensor())
                .map_err(err)?;
        let field = field_from_batch(&batch).map_err(err)?;
        Ok(field.into_data())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(base_channels={}, levels={}, rffm={}, rdffm={}, params={})",
            self.config.base_channels,
            self.config.levels,
            self.config.enable_rffm,
            self.config.enable_rdffm,
            self.params.param_count()
        )
    }
}

/// Trilinearly warp a volume by a displacement field (both flat,
/// field `[3, d, h, w]`). Out-of-bounds samples clamp to the border.
#[pyfunction]
fn warp(
    volume: Vec<f64>,
    field: Vec<f64>,
    dims: (usize, usize, usize),
) -> PyResult<Vec<f64>> {
    let v = volume_from(volume, dims).map_err(err)?;
    let f = field_from(field, dims).map_err(err)?;
    let [d, h, w] = v.dims();
    Ok(kernels::warp_forward(v.data(), [1, 1, d, h, w], f.data()))
}

/// Warp a label map by nearest-neighbour resampling of the same field
/// convention as `warp`.
#[pyfunction]
fn warp_labels(
    labels: Vec<u16>,
    field: Vec<f64>,
    dims: (usize, usize, usize),
) -> PyResult<Vec<u16>> {
    let l = labels_from(labels, dims).map_err(err)?;
    let f = field_from(field, dims).map_err(err)?;
    let warped = voxreg::trainer::warp_labels(&l, &f).map_err(err)?;
    Ok(warped.data().to_vec())
}

/// Windowed normalized cross-correlation loss between two volumes;
/// -1 means perfectly correlated. The window shrinks automatically on
/// grids smaller than it.
#[pyfunction]
#[pyo3(signature = (a, b, dims, window=9))]
fn ncc(a: Vec<f64>, b: Vec<f64>, dims: (usize, usize, usize), window: usize) -> PyResult<f64> {
    let va = volume_from(a, dims).map_err(err)?;
    let vb = volume_from(b, dims).map_err(err)?;
    let config = LossConfig {
        ncc_window: window,
        ..Default::default()
    };
    let mut tape = Tape::new();
    let ta = tape.constant(va.to_tensor());
    let tb = tape.constant(vb.to_tensor());
    let loss = ncc_loss(&mut tape, ta, tb, &config).map_err(err)?;
    Ok(tape.data(loss)[0])
}

/// Per-label Dice overlap over the foreground labels of `a`.
#[pyfunction]
fn dice(
    a: Vec<u16>,
    b: Vec<u16>,
    dims: (usize, usize, usize),
) -> PyResult<BTreeMap<u16, f64>> {
    let la = labels_from(a, dims).map_err(err)?;
    let lb = labels_from(b, dims).map_err(err)?;
    let labels = metrics::foreground_labels(&la);
    metrics::dice(&la, &lb, &labels).map_err(err)
}

/// 95th-percentile symmetric Hausdorff distance for one label, in
/// physical units (`spacing` × voxels).
#[pyfunction]
#[pyo3(signature = (a, b, dims, label, spacing=1.0))]
fn hd95(
    a: Vec<u16>,
    b: Vec<u16>,
    dims: (usize, usize, usize),
    label: u16,
    spacing: f64,
) -> PyResult<f64> {
    let la = labels_from(a, dims).map_err(err)?;
    let lb = labels_from(b, dims).map_err(err)?;
    metrics::hd95(&la, &lb, label, spacing).map_err(err)
}

/// Deformation regularity of a `[3, d, h, w]` field: returns
/// `(sd_log_jacobian, folding_fraction)`.
#[pyfunction]
fn sdlogj(field: Vec<f64>, dims: (usize, usize, usize)) -> PyResult<(f64, f64)> {
    let f = field_from(field, dims).map_err(err)?;
    metrics::sdlogj(&f).map_err(err)
}

#[pymodule]
fn voxreg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Pair>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth_pair, m)?)?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(warp_labels, m)?)?;
    m.add_function(wrap_pyfunction!(ncc, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(sdlogj, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversion_helpers_validate_lengths() {
        assert!(volume_from(vec![0.0; 8], (2, 2, 2)).is_ok());
        assert!(volume_from(vec![0.0; 7], (2, 2, 2)).is_err());
        assert!(labels_from(vec![0; 8], (2, 2, 2)).is_ok());
        assert!(field_from(vec![0.0; 24], (2, 2, 2)).is_ok());
        assert!(field_from(vec![0.0; 8], (2, 2, 2)).is_err());
    }

    #[test]
    fn error_mapping_distinguishes_io() {
        let missing = voxreg::Error::FileNotFound {
            path: "/nope".into(),
        };
        assert!(err(missing).to_string().contains("file not found"));
        let shape = voxreg::Error::shape("bad".to_string());
        assert!(err(shape).to_string().contains("shape"));
    }
}

//! Training loop, held-out evaluation, and the pieces they share.
//!
//! Pairs are generated on the fly; every random decision derives from
//! `TrainConfig::seed` through fixed stream tags, so a run is a pure
//! function of its config and resuming from a checkpoint replays the
//! exact pair sequence an uninterrupted run would have seen.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{field_from_batch, make_pair, mix_seed, LabelMap, SyntheticPair, SyntheticPairSpec, Volume};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::metrics::{dice, foreground_labels, metric_report, MetricReport};
use crate::model::{forward, init, params_to_tape, register, ModelConfig, ModelParams};
use crate::tensor::kernels;
use crate::tensor::{Tape, TensorData};

/// File names a training run leaves in its output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.vckpt";
pub const LOG_FILE: &str = "train_log.txt";

const STREAM_INIT: u64 = 0x494e_4954; // model weights
const STREAM_HELDOUT: u64 = 0xffff_ffff_0000_0001; // evaluation pair
const STREAM_TRAIN_BASE: u64 = 0x1_0000_0000; // + global pair index

/// Full description of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Fresh synthetic pairs drawn per epoch (batch size is one volume pair).
    pub pairs_per_epoch: usize,
    /// Epoch interval between checkpoint rewrites.
    pub checkpoint_every: usize,
    /// Epoch interval between held-out evaluations.
    pub eval_every: usize,
    pub adam: AdamHyper,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Geometry of the generated pairs. Its `seed` offsets the dataset
    /// family; per-pair seeds are derived from it and `self.seed`.
    pub pair: SyntheticPairSpec,
    /// Size of the training set. `Some(n)` cycles through a fixed pool of
    /// `n` pairs across epochs (ordinary dataset semantics); `None` draws
    /// a never-repeating pair for every step.
    pub dataset_pairs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 4,
            pairs_per_epoch: 8,
            checkpoint_every: 1,
            eval_every: 1,
            adam: AdamHyper::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            pair: SyntheticPairSpec::default(),
            dataset_pairs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.model.validate()?;
        self.pair.validate()?;
        if self.pairs_per_epoch == 0 {
            return Err(Error::config("pairs_per_epoch must be at least 1".to_string()));
        }
        if self.checkpoint_every == 0 || self.eval_every == 0 {
            return Err(Error::config(
                "checkpoint_every and eval_every must be at least 1".to_string(),
            ));
        }
        if self.dataset_pairs == Some(0) {
            return Err(Error::config("dataset_pairs must be at least 1".to_string()));
        }
        let divisor = self.model.extent_divisor();
        if self.pair.extents.iter().any(|e| e % divisor != 0) {
            return Err(Error::config(format!(
                "pair extents {:?} are not divisible by the pyramid factor {divisor}",
                self.pair.extents
            )));
        }
        Ok(())
    }

    fn data_base(&self) -> u64 {
        mix_seed(self.seed, self.pair.seed)
    }

    fn pair_spec(&self, seed: u64) -> SyntheticPairSpec {
        SyntheticPairSpec {
            seed,
            ..self.pair.clone()
        }
    }

    /// The evaluation pair, drawn from a stream disjoint from training.
    pub fn heldout_pair(&self) -> Result<SyntheticPair> {
        make_pair(&self.pair_spec(mix_seed(self.data_base(), STREAM_HELDOUT)))
    }

    fn train_pair(&self, index: usize) -> Result<SyntheticPair> {
        let slot = match self.dataset_pairs {
            Some(n) => index % n,
            None => index,
        };
        let seed = mix_seed(self.data_base(), STREAM_TRAIN_BASE + slot as u64);
        make_pair(&self.pair_spec(seed))
    }

    pub fn init_params(&self) -> Result<ModelParams<TensorData>> {
        init(&self.model, mix_seed(self.seed, STREAM_INIT))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean of |φ| over the epoch's training outputs.
    pub mean_abs_phi: f64,
    /// Mean foreground DSC on the held-out pair, when evaluated this epoch.
    pub heldout_dsc: Option<f64>,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        let mut line = format!(
            "epoch={} mean_loss={:.6} mean_abs_phi={:.6}",
            self.epoch, self.mean_loss, self.mean_abs_phi
        );
        if let Some(d) = self.heldout_dsc {
            line.push_str(&format!(" heldout_dsc={:.6}", d));
        }
        line
    }
}

/// What a finished (or no-op) training run hands back.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<TensorData>,
    pub adam: AdamState,
    pub log: Vec<EpochRecord>,
    pub epochs_done: usize,
}

/// Train from scratch. With an output directory, checkpoints and the
/// key=value log are written as the run progresses; a loss blow-up aborts
/// with `Error::Numeric` and leaves the last completed checkpoint in place.
pub fn train(config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let params = config.init_params()?;
    let adam = AdamState::new(&params);
    if let Some(dir) = out_dir {
        // Fresh run: start the log over.
        let _ = std::fs::remove_file(dir.join(LOG_FILE));
    }
    run_epochs(config, out_dir, params, adam, 0)
}

/// Continue a run from a checkpoint written by [`train`]. The subsequent
/// pair sequence, updates, and log lines match an uninterrupted run.
pub fn resume(config: &TrainConfig, out_dir: Option<&Path>, ckpt: Checkpoint) -> Result<TrainOutcome> {
    config.validate()?;
    if ckpt.model != config.model {
        return Err(Error::config(
            "checkpoint was trained with a different model configuration".to_string(),
        ));
    }
    let adam = ckpt.adam.ok_or_else(|| {
        Error::config("checkpoint lacks optimizer state and cannot seed a resumed run".to_string())
    })?;
    run_epochs(config, out_dir, ckpt.params, adam, ckpt.epochs_done)
}

fn run_epochs(
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut params: ModelParams<TensorData>,
    mut adam: AdamState,
    start_epoch: usize,
) -> Result<TrainOutcome> {
    let mut log = Vec::new();
    let mut epochs_done = start_epoch;
    for epoch in start_epoch..config.epochs {
        let mut loss_sum = 0.0;
        let mut phi_sum = 0.0;
        for j in 0..config.pairs_per_epoch {
            let index = epoch * config.pairs_per_epoch + j;
            let pair = config.train_pair(index)?;
            let step = training_step(&params, config, &pair).map_err(|e| {
                abort_with_context(e, epoch + 1, index, out_dir.is_some())
            })?;
            adam_step(&mut params, &step.grads, &mut adam, &config.adam)
                .map_err(|e| abort_with_context(e, epoch + 1, index, out_dir.is_some()))?;
            loss_sum += step.loss;
            phi_sum += step.mean_abs_phi;
        }
        epochs_done = epoch + 1;
        let heldout = if epochs_done % config.eval_every == 0 || epochs_done == config.epochs {
            Some(heldout_scores(&params, config)?.0)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: epochs_done,
            mean_loss: loss_sum / config.pairs_per_epoch as f64,
            mean_abs_phi: phi_sum / config.pairs_per_epoch as f64,
            heldout_dsc: heldout,
        };
        if let Some(dir) = out_dir {
            append_log_line(&dir.join(LOG_FILE), &record.to_line())?;
            if epochs_done % config.checkpoint_every == 0 || epochs_done == config.epochs {
                save_checkpoint(
                    &dir.join(CHECKPOINT_FILE),
                    &config.model,
                    &params,
                    Some(&adam),
                    epochs_done,
                )?;
            }
        }
        log.push(record);
    }
    if let Some(dir) = out_dir {
        // Covers the epochs == 0 no-op and resumes that had nothing to do.
        let path = dir.join(CHECKPOINT_FILE);
        if !path.exists() {
            save_checkpoint(&path, &config.model, &params, Some(&adam), epochs_done)?;
        }
    }
    Ok(TrainOutcome {
        params,
        adam,
        log,
        epochs_done,
    })
}

fn abort_with_context(err: Error, epoch: usize, pair_index: usize, has_dir: bool) -> Error {
    let retained = if has_dir {
        "; the last completed checkpoint is retained"
    } else {
        ""
    };
    match err {
        Error::Numeric(msg) => Error::Numeric(format!(
            "aborting at epoch {epoch}, pair {pair_index}: {msg}{retained}"
        )),
        other => other,
    }
}

struct StepResult {
    loss: f64,
    mean_abs_phi: f64,
    grads: Vec<Vec<f64>>,
}

fn training_step(
    params: &ModelParams<TensorData>,
    config: &TrainConfig,
    pair: &SyntheticPair,
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let vars = params_to_tape(&mut tape, params, true);
    let fixed = tape.constant(pair.fixed.to_tensor());
    let moving = tape.constant(pair.moving.to_tensor());
    let (phi, _) = forward(&mut tape, &vars, &config.model, fixed, moving)?;
    let loss = total_loss(&mut tape, fixed, moving, phi, &config.loss)?;
    let loss_value = tape.data(loss)[0];
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("training loss became {loss_value}")));
    }
    let phi_data = tape.data(phi);
    let mean_abs_phi = phi_data.iter().map(|x| x.abs()).sum::<f64>() / phi_data.len() as f64;

    let grad_table = tape.backward(loss)?;
    let mut grads = Vec::new();
    let mut bad: Option<String> = None;
    vars.visit(&mut |name, v| {
        let g = grad_table.get(*v).map(|s| s.to_vec()).unwrap_or_default();
        if bad.is_none() {
            if let Some(x) = g.iter().find(|x| !x.is_finite()) {
                bad = Some(format!("non-finite gradient {x} in {name}"));
            }
        }
        grads.push(g);
    });
    if let Some(msg) = bad {
        return Err(Error::Numeric(msg));
    }
    Ok(StepResult {
        loss: loss_value,
        mean_abs_phi,
        grads,
    })
}

fn append_log_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    writeln!(f, "{line}").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Warp a label map with a bare `[3,D,H,W]` field, nearest-neighbor.
pub fn warp_labels(labels: &LabelMap, field: &TensorData) -> Result<LabelMap> {
    let dims = labels.dims();
    let shape = field.shape();
    if shape != [3, dims[0], dims[1], dims[2]] {
        return Err(Error::shape(format!(
            "field {:?} does not match label map {:?}",
            shape, dims
        )));
    }
    LabelMap::new(dims, kernels::warp_nearest_labels(labels.data(), dims, field.data()))
}

/// Mean foreground DSC and mean |φ| for the held-out pair under `params`.
pub fn heldout_scores(params: &ModelParams<TensorData>, config: &TrainConfig) -> Result<(f64, f64)> {
    let pair = config.heldout_pair()?;
    let (phi, _) = register(params, &config.model, &pair.fixed.to_tensor(), &pair.moving.to_tensor())?;
    let mean_abs_phi = phi.data().iter().map(|x| x.abs()).sum::<f64>() / phi.numel() as f64;
    let field = field_from_batch(&phi)?;
    let warped = warp_labels(&pair.moving_labels, &field)?;
    let labels = foreground_labels(&pair.fixed_labels);
    let per_label = dice(&pair.fixed_labels, &warped, &labels)?;
    let dsc = mean_of(per_label.values().copied());
    Ok((dsc, mean_abs_phi))
}

/// Mean foreground DSC with no registration at all — the floor a trained
/// model has to beat.
pub fn identity_dsc(fixed_labels: &LabelMap, moving_labels: &LabelMap) -> Result<f64> {
    let labels = foreground_labels(fixed_labels);
    let per_label = dice(fixed_labels, moving_labels, &labels)?;
    Ok(mean_of(per_label.values().copied()))
}

/// One evaluation case: two volumes and their segmentations.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_labels: LabelMap,
    pub moving_labels: LabelMap,
}

impl From<&SyntheticPair> for EvalPair {
    fn from(p: &SyntheticPair) -> Self {
        Self {
            fixed: p.fixed.clone(),
            moving: p.moving.clone(),
            fixed_labels: p.fixed_labels.clone(),
            moving_labels: p.moving_labels.clone(),
        }
    }
}

/// Per-pair reports plus mean ± population-std aggregates across pairs.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub reports: Vec<MetricReport>,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub hd95_mean: f64,
    pub hd95_std: f64,
    pub sdlogj_mean: f64,
    pub sdlogj_std: f64,
    pub neg_jacobian_fraction_mean: f64,
}

impl EvalSummary {
    pub fn aggregate_kv(&self) -> Vec<String> {
        vec![
            format!("pairs={}", self.reports.len()),
            format!("aggregate_dsc_mean={:.6}", self.dsc_mean),
            format!("aggregate_dsc_std={:.6}", self.dsc_std),
            format!("aggregate_hd95_mean={:.6}", self.hd95_mean),
            format!("aggregate_hd95_std={:.6}", self.hd95_std),
            format!("aggregate_sdlogj_mean={:.6}", self.sdlogj_mean),
            format!("aggregate_sdlogj_std={:.6}", self.sdlogj_std),
            format!(
                "aggregate_neg_jacobian_fraction_mean={:.6}",
                self.neg_jacobian_fraction_mean
            ),
        ]
    }
}

/// Register each pair, warp its labels, and score DSC / HD95 / SDlogJ.
pub fn evaluate(
    params: &ModelParams<TensorData>,
    model: &ModelConfig,
    pairs: &[EvalPair],
) -> Result<EvalSummary> {
    if pairs.is_empty() {
        return Err(Error::config("evaluate needs at least one pair".to_string()));
    }
    let mut reports = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (phi, _) = register(params, model, &pair.fixed.to_tensor(), &pair.moving.to_tensor())?;
        let field = field_from_batch(&phi)?;
        let warped = warp_labels(&pair.moving_labels, &field)?;
        let labels = foreground_labels(&pair.fixed_labels);
        reports.push(metric_report(
            &pair.fixed_labels,
            &warped,
            &field,
            &labels,
            pair.fixed.spacing(),
        )?);
    }
    let dsc: Vec<f64> = reports.iter().map(|r| r.dsc_mean).collect();
    let hd95: Vec<f64> = reports
        .iter()
        .map(|r| mean_of(r.hd95_per_label.values().copied()))
        .collect();
    let sdlogj: Vec<f64> = reports.iter().map(|r| r.sdlogj).collect();
    let neg: Vec<f64> = reports.iter().map(|r| r.neg_jacobian_fraction).collect();
    let (dsc_mean, dsc_std) = mean_std(&dsc);
    let (hd95_mean, hd95_std) = mean_std(&hd95);
    let (sdlogj_mean, sdlogj_std) = mean_std(&sdlogj);
    Ok(EvalSummary {
        reports,
        dsc_mean,
        dsc_std,
        hd95_mean,
        hd95_std,
        sdlogj_mean,
        sdlogj_std,
        neg_jacobian_fraction_mean: mean_std(&neg).0,
    })
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

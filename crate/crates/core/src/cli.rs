//! Command-line front end: synthesize phantom pairs, train, register,
//! score, and finite-difference-check the backward pass.
//!
//! Exit codes: 0 on success, 2 for configuration and file problems,
//! 3 for numeric blow-ups (non-finite loss or gradients), and 1 when a
//! gradient check run completes but a check exceeds its tolerance.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{field_from_batch, make_pair, mix_seed, vgrid, SyntheticPairSpec, Volume};
use crate::error::{Error, Result};
use crate::model::{full_network_check, register, ModelConfig};
use crate::tensor::gradcheck::{negative_control, op_checks};
use crate::tensor::{kernels, GradCheckOptions};
use crate::trainer::{self, evaluate, load_checkpoint, EvalPair, TrainConfig, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(
    name = "voxreg",
    version,
    about = "Deformable 3D registration on synthetic phantom volumes"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic volume pairs with ground-truth fields.
    Synth(SynthArgs),
    /// Train a model on generated pairs.
    Train(TrainArgs),
    /// Apply a trained model to one volume pair.
    Register(RegisterArgs),
    /// Score a checkpoint against a generated dataset.
    Evaluate(EvaluateArgs),
    /// Finite-difference validation of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Print the header of a grid file.
    Inspect(InspectArgs),
}

/// Parse the process arguments, dispatch, and map errors to exit codes.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Register(args) => cmd_register(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Inspect(args) => cmd_inspect(&args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

// ---------------------------------------------------------------- synth --

#[derive(Args)]
struct SynthArgs {
    /// Directory to write the dataset into (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs to generate.
    #[arg(long, default_value_t = 4)]
    pairs: usize,
    /// Cubic extent per axis; must be a multiple of 4.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Distinct foreground labels per phantom.
    #[arg(long, default_value_t = 5)]
    labels: u16,
    /// Peak ground-truth displacement per component, in voxels.
    #[arg(long, default_value_t = 3.0)]
    max_displacement: f64,
    /// Box-blur radius for both texture and field smoothing.
    #[arg(long, default_value_t = 2)]
    smoothness: usize,
}

/// Files of one dataset entry, relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub fixed: String,
    pub moving: String,
    pub fixed_labels: String,
    pub moving_labels: String,
    pub field: String,
}

/// Dataset index written by `synth` and consumed by `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: SyntheticPairSpec,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn cmd_synth(args: &SynthArgs) -> Result<ExitCode> {
    let spec = SyntheticPairSpec {
        extents: [args.size; 3],
        num_labels: args.labels,
        smoothness: args.smoothness,
        max_displacement: args.max_displacement,
        seed: 0,
    };
    spec.validate()?;
    if args.pairs == 0 {
        return Err(Error::config("--pairs must be at least 1".to_string()));
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;

    let mut entries = Vec::with_capacity(args.pairs);
    for i in 0..args.pairs {
        let pair = make_pair(&SyntheticPairSpec {
            seed: mix_seed(args.seed, i as u64),
            ..spec.clone()
        })?;
        let stem = format!("pair_{i:04}");
        let entry = ManifestEntry {
            fixed: format!("{stem}_fixed.vgrid"),
            moving: format!("{stem}_moving.vgrid"),
            fixed_labels: format!("{stem}_fixed_labels.vgrid"),
            moving_labels: format!("{stem}_moving_labels.vgrid"),
            field: format!("{stem}_field.vgrid"),
        };
        vgrid::save_volume(&args.out.join(&entry.fixed), &pair.fixed)?;
        vgrid::save_volume(&args.out.join(&entry.moving), &pair.moving)?;
        vgrid::save_labels(&args.out.join(&entry.fixed_labels), &pair.fixed_labels)?;
        vgrid::save_labels(&args.out.join(&entry.moving_labels), &pair.moving_labels)?;
        vgrid::save_field(&args.out.join(&entry.field), &pair.field_gt, pair.fixed.spacing())?;
        entries.push(entry);
    }

    let manifest = Manifest {
        seed: args.seed,
        spec,
        entries,
    };
    write_json(&args.out.join(MANIFEST_FILE), &manifest)?;
    println!("wrote {} pairs to {}", args.pairs, args.out.display());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------- train --

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the checkpoint, log, and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint instead of initializing fresh weights.
    #[arg(long)]
    resume: Option<PathBuf>,

    // Overrides; every flag wins over the config file.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Smoothness weight in the loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Cubic extent of the generated training pairs.
    #[arg(long)]
    size: Option<usize>,
    /// Peak ground-truth displacement of generated pairs, in voxels.
    #[arg(long)]
    max_displacement: Option<f64>,
    /// Cycle a fixed pool of this many training pairs instead of drawing
    /// a fresh pair every step.
    #[arg(long)]
    dataset_pairs: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    enable_rffm: Option<bool>,
    #[arg(long)]
    enable_rdffm: Option<bool>,
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config: TrainConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.pairs_per_epoch {
        config.pairs_per_epoch = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.lr {
        config.adam.lr = v;
    }
    if let Some(v) = args.lambda {
        config.loss.lambda = v;
    }
    if let Some(v) = args.size {
        config.pair.extents = [v; 3];
    }
    if let Some(v) = args.max_displacement {
        config.pair.max_displacement = v;
    }
    if args.dataset_pairs.is_some() {
        config.dataset_pairs = args.dataset_pairs;
    }
    if let Some(v) = args.base_channels {
        config.model.base_channels = v;
    }
    if let Some(v) = args.levels {
        config.model.levels = v;
    }
    if let Some(v) = args.enable_rffm {
        config.model.enable_rffm = v;
    }
    if let Some(v) = args.enable_rdffm {
        config.model.enable_rdffm = v;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_train(args: &TrainArgs) -> Result<ExitCode> {
    let config = resolve_train_config(args)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    write_json(&args.out.join("config.json"), &config)?;

    let effective = config.loss.effective_window(config.pair.extents)?;
    if effective < config.loss.ncc_window {
        eprintln!(
            "note: ncc window shrunk from {} to {} to fit extents {:?}",
            config.loss.ncc_window, effective, config.pair.extents
        );
    }

    let outcome = match &args.resume {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            trainer::resume(&config, Some(&args.out), ckpt)?
        }
        None => trainer::train(&config, Some(&args.out))?,
    };
    for record in &outcome.log {
        println!("{}", record.to_line());
    }
    println!(
        "trained {} epochs; checkpoint at {}",
        outcome.epochs_done,
        args.out.join(CHECKPOINT_FILE).display()
    );
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------- register --

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// Directory for `field.vgrid` and `warped.vgrid`.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_register(args: &RegisterArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let fixed = vgrid::load_volume(&args.fixed)?;
    let moving = vgrid::load_volume(&args.moving)?;
    let (phi, _) = register(&ckpt.params, &ckpt.model, &fixed.to_tensor(), &moving.to_tensor())?;
    let field = field_from_batch(&phi)?;

    let [d, h, w] = moving.dims();
    let warped_data = kernels::warp_forward(moving.data(), [1, 1, d, h, w], field.data());
    let warped = Volume::new(moving.dims(), moving.spacing(), warped_data)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    vgrid::save_field(&args.out.join("field.vgrid"), &field, fixed.spacing())?;
    vgrid::save_volume(&args.out.join("warped.vgrid"), &warped)?;
    println!("registered {} -> {}", args.moving.display(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------- evaluate --

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory holding a `manifest.json` written by `synth`.
    #[arg(long)]
    data: PathBuf,
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let manifest: Manifest = read_json(&args.data.join(MANIFEST_FILE))?;

    // Check the whole dataset before touching any volume, so one message
    // lists everything that is missing.
    let mut absent = Vec::new();
    for entry in &manifest.entries {
        for name in [
            &entry.fixed,
            &entry.moving,
            &entry.fixed_labels,
            &entry.moving_labels,
        ] {
            let path = args.data.join(name);
            if !path.exists() {
                absent.push(path);
            }
        }
    }
    if !absent.is_empty() {
        let listing: Vec<String> = absent.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::config(format!(
            "dataset is missing {} file(s): {}",
            listing.len(),
            listing.join(", ")
        )));
    }

    let mut pairs = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        pairs.push(EvalPair {
            fixed: vgrid::load_volume(&args.data.join(&entry.fixed))?,
            moving: vgrid::load_volume(&args.data.join(&entry.moving))?,
            fixed_labels: vgrid::load_labels(&args.data.join(&entry.fixed_labels))?,
            moving_labels: vgrid::load_labels(&args.data.join(&entry.moving_labels))?,
        });
    }

    let summary = evaluate(&ckpt.params, &ckpt.model, &pairs)?;
    for (i, report) in summary.reports.iter().enumerate() {
        println!("pair={i}");
        print!("{}", report.to_kv());
    }
    for line in summary.aggregate_kv() {
        println!("{line}");
    }
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------ gradcheck --

#[derive(Args)]
struct GradcheckArgs {
    /// Extent for the full-network check; capped at 16 because central
    /// differences grow cubically with volume.
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
    /// Also run the deliberately broken reference op. The checker must
    /// flag it, so this always produces a failing exit.
    #[arg(long, default_value_t = false)]
    corrupt: bool,
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    if args.size > 16 {
        return Err(Error::config(format!(
            "--size {} exceeds the cap of 16; finite differences at larger \
             extents take hours",
            args.size
        )));
    }
    if args.size % 4 != 0 || args.size < 4 {
        return Err(Error::config(format!(
            "--size {} must be a positive multiple of 4 for the pyramid",
            args.size
        )));
    }

    let opts = GradCheckOptions {
        seed: args.seed,
        ..Default::default()
    };
    let mut all_ok = true;
    for (_, check) in op_checks() {
        let report = check(&opts)?;
        all_ok &= report.passed();
        println!("{report}");
    }

    let model = ModelConfig {
        base_channels: 2,
        ..Default::default()
    };
    let loss = crate::losses::LossConfig {
        ncc_window: 5,
        ..Default::default()
    };
    let net_opts = GradCheckOptions {
        eps: 1e-5,
        max_probes: 3,
        seed: args.seed,
        ..Default::default()
    };
    let report = full_network_check(args.size, &model, &loss, &net_opts, args.seed)?;
    all_ok &= report.passed();
    println!("{report}");

    if args.corrupt {
        let report = negative_control(&opts)?;
        println!("{report}");
        if report.passed() {
            eprintln!("error: the planted gradient fault went undetected; the checker is broken");
        }
        // Either the corrupted op fails (expected) or the checker missed
        // it (worse); both are failing outcomes for this invocation.
        all_ok = false;
    }

    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

// -------------------------------------------------------------- inspect --

#[derive(Args)]
struct InspectArgs {
    /// Grid file to describe.
    path: PathBuf,
}

fn cmd_inspect(args: &InspectArgs) -> Result<ExitCode> {
    let header = vgrid::inspect(&args.path)?;
    let extents = header
        .extents
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("x");
    println!(
        "{}: {:?} {extents}, spacing {} (version {}, {} elements)",
        args.path.display(),
        header.dtype,
        header.spacing,
        header.version,
        header.numel()
    );
    Ok(ExitCode::SUCCESS)
}

// -------------------------------------------------------------- helpers --

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound {
            path: path.to_path_buf(),
        },
        _ => Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Contract(format!("serialization failed: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

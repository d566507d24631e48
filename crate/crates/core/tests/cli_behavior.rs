//! Black-box tests of the `voxreg` binary: file layout, exit codes, and
//! the documented guarantees of each subcommand.

use std::path::Path;
use std::process::{Command, Output};

use voxreg::data::vgrid;

fn voxreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth_small(dir: &Path, pairs: usize, seed: u64) {
    let out = voxreg(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--pairs",
        &pairs.to_string(),
        "--size",
        "8",
        "--labels",
        "3",
        "--max-displacement",
        "1.5",
        "--seed",
        &seed.to_string(),
    ]);
    assert!(out.status.success(), "synth failed: {}", stderr(&out));
}

/// Train a throwaway model; returns the checkpoint path.
fn train_tiny(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let mut args = vec![
        "train",
        "--out",
        dir.to_str().unwrap(),
        "--size",
        "8",
        "--base-channels",
        "1",
        "--pairs-per-epoch",
        "1",
        "--max-displacement",
        "1.5",
    ];
    args.extend_from_slice(extra);
    let out = voxreg(&args);
    assert!(out.status.success(), "train failed: {}", stderr(&out));
    dir.join("checkpoint.vckpt")
}

#[test]
fn synth_writes_five_files_per_pair_plus_manifest() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), 2, 7);

    for i in 0..2 {
        for suffix in ["fixed", "moving", "fixed_labels", "moving_labels", "field"] {
            let path = dir.path().join(format!("pair_{i:04}_{suffix}.vgrid"));
            assert!(path.exists(), "missing {}", path.display());
        }
    }
    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("pair_0001_field.vgrid"));

    // The ground truth actually deforms: fixed and moving differ.
    let fixed = vgrid::load_volume(&dir.path().join("pair_0000_fixed.vgrid")).unwrap();
    let moving = vgrid::load_volume(&dir.path().join("pair_0000_moving.vgrid")).unwrap();
    assert_ne!(fixed.data(), moving.data());
}

#[test]
fn synth_is_reproducible_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth_small(a.path(), 2, 123);
    synth_small(b.path(), 2, 123);

    let mut names: Vec<String> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 21, "2 pairs x 5 grids x (binary + sidecar) + manifest");
    for name in names {
        let bytes_a = std::fs::read(a.path().join(&name)).unwrap();
        let bytes_b = std::fs::read(b.path().join(&name)).unwrap();
        assert_eq!(bytes_a, bytes_b, "{name} differs between identical runs");
    }
}

#[test]
fn synth_rejects_extents_that_break_the_pyramid() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxreg(&["synth", "--out", dir.path().to_str().unwrap(), "--size", "30"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("divisible by 4"));
}

#[test]
fn train_writes_resolved_config_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), &["--epochs", "1", "--seed", "5"]);

    let config = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
    assert!(config.contains("\"base_channels\": 1"), "echoed config: {config}");
    assert!(config.contains("\"seed\": 5"));
    let log = std::fs::read_to_string(dir.path().join("train_log.txt")).unwrap();
    assert!(log.starts_with("epoch=1 mean_loss="), "log: {log}");
    assert!(dir.path().join("checkpoint.vckpt").exists());
}

#[test]
fn train_without_config_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxreg(&[
        "train",
        "--config",
        "/nonexistent/train.json",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("not found"), "stderr: {}", stderr(&out));
}

#[test]
fn train_rejects_unknown_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("train.json");
    std::fs::write(&config_path, r#"{"epochs": 1, "momentum": 0.9}"#).unwrap();
    let out = voxreg(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("momentum"), "stderr: {}", stderr(&out));
}

#[test]
fn numeric_blowup_exits_three_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxreg(&[
        "train",
        "--out",
        dir.path().to_str().unwrap(),
        "--size",
        "8",
        "--base-channels",
        "1",
        "--epochs",
        "4",
        "--pairs-per-epoch",
        "1",
        "--max-displacement",
        "1.5",
        "--lr",
        "1e200",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("retained"));
    assert!(dir.path().join("checkpoint.vckpt").exists());
}

#[test]
fn register_at_initialization_reproduces_the_moving_volume() {
    let data = tempfile::tempdir().unwrap();
    let run = tempfile::tempdir().unwrap();
    let reg = tempfile::tempdir().unwrap();
    synth_small(data.path(), 1, 11);
    // Zero training epochs: the checkpoint holds the fresh initialization,
    // whose zero heads emit an identically-zero field.
    let ckpt = train_tiny(run.path(), &["--epochs", "0"]);

    let fixed = data.path().join("pair_0000_fixed.vgrid");
    let moving = data.path().join("pair_0000_moving.vgrid");
    let out = voxreg(&[
        "register",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--fixed",
        fixed.to_str().unwrap(),
        "--moving",
        moving.to_str().unwrap(),
        "--out",
        reg.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "register failed: {}", stderr(&out));

    let field = vgrid::load_field(&reg.path().join("field.vgrid")).unwrap();
    assert!(field.data().iter().all(|&v| v == 0.0), "field is not zero");
    let warped = vgrid::load_volume(&reg.path().join("warped.vgrid")).unwrap();
    let original = vgrid::load_volume(&moving).unwrap();
    assert_eq!(warped.data(), original.data(), "warp at identity changed values");
}

#[test]
fn registered_field_rewarps_to_the_saved_warped_volume() {
    use voxreg::tensor::kernels;

    let data = tempfile::tempdir().unwrap();
    let run = tempfile::tempdir().unwrap();
    let reg = tempfile::tempdir().unwrap();
    synth_small(data.path(), 1, 19);
    // One real epoch so the field is nonzero.
    let ckpt = train_tiny(run.path(), &["--epochs", "1", "--lr", "0.01"]);

    let out = voxreg(&[
        "register",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--fixed",
        data.path().join("pair_0000_fixed.vgrid").to_str().unwrap(),
        "--moving",
        data.path().join("pair_0000_moving.vgrid").to_str().unwrap(),
        "--out",
        reg.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "register failed: {}", stderr(&out));

    let field = vgrid::load_field(&reg.path().join("field.vgrid")).unwrap();
    let moving = vgrid::load_volume(&data.path().join("pair_0000_moving.vgrid")).unwrap();
    let warped = vgrid::load_volume(&reg.path().join("warped.vgrid")).unwrap();
    let [d, h, w] = moving.dims();
    let rewarped = kernels::warp_forward(moving.data(), [1, 1, d, h, w], field.data());
    assert_eq!(rewarped, warped.data(), "saved field does not reproduce the warp");
}

#[test]
fn register_with_a_missing_input_exits_two() {
    let run = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(run.path(), &["--epochs", "0"]);
    let out = voxreg(&[
        "register",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--fixed",
        "/nonexistent/fixed.vgrid",
        "--moving",
        "/nonexistent/moving.vgrid",
        "--out",
        run.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_prints_per_pair_and_aggregate_records() {
    let data = tempfile::tempdir().unwrap();
    let run = tempfile::tempdir().unwrap();
    synth_small(data.path(), 2, 31);
    let ckpt = train_tiny(run.path(), &["--epochs", "0"]);

    let out = voxreg(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "evaluate failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("pair=0\n"), "output: {text}");
    assert!(text.contains("pair=1\n"));
    assert!(text.contains("dsc_mean="));
    assert!(text.contains("hd95_label_1="));
    assert!(text.contains("sdlogj="));
    assert!(text.contains("aggregate_dsc_mean="));
    assert!(text.contains("pairs=2"));
}

#[test]
fn evaluate_lists_every_missing_file_and_exits_two() {
    let data = tempfile::tempdir().unwrap();
    let run = tempfile::tempdir().unwrap();
    synth_small(data.path(), 2, 37);
    let ckpt = train_tiny(run.path(), &["--epochs", "0"]);

    std::fs::remove_file(data.path().join("pair_0000_moving.vgrid")).unwrap();
    std::fs::remove_file(data.path().join("pair_0001_fixed_labels.vgrid")).unwrap();
    let out = voxreg(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("pair_0000_moving.vgrid"), "stderr: {err}");
    assert!(err.contains("pair_0001_fixed_labels.vgrid"), "stderr: {err}");
}

#[test]
fn gradcheck_passes_and_prints_one_line_per_op() {
    let out = voxreg(&["gradcheck", "--size", "8"]);
    assert!(out.status.success(), "gradcheck failed: {}", stderr(&out));
    let text = stdout(&out);
    for op in [
        "add:", "sub:", "mul:", "div:", "sqrt:", "leaky_relu:", "conv3d:", "conv3d_strided:",
        "maxpool3d:", "upsample2x:", "warp:", "concat_slice:", "spatial_diff:",
        "full_network_loss:",
    ] {
        assert!(text.contains(op), "no line for {op} in:\n{text}");
    }
    assert!(!text.contains("FAIL"), "output: {text}");
}

#[test]
fn gradcheck_refuses_oversized_volumes() {
    let out = voxreg(&["gradcheck", "--size", "32"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("cap of 16"));
}

#[test]
fn gradcheck_flags_the_planted_fault_with_a_nonzero_exit() {
    let out = voxreg(&["gradcheck", "--size", "8", "--corrupt"]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("negative_control"), "output: {text}");
    assert!(text.contains("FAIL"), "output: {text}");
}

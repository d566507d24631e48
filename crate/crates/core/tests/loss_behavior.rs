//! Loss semantics: oracle agreement, affine invariance, regularizer
//! analytics, and end-to-end differentiability through the warp.

mod common;

use common::{oracles, rand_tensor};
use voxreg::losses::{diffusion_reg, ncc_loss, total_loss, LossConfig, Normalization, NCC_VAR_EPS};
use voxreg::tensor::{grad_check, GradCheckOptions, Tape, TensorData};

fn ncc_value(i_f: &TensorData, i_w: &TensorData, cfg: &LossConfig) -> f64 {
    let mut t = Tape::new();
    let fv = t.constant(i_f.clone());
    let wv = t.constant(i_w.clone());
    let loss = ncc_loss(&mut t, fv, wv, cfg).unwrap();
    t.data(loss)[0]
}

#[test]
fn ncc_matches_window_oracle_on_three_instances() {
    let cfg = LossConfig {
        ncc_window: 5,
        ..Default::default()
    };
    for seed in [201u64, 202, 203] {
        let a = rand_tensor(&[1, 1, 12, 12, 12], 0.0, 1.0, seed);
        let b = rand_tensor(&[1, 1, 12, 12, 12], 0.0, 1.0, seed + 90);
        let got = ncc_value(&a, &b, &cfg);
        let want = oracles::ncc_loss(a.data(), b.data(), [1, 1, 12, 12, 12], 5, NCC_VAR_EPS, true);
        assert!(
            (got - want).abs() <= 1e-6,
            "seed {}: ncc {} vs oracle {}",
            seed,
            got,
            want
        );
    }
}

#[test]
fn ncc_sum_normalization_matches_oracle() {
    let cfg = LossConfig {
        ncc_window: 5,
        normalization: Normalization::Sum,
        ..Default::default()
    };
    let a = rand_tensor(&[1, 1, 10, 10, 10], 0.0, 1.0, 210);
    let b = rand_tensor(&[1, 1, 10, 10, 10], 0.0, 1.0, 211);
    let got = ncc_value(&a, &b, &cfg);
    let want = oracles::ncc_loss(a.data(), b.data(), [1, 1, 10, 10, 10], 5, NCC_VAR_EPS, false);
    // Sums run ~1e3 larger than means; scale the tolerance accordingly.
    assert!((got - want).abs() <= 1e-6 * 1000.0);
}

#[test]
fn ncc_is_affine_invariant() {
    let img = rand_tensor(&[1, 1, 16, 16, 16], 0.0, 1.0, 220);
    let scaled = TensorData::new(
        img.shape().to_vec(),
        img.data().iter().map(|&v| 1.7 * v + 0.3).collect(),
    )
    .unwrap();
    let cfg = LossConfig::default();
    let loss = ncc_value(&img, &scaled, &cfg);
    assert!(
        (loss + 1.0).abs() <= 1e-4,
        "affine pair should correlate perfectly, got {}",
        loss
    );
}

#[test]
fn ncc_is_symmetric_and_bounded() {
    let cfg = LossConfig {
        ncc_window: 5,
        ..Default::default()
    };
    for seed in [230u64, 231] {
        let a = rand_tensor(&[1, 1, 8, 8, 8], 0.0, 1.0, seed);
        let b = rand_tensor(&[1, 1, 8, 8, 8], 0.0, 1.0, seed + 7);
        let ab = ncc_value(&a, &b, &cfg);
        let ba = ncc_value(&b, &a, &cfg);
        assert!((ab - ba).abs() < 1e-12, "ncc must be symmetric");
        assert!((-1.0 - 1e-5..=1.0 + 1e-5).contains(&ab));
    }
}

#[test]
fn diffusion_matches_oracle_on_three_instances() {
    for (norm, seed) in [
        (Normalization::Mean, 240u64),
        (Normalization::Mean, 241),
        (Normalization::Sum, 242),
    ] {
        let cfg = LossConfig {
            normalization: norm,
            ..Default::default()
        };
        let f = rand_tensor(&[1, 3, 6, 7, 8], -2.0, 2.0, seed);
        let mut t = Tape::new();
        let fv = t.constant(f.clone());
        let reg = diffusion_reg(&mut t, fv, &cfg).unwrap();
        let want = oracles::diffusion(f.data(), [1, 3, 6, 7, 8], norm == Normalization::Mean);
        assert!((t.data(reg)[0] - want).abs() <= 1e-6);
    }
}

#[test]
fn diffusion_of_linear_ramp_is_slope_squared_per_term() {
    // Channel 0 rises by s per voxel along width; every other difference is
    // zero, so the raw sum is s^2 times the number of contributing terms.
    let (d, h, w) = (5usize, 5usize, 5usize);
    let s = 0.5f64;
    let mut vals = vec![0.0; 3 * d * h * w];
    for id in 0..d {
        for ih in 0..h {
            for iw in 0..w {
                vals[(id * h + ih) * w + iw] = s * iw as f64;
            }
        }
    }
    let cfg = LossConfig {
        normalization: Normalization::Sum,
        ..Default::default()
    };
    let mut t = Tape::new();
    let fv = t.constant(TensorData::new(vec![1, 3, d, h, w], vals).unwrap());
    let reg = diffusion_reg(&mut t, fv, &cfg).unwrap();
    let expected = s * s * (d * h * (w - 1)) as f64;
    assert!((t.data(reg)[0] - expected).abs() < 1e-9);
}

#[test]
fn total_loss_perfect_pair_with_zero_field() {
    let img = rand_tensor(&[1, 1, 12, 12, 12], 0.0, 1.0, 250);
    let cfg = LossConfig::default();
    let mut t = Tape::new();
    let f = t.constant(img.clone());
    let m = t.constant(img);
    let zero = t.constant(TensorData::zeros(&[1, 3, 12, 12, 12]));
    let loss = total_loss(&mut t, f, m, zero, &cfg).unwrap();
    assert!((t.data(loss)[0] + 1.0).abs() <= 1e-5);
}

#[test]
fn lambda_zero_reduces_to_ncc() {
    let a = rand_tensor(&[1, 1, 8, 8, 8], 0.0, 1.0, 260);
    let b = rand_tensor(&[1, 1, 8, 8, 8], 0.0, 1.0, 261);
    let field = rand_tensor(&[1, 3, 8, 8, 8], -0.4, 0.4, 262);
    let cfg = LossConfig {
        ncc_window: 5,
        lambda: 0.0,
        ..Default::default()
    };

    let mut t = Tape::new();
    let (fv, mv, pv) = (t.constant(a.clone()), t.constant(b.clone()), t.constant(field.clone()));
    let tot = total_loss(&mut t, fv, mv, pv, &cfg).unwrap();

    let mut t2 = Tape::new();
    let fv2 = t2.constant(a);
    let mv2 = t2.constant(b);
    let pv2 = t2.constant(field);
    let warped = t2.warp(mv2, pv2).unwrap();
    let sim = ncc_loss(&mut t2, fv2, warped, &cfg).unwrap();

    assert_eq!(t.data(tot)[0], t2.data(sim)[0]);
}

#[test]
fn ncc_gradient_wrt_image_passes_fd() {
    // 8^3 volume: the default window 9 auto-shrinks to 7 here, exercising
    // the shrink path under differentiation.
    let fixed = rand_tensor(&[1, 1, 8, 8, 8], 0.0, 1.0, 270);
    let moving = rand_tensor(&[1, 1, 8, 8, 8], 0.0, 1.0, 271);
    let cfg = LossConfig::default();
    let opts = GradCheckOptions {
        max_probes: 20,
        ..Default::default()
    };
    let report = grad_check("ncc_wrt_image", &[moving], &opts, move |t, v| {
        let f = t.constant(fixed.clone());
        ncc_loss(t, f, v[0], &cfg)
    })
    .unwrap();
    assert!(report.passed(), "{}", report);
}

#[test]
fn total_loss_gradient_wrt_field_passes_fd() {
    let fixed = rand_tensor(&[1, 1, 12, 12, 12], 0.0, 1.0, 280);
    let moving = rand_tensor(&[1, 1, 12, 12, 12], 0.0, 1.0, 281);
    // Keep sampled coordinates clear of integer kinks that central
    // differences would straddle.
    let field_vals: Vec<f64> = rand_tensor(&[1, 3, 12, 12, 12], 0.2, 0.8, 282)
        .data()
        .to_vec();
    let field = TensorData::new(vec![1, 3, 12, 12, 12], field_vals).unwrap();
    let cfg = LossConfig::default();
    let opts = GradCheckOptions {
        max_probes: 24,
        ..Default::default()
    };
    let report = grad_check("total_loss_wrt_field", &[field], &opts, move |t, v| {
        let f = t.constant(fixed.clone());
        let m = t.constant(moving.clone());
        total_loss(t, f, m, v[0], &cfg)
    })
    .unwrap();
    assert!(report.passed(), "{}", report);
}

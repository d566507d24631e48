//! Metric implementations against brute-force oracles and the documented
//! fixed-value cases.

mod common;

use common::oracles;
use voxreg::data::{make_pair, LabelMap, SyntheticPairSpec};
use voxreg::metrics::{
    dice, foreground_labels, hd95, jacobian_determinant, metric_report, sdlogj,
};
use voxreg::tensor::TensorData;

fn cube(dims: [usize; 3], lo: [usize; 3], side: usize) -> LabelMap {
    let [d, h, w] = dims;
    let mut data = vec![0u16; d * h * w];
    for z in lo[0]..lo[0] + side {
        for y in lo[1]..lo[1] + side {
            for x in lo[2]..lo[2] + side {
                data[(z * h + y) * w + x] = 1;
            }
        }
    }
    LabelMap::new(dims, data).unwrap()
}

#[test]
fn hd95_of_three_voxel_cube_shift_is_exactly_three() {
    let dims = [12, 12, 12];
    let a = cube(dims, [2, 2, 2], 4);
    let b = cube(dims, [5, 2, 2], 4);
    let got = hd95(&a, &b, 1, 1.0).unwrap();
    assert_eq!(got, 3.0);
    // The facing faces sit uniformly 3 voxels apart; the oracle agrees.
    let oracle = oracles::hd95(a.data(), b.data(), dims, 1, 1.0).unwrap();
    assert_eq!(got, oracle);
}

#[test]
fn hd95_matches_brute_force_on_phantom_labels() {
    for seed in [5u64, 6, 7] {
        let pair = make_pair(&SyntheticPairSpec {
            extents: [12, 12, 12],
            num_labels: 3,
            smoothness: 2,
            max_displacement: 2.0,
            seed,
        })
        .unwrap();
        for label in foreground_labels(&pair.fixed_labels) {
            let got = hd95(&pair.fixed_labels, &pair.moving_labels, label, 1.0);
            let want = oracles::hd95(
                pair.fixed_labels.data(),
                pair.moving_labels.data(),
                [12, 12, 12],
                label,
                1.0,
            );
            match (got, want) {
                (Ok(g), Some(o)) => {
                    assert!((g - o).abs() < 1e-9, "seed {seed} label {label}: {g} vs {o}")
                }
                (Err(_), None) => {}
                (g, o) => panic!("seed {seed} label {label}: implementation {g:?} oracle {o:?}"),
            }
        }
    }
}

#[test]
fn jacobian_matches_oracle_on_random_smooth_fields() {
    for seed in [21u64, 22, 23] {
        let pair = make_pair(&SyntheticPairSpec {
            extents: [8, 12, 8],
            num_labels: 2,
            smoothness: 2,
            max_displacement: 1.5,
            seed,
        })
        .unwrap();
        let det = jacobian_determinant(&pair.field_gt).unwrap();
        let want = oracles::jacobian_determinant(pair.field_gt.data(), [8, 12, 8]);
        let worst = det
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-12, "seed {seed}: max dev {worst}");
        assert_eq!(det.shape(), &[8, 12, 8]);
    }
}

#[test]
fn sdlogj_matches_straight_loop_statistics() {
    let pair = make_pair(&SyntheticPairSpec {
        extents: [12, 8, 8],
        num_labels: 2,
        smoothness: 2,
        max_displacement: 2.0,
        seed: 31,
    })
    .unwrap();
    let (got_sd, got_neg) = sdlogj(&pair.field_gt).unwrap();

    let det = oracles::jacobian_determinant(pair.field_gt.data(), [12, 8, 8]);
    let mut logs = Vec::new();
    let mut folded = 0usize;
    for z in 1..11 {
        for y in 1..7 {
            for x in 1..7 {
                let v = det[(z * 8 + y) * 8 + x];
                if v <= 0.0 {
                    folded += 1;
                }
                logs.push(v.max(1e-9).ln());
            }
        }
    }
    let n = logs.len() as f64;
    let mean: f64 = logs.iter().sum::<f64>() / n;
    let want_sd = (logs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    assert!((got_sd - want_sd).abs() < 1e-12, "{got_sd} vs {want_sd}");
    assert_eq!(got_neg, folded as f64 / n);
}

#[test]
fn dice_matches_counting_oracle_on_phantom_labels() {
    let pair = make_pair(&SyntheticPairSpec {
        extents: [16, 16, 16],
        num_labels: 4,
        smoothness: 2,
        max_displacement: 2.5,
        seed: 41,
    })
    .unwrap();
    let labels = foreground_labels(&pair.fixed_labels);
    let got = dice(&pair.fixed_labels, &pair.moving_labels, &labels).unwrap();
    for &label in &labels {
        let (mut na, mut nb, mut ni) = (0usize, 0usize, 0usize);
        for (&va, &vb) in pair
            .fixed_labels
            .data()
            .iter()
            .zip(pair.moving_labels.data())
        {
            na += usize::from(va == label);
            nb += usize::from(vb == label);
            ni += usize::from(va == label && vb == label);
        }
        let want = 2.0 * ni as f64 / (na + nb) as f64;
        assert_eq!(got[&label], want, "label {label}");
        assert!(got[&label] < 1.0, "2.5-voxel warp must not leave dice at 1");
    }
}

#[test]
fn report_covers_all_labels_and_stays_in_range() {
    let pair = make_pair(&SyntheticPairSpec {
        extents: [16, 16, 16],
        num_labels: 3,
        smoothness: 2,
        max_displacement: 2.0,
        seed: 51,
    })
    .unwrap();
    let labels = foreground_labels(&pair.fixed_labels);
    let report = metric_report(
        &pair.fixed_labels,
        &pair.moving_labels,
        &pair.field_gt,
        &labels,
        1.0,
    )
    .unwrap();
    assert_eq!(report.dsc_per_label.len(), 3);
    assert_eq!(report.hd95_per_label.len(), 3);
    assert!(report.dsc_per_label.values().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(report.hd95_per_label.values().all(|&v| v >= 0.0));
    assert!((0.0..=1.0).contains(&report.neg_jacobian_fraction));
    let text = report.to_kv();
    assert!(text.contains("dsc_mean="));
    assert!(text.contains("dsc_label_3="));
    assert!(text.contains("hd95_label_1="));
    assert!(text.contains("sdlogj="));
}

#[test]
fn jacobian_rejects_malformed_fields() {
    let not_a_field = TensorData::zeros(&[2, 4, 4, 4]);
    assert!(jacobian_determinant(&not_a_field).is_err());
}

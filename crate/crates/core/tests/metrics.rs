mod common;

use proptest::prelude::*;

use common::mann_whitney;
use triplanar::metrics::{aggregate, auc, dsc, evaluate, iou, roc_curve, sensitivity, MetricReport, RocPoint};
use triplanar::volume::{Volume, VolumeKind};

fn binary(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(prop_oneof![Just(0.0f32), Just(1.0f32)], n)
}

/// A probability vector and a ground truth with both classes present.
/// Scores sit on a 1/20 grid, coarse enough that distinct scores never share
/// a threshold bin (also after the transforms below), so thresholded and
/// rank-based AUC coincide up to the bin width.
fn scored_case() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (2usize..80).prop_flat_map(|n| {
        (prop::collection::vec((0u8..=20).prop_map(|k| k as f32 / 20.0), n), binary(n)).prop_map(|(p, mut t)| {
            t[0] = 1.0;
            t[1] = 0.0;
            (p, t)
        })
    })
}

proptest! {
    #[test]
    fn overlap_metrics_are_bounded_and_related((p, g) in (1usize..60).prop_flat_map(|n| (binary(n), binary(n)))) {
        let d = dsc(&p, &g).unwrap();
        let j = iou(&p, &g).unwrap();
        let s = sensitivity(&p, &g).unwrap();
        for v in [d, j, s] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(j <= d);
        prop_assert!((j - d / (2.0 - d)).abs() <= 1e-9);
        prop_assert_eq!(d, dsc(&g, &p).unwrap());
    }

    #[test]
    fn dense_auc_matches_rank_statistic((p, t) in scored_case()) {
        let n = 1001;
        let a = auc(&roc_curve(&p, &t, n).unwrap()).unwrap();
        prop_assert!((a - mann_whitney(&p, &t)).abs() <= 1.0 / n as f64 + 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_transform((p, t) in scored_case()) {
        let n = 2001;
        let base = auc(&roc_curve(&p, &t, n).unwrap()).unwrap();
        for f in [|v: f32| v * v, |v: f32| v.sqrt(), |v: f32| 0.25 + 0.5 * v] {
            let q: Vec<f32> = p.iter().map(|&v| f(v)).collect();
            let other = auc(&roc_curve(&q, &t, n).unwrap()).unwrap();
            prop_assert!((base - other).abs() <= 2.0 / n as f64, "{} vs {}", base, other);
        }
    }

    #[test]
    fn roc_curve_is_monotone_and_anchored((p, t) in scored_case(), n in 2usize..200) {
        let roc = roc_curve(&p, &t, n).unwrap();
        prop_assert_eq!(roc[0], RocPoint { fpr: 0.0, tpr: 0.0 });
        prop_assert_eq!(*roc.last().unwrap(), RocPoint { fpr: 1.0, tpr: 1.0 });
        for w in roc.windows(2) {
            prop_assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
        }
    }
}

#[test]
fn roc_rejects_single_class_truth() {
    assert!(roc_curve(&[0.1, 0.9], &[1.0, 1.0], 11).is_err());
    assert!(roc_curve(&[0.1, 0.9], &[0.0, 0.0], 11).is_err());
    assert!(roc_curve(&[0.1, 0.9], &[0.0, 1.0], 1).is_err());
}

#[test]
fn metrics_reject_non_binary_or_mismatched_input() {
    assert!(dsc(&[0.5], &[1.0]).is_err());
    assert!(dsc(&[1.0], &[1.0, 0.0]).is_err());
}

#[test]
fn evaluate_and_aggregate() {
    let truth = Volume::new([1, 2, 4], VolumeKind::BinaryMask, vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
    let prob = Volume::new(
        [1, 2, 4],
        VolumeKind::Probability,
        vec![0.9, 0.4, 0.6, 0.1, 0.8, 0.2, 0.3, 0.0],
    )
    .unwrap();
    let r = evaluate(&prob, &truth, 0.5, 101).unwrap();
    // Thresholded: [1,0,1,0,1,0,0,0] against [1,1,0,0,1,0,0,0].
    assert_eq!(r.dsc, 4.0 / 6.0);
    assert_eq!(r.sensitivity, 2.0 / 3.0);
    assert_eq!(r.iou, 0.5);
    assert!((r.auc - mann_whitney(prob.data(), truth.data())).abs() <= 2.0 / 101.0);

    let low = evaluate(&prob, &truth, 0.3, 101).unwrap();
    assert_eq!(low.auc, r.auc);
    assert_eq!(low.roc, r.roc);

    let reports: Vec<MetricReport> = vec![r.clone(), low.clone()];
    let row = aggregate("U-Net", &reports).unwrap();
    assert_eq!(row.n_volumes, 2);
    assert_eq!(row.dsc, (r.dsc + low.dsc) / 2.0);
    assert!(aggregate("empty", &[]).unwrap_err().is_precondition());
}

use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_scene, make_pair, PairConfig, SceneConfig};
use crate::registration::{Correspondence, CorrespondenceSet};

fn corrs(pairs: &[(usize, usize)]) -> CorrespondenceSet {
    CorrespondenceSet {
        pairs: pairs
            .iter()
            .map(|&(src, dst)| Correspondence {
                src,
                dst,
                distance: 0.0,
                mutual: false,
            })
            .collect(),
    }
}

#[test]
fn perfect_matcher_has_ratio_one() {
    let gt = RigidTransform::from_axis_angle([1.0, 2.0, 0.5], 33.0, [0.2, -0.1, 0.4]);
    let src: Vec<[f64; 3]> = (0..50).map(|i| [i as f64 * 0.1, (i % 7) as f64, 0.3]).collect();
    let dst = gt.apply_all(&src);
    let m = corrs(&(0..50).map(|i| (i, i)).collect::<Vec<_>>());
    let anchors: Vec<usize> = (0..50).step_by(3).collect();
    assert_eq!(inlier_ratio(&anchors, &m, &gt, 0.1, &src, &dst).unwrap(), 1.0);
}

#[test]
fn zero_threshold_counts_exact_coincidences() {
    let gt = RigidTransform::identity();
    let src = vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
    let mut dst = src.clone();
    dst[1][0] += 1e-9;
    let m = corrs(&[(0, 0), (1, 1), (2, 3)]);
    let r = inlier_ratio(&[0, 1, 2, 3], &m, &gt, 0.0, &src, &dst).unwrap();
    assert_eq!(r, 0.25);
    assert!(matches!(
        inlier_ratio(&[], &m, &gt, 0.1, &src, &dst),
        Err(Error::Contract(_))
    ));
}

#[test]
fn random_matches_have_low_inlier_ratio() {
    let scene = generate_scene(&SceneConfig::default()).unwrap();
    let pair = make_pair(&scene, &PairConfig::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (ns, nd) = (pair.src.len(), pair.dst.len());
    let mut total = 0.0;
    for _ in 0..10 {
        let anchors: Vec<usize> = (0..500).map(|_| rng.random_range(0..ns)).collect();
        let m = corrs(
            &anchors
                .iter()
                .map(|&a| (a, rng.random_range(0..nd)))
                .collect::<Vec<_>>(),
        );
        total += inlier_ratio(&anchors, &m, &pair.gt, 0.1, &pair.src.points, &pair.dst.points).unwrap();
    }
    assert!(total / 10.0 < 0.05, "{}", total / 10.0);
}

#[test]
fn recall_threshold_is_strict() {
    assert_eq!(feature_match_recall(&[0.04, 0.06], 0.05).unwrap(), 0.5);
    assert_eq!(feature_match_recall(&[0.05], 0.05).unwrap(), 0.0);
    for t in [0.0, 0.3, 0.99] {
        assert_eq!(feature_match_recall(&[1.0; 4], t).unwrap(), 1.0);
    }
    assert!(feature_match_recall(&[], 0.05).is_err());
}

#[test]
fn transform_error_examples() {
    let gt = RigidTransform::from_axis_angle([0.3, 1.0, 0.2], 50.0, [1.0, 2.0, 3.0]);
    assert_eq!(transform_errors(&gt, &gt), (0.0, 0.0));
    let est = gt.compose(&RigidTransform::from_axis_angle([0.0, 0.0, 1.0], 10.0, [0.0; 3]));
    let (rte, rre) = transform_errors(&est, &gt);
    assert!(rte < 1e-12);
    assert!((rre - 10.0).abs() < 1e-9);
    let shifted = RigidTransform::from_translation([0.3, 0.0, 0.0]).compose(&gt);
    let (rte, rre) = transform_errors(&shifted, &gt);
    assert!((rte - 0.3).abs() < 1e-12 && rre < 1e-9);
}

fn result(rte: f64, rre: f64) -> PairResult {
    PairResult {
        id: String::new(),
        scene: String::new(),
        inlier_ratio: 0.0,
        matched: false,
        rte_m: rte,
        rre_deg: rre,
        success: false,
    }
}

#[test]
fn success_rate_hand_count() {
    let list = [
        result(0.0, 0.0),
        result(1.9, 4.9),
        result(2.0, 5.0),
        result(2.1, 1.0),
        result(0.5, 5.1),
    ];
    // Hand count: the first three lie within both inclusive limits.
    assert_eq!(success_rate(&list, 2.0, 5.0).unwrap(), 0.6);
    assert_eq!(success_rate(&list, 0.0, 0.0).unwrap(), 0.2);
    assert_eq!(success_rate(&list[..1], 2.0, 5.0).unwrap(), 1.0);
}

#[test]
fn pair_result_flags_follow_thresholds() {
    let gt = RigidTransform::identity();
    let th = Thresholds::default();
    let p = PairResult::new("a", "s", 0.05, &gt, &gt, &th);
    assert!(!p.matched && p.success);
    let q = PairResult::new(
        "b",
        "s",
        0.0501,
        &RigidTransform::from_translation([3.0, 0.0, 0.0]),
        &gt,
        &th,
    );
    assert!(q.matched && !q.success);
}

#[test]
fn scene_std_and_report() {
    let scenes: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
    // Scene a recalls 1.0, scene b recalls 0.5.
    let std = fmr_scene_std(&scenes, &[0.5, 0.9, 0.01, 0.2], 0.05).unwrap();
    assert!((std - 0.25).abs() < 1e-15);
    let gt = RigidTransform::identity();
    let th = Thresholds::default();
    let pairs: Vec<PairResult> = [0.5, 0.9, 0.01, 0.2]
        .iter()
        .zip(&scenes)
        .enumerate()
        .map(|(i, (&r, s))| PairResult::new(format!("p{i}"), s.clone(), r, &gt, &gt, &th))
        .collect();
    let residuals = vec![vec![0.05, 0.3]; 4];
    let rep = EvalReport::build(pairs, &residuals, th).unwrap();
    assert_eq!(rep.aggregates.fmr, 0.75);
    assert_eq!(rep.aggregates.success_rate, 1.0);
    assert_eq!(rep.fmr_vs_tau2.len(), 21);
    assert_eq!(rep.fmr_vs_tau1[3], (0.04, 0.0));
    assert_eq!(rep.fmr_vs_tau1[4], (0.05, 1.0));
    let back: EvalReport = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
    assert_eq!(back, rep);
    let csv = curve_csv("tau2", &rep.fmr_vs_tau2);
    assert!(csv.starts_with("tau2,fmr\n0,1\n"));
}

#[test]
fn threshold_violations_are_listed() {
    let mut errs = Vec::new();
    Thresholds {
        tau1: -1.0,
        tau2: 1.5,
        rte_max: f64::NAN,
        rre_max: 1.0,
    }
    .collect_violations(&mut errs);
    assert_eq!(errs.len(), 3);
}

proptest! {
    #[test]
    fn recall_is_non_increasing(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ratios: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..0.3)).collect();
        let curve = fmr_curve_tau2(&ratios, &tau2_grid()).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn ratio_is_non_decreasing_in_distance(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<[f64; 3]> = (0..40).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
        let dst: Vec<[f64; 3]> = (0..40).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
        let idx: Vec<usize> = (0..40).collect();
        let m = corrs(&(0..40).map(|i| (i, *idx.choose(&mut rng).unwrap())).collect::<Vec<_>>());
        let gt = RigidTransform::identity();
        let mut prev = 0.0;
        for t in tau1_grid().into_iter().chain([0.5, 1.0, 2.0]) {
            let r = inlier_ratio(&idx, &m, &gt, t, &src, &dst).unwrap();
            prop_assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn rotation_error_is_symmetric_and_bounded(
        a in prop::array::uniform3(-1.0f64..1.0), b in prop::array::uniform3(-1.0f64..1.0),
        da in 0.0f64..360.0, db in 0.0f64..360.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let x = RigidTransform::from_axis_angle(a, da, [0.0; 3]);
        let y = RigidTransform::from_axis_angle(b, db, [1.0, 0.0, 0.0]);
        let (_, r1) = transform_errors(&x, &y);
        let (_, r2) = transform_errors(&y, &x);
        prop_assert!((r1 - r2).abs() < 1e-9);
        prop_assert!((0.0..=180.0).contains(&r1));
    }
}

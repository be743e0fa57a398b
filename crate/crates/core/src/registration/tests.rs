use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_points(n: usize, seed: u64, extent: f64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-extent..extent)))
        .collect()
}

fn random_transform(seed: u64) -> RigidTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
    RigidTransform::from_axis_angle(axis, rng.random_range(-180.0..180.0), t)
}

fn max_diff(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).abs()))
        .fold(0.0, f64::max)
}

fn rte_rre(est: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    let rte = (0..3)
        .map(|k| (est.translation[k] - gt.translation[k]).powi(2))
        .sum::<f64>()
        .sqrt();
    let rel = gt.inverse().compose(est);
    (rte, rel.angle_deg())
}

#[test]
fn identity_leaves_points_unchanged() {
    let p = random_points(20, 1, 5.0);
    assert_eq!(RigidTransform::identity().apply_all(&p), p);
}

#[test]
fn inverse_round_trip() {
    let t = random_transform(2);
    let p = random_points(50, 3, 5.0);
    let back = t.inverse().apply_all(&t.apply_all(&p));
    assert!(max_diff(&back, &p) < 1e-12);
}

#[test]
fn composition_matches_homogeneous_product() {
    let (a, b) = (random_transform(4), random_transform(5));
    let m = a.homogeneous() * b.homogeneous();
    let c = a.compose(&b).homogeneous();
    assert!((m - c).abs().max() < 1e-12);
    for p in random_points(10, 6, 2.0) {
        let h = m * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
        let q = a.apply(b.apply(p));
        assert!((0..3).all(|k| (h[k] - q[k]).abs() < 1e-12));
    }
}

#[test]
fn new_rejects_non_rotations() {
    let mut r = RigidTransform::identity().rotation;
    r[2][2] = -1.0;
    assert!(RigidTransform::new(r, [0.0; 3]).is_err());
    assert!(RigidTransform::new(RigidTransform::identity().rotation, [0.0; 3]).is_ok());
}

#[test]
fn kabsch_identity() {
    let p = random_points(10, 7, 1.0);
    let t = kabsch(&p, &p, None).unwrap();
    assert!((t.matrix() - Matrix3::identity()).abs().max() < 1e-12);
    assert!(t.translation.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn kabsch_recovers_quarter_turn_and_shift() {
    let src = random_points(8, 8, 1.0);
    let dst: Vec<[f64; 3]> = src
        .iter()
        .map(|p| [-p[1] + 1.0, p[0] + 2.0, p[2] + 3.0])
        .collect();
    let t = kabsch(&src, &dst, None).unwrap();
    let want = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert!((t.rotation[i][j] - want[i][j]).abs() < 1e-9);
        }
        assert!((t.translation[i] - [1.0, 2.0, 3.0][i]).abs() < 1e-9);
    }
}

#[test]
fn kabsch_noiseless_random_motion() {
    for seed in 0..20 {
        let gt = random_transform(100 + seed);
        let src = random_points(10, 200 + seed, 2.0);
        let dst = gt.apply_all(&src);
        let t = kabsch(&src, &dst, None).unwrap();
        assert!(max_diff(&t.apply_all(&src), &dst) < 1e-9);
    }
}

#[test]
fn kabsch_rejects_collinear_points() {
    let src: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 2.0 * i as f64, 0.5]).collect();
    assert!(matches!(kabsch(&src, &src, None), Err(Error::Degenerate(_))));
    assert!(matches!(
        kabsch(&src[..2], &src[..2], None),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn kabsch_weights_ignore_zero_weight_outliers() {
    let gt = random_transform(9);
    let src = random_points(12, 10, 2.0);
    let mut dst = gt.apply_all(&src);
    dst[0] = [50.0, 50.0, 50.0];
    let mut w = vec![1.0; 12];
    w[0] = 0.0;
    let t = kabsch(&src, &dst, Some(&w)).unwrap();
    assert!(max_diff(&t.apply_all(&src[1..]), &dst[1..]) < 1e-9);
}

#[test]
fn self_match_is_identity() {
    let a = DenseTensor::uniform(&[30, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(11));
    let m = match_descriptors(&a, &a, true).unwrap();
    assert_eq!(m.len(), 30);
    for (i, c) in m.pairs.iter().enumerate() {
        assert_eq!((c.src, c.dst, c.distance), (i, i, 0.0));
        assert!(c.mutual);
    }
}

#[test]
fn orthogonal_descriptors_recover_permutation() {
    let a = DenseTensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let b = DenseTensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let m = match_descriptors(&a, &b, false).unwrap();
    assert_eq!((m.pairs[0].dst, m.pairs[1].dst), (1, 0));
}

#[test]
fn width_mismatch_is_rejected() {
    let a = DenseTensor::zeros(&[3, 4]);
    let b = DenseTensor::zeros(&[3, 5]);
    assert!(matches!(
        match_descriptors(&a, &b, false),
        Err(Error::Dimension { .. })
    ));
}

fn brute_nearest(b: &DenseTensor, q: &[f64]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for j in 0..b.rows() {
        let d: f64 = b.row(j).iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

#[test]
fn kd_tree_equals_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = DenseTensor::uniform(&[200, 32], -1.0, 1.0, &mut rng);
    let b = DenseTensor::uniform(&[200, 32], -1.0, 1.0, &mut rng);
    let m = match_descriptors(&a, &b, false).unwrap();
    for c in &m.pairs {
        let (j, d) = brute_nearest(&b, a.row(c.src));
        assert_eq!(c.dst, j);
        assert_eq!(c.distance, d.sqrt());
    }
}

#[test]
fn kd_tree_breaks_ties_by_lower_index() {
    // Lattice points with many equidistant neighbours and duplicates.
    let pts: Vec<[f64; 3]> = (0..300)
        .map(|i| [(i % 5) as f64, ((i / 5) % 6) as f64, (i % 3) as f64])
        .collect();
    let tree = KdTree::from_points(&pts);
    let flat = DenseTensor::from_rows(&pts.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap();
    for q in random_points(100, 13, 6.0).into_iter().chain(pts.iter().copied()) {
        let q = q.map(|v| (2.0 * v).round() / 2.0);
        assert_eq!(tree.nearest(&q).unwrap(), brute_nearest(&flat, &q));
    }
}

fn synthetic_corrs(n: usize, outlier_frac: f64, seed: u64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>, RigidTransform) {
    let gt = random_transform(seed ^ 0xabc);
    let src = random_points(n, seed, 2.0);
    let mut dst = gt.apply_all(&src);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let n_out = (n as f64 * outlier_frac) as usize;
    for d in dst.iter_mut().take(n_out) {
        *d = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
    }
    (src, dst, gt)
}

#[test]
fn ransac_exact_on_clean_correspondences() {
    let (src, dst, gt) = synthetic_corrs(60, 0.0, 14);
    let corrs = CorrespondenceSet::from_indices(&(0..60).map(|i| (i, i)).collect::<Vec<_>>());
    let res = ransac_register(&corrs, &src, &dst, &RansacParams::default()).unwrap();
    assert!(res.success);
    let (rte, rre) = rte_rre(&res.transform, &gt);
    assert!(rte < 1e-6 && rre < 1e-6, "{rte} {rre}");
    assert_eq!(res.inliers.len(), 60);
}

#[test]
fn ransac_with_half_outliers_over_seeds() {
    let mut ok = 0;
    for seed in 0..100 {
        let (src, dst, gt) = synthetic_corrs(100, 0.5, 1000 + seed);
        let corrs = CorrespondenceSet::from_indices(&(0..100).map(|i| (i, i)).collect::<Vec<_>>());
        let params = RansacParams {
            seed,
            ..RansacParams::default()
        };
        let res = ransac_register(&corrs, &src, &dst, &params).unwrap();
        let (rte, rre) = rte_rre(&res.transform, &gt);
        if res.success && rte < 1e-6 && rre < 1e-6 {
            ok += 1;
        }
    }
    assert!(ok >= 99, "{ok}/100");
}

#[test]
fn ransac_with_too_few_correspondences_fails_cleanly() {
    let (src, dst, _) = synthetic_corrs(10, 0.0, 15);
    let corrs = CorrespondenceSet::from_indices(&[(0, 0), (1, 1)]);
    let res = ransac_register(&corrs, &src, &dst, &RansacParams::default()).unwrap();
    assert!(!res.success);
    assert_eq!(res.to_json()["success"], false);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kabsch_output_is_a_rotation(seed in 0u64..100_000, noise in 0.0f64..0.5) {
        let src = random_points(6, seed, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let dst: Vec<[f64; 3]> = random_transform(seed).apply_all(&src)
            .into_iter()
            .map(|p| p.map(|v| v + noise * rng.random_range(-1.0..1.0)))
            .collect();
        if let Ok(t) = kabsch(&src, &dst, None) {
            let r = t.matrix();
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ransac_ignores_correspondence_order(seed in 0u64..10_000) {
        let (src, dst, _) = synthetic_corrs(40, 0.4, seed);
        let mut idx: Vec<(usize, usize)> = (0..40).map(|i| (i, i)).collect();
        let params = RansacParams { iterations: 200, seed, ..RansacParams::default() };
        let a = ransac_register(&CorrespondenceSet::from_indices(&idx), &src, &dst, &params).unwrap();
        idx.reverse();
        idx.swap(3, 17);
        let b = ransac_register(&CorrespondenceSet::from_indices(&idx), &src, &dst, &params).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kabsch_recovers_any_rigid_motion(seed in 0u64..10_000, n in 4usize..40) {
        let src = random_points(n, seed, 2.0);
        let gt = random_transform(seed + 1);
        let est = kabsch(&src, &gt.apply_all(&src), None).unwrap();
        let (rte, rre) = rte_rre(&est, &gt);
        prop_assert!(rte < 1e-9 && rre < 1e-6, "rte {rte} rre {rre}");
    }

    #[test]
    fn compose_with_inverse_is_identity(seed in 0u64..10_000) {
        let t = random_transform(seed);
        let pts = random_points(10, seed, 5.0);
        prop_assert!(max_diff(&t.compose(&t.inverse()).apply_all(&pts), &pts) < 1e-12);
        prop_assert!(max_diff(&t.inverse().apply_all(&t.apply_all(&pts)), &pts) < 1e-12);
    }

    #[test]
    fn kd_tree_nearest_matches_scan(seed in 0u64..10_000, n in 1usize..200) {
        let pts = random_points(n, seed, 1.0);
        let tree = KdTree::from_points(&pts);
        for q in random_points(20, seed + 7, 1.5) {
            let (i, d2) = tree.nearest(&q).unwrap();
            let best = pts
                .iter()
                .map(|p| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            prop_assert_eq!(d2, best);
            let di: f64 = (0..3).map(|k| (pts[i][k] - q[k]).powi(2)).sum();
            prop_assert_eq!(di, best);
        }
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::finite_diff_check_params;
use crate::data::{generate_scene, make_pair, PairConfig, SceneConfig, TextureMode};
use crate::image::ImageEncoderConfig;

fn micro_config(with_fusion: bool) -> NetworkConfig {
    NetworkConfig {
        encoder_channels: [3, 4, 5, 6],
        decoder_channels: [5, 4, 3, 4],
        descriptor_dim: 8,
        voxel_size: 0.1,
        kernel_extent: 3,
        normalize_output: true,
        with_fusion,
        fusion_mode: FusionMode::Add,
        fusion: FusionConfig::new(3),
        image_encoder: ImageEncoderConfig {
            block_channels: [3, 4, 4],
            feature_dim: 5,
        },
    }
}

fn random_cloud(n: usize, seed: u64, extent: f64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..extent)))
        .collect()
}

fn random_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Hand count: 27-tap kernels on every 3×3×3 layer, one gain and one bias
/// per normalized output channel, plain bias on the 1×1×1 head.
fn hand_param_count(cfg: &NetworkConfig) -> usize {
    let [c1, c2, c3, c4] = cfg.encoder_channels;
    let [d4, d3, d2, d1] = cfg.decoder_channels;
    let d = cfg.descriptor_dim;
    let concat = cfg.with_fusion && cfg.fusion_mode == FusionMode::Concat;
    let bottleneck = if concat { 2 * c4 } else { c4 };
    let convs = 27 * (c1 + c1 * c2 + c2 * c3 + c3 * c4)
        + 27 * (bottleneck * d4 + (d4 + c3) * d3 + (d3 + c2) * d2 + (d2 + c1) * d1);
    let norms = 2 * (c1 + c2 + c3 + c4 + d4 + d3 + d2 + d1);
    let head = d1 * d + d;
    let mut total = convs + norms + head;
    if cfg.with_fusion {
        let [i1, i2, i3] = cfg.image_encoder.block_channels;
        let ci = cfg.image_encoder.feature_dim;
        total += 9 * 3 * i1 + i1 + 9 * i1 * i2 + i2 + 9 * i2 * i3 + i3 + i3 * ci + ci;
        let ct = cfg.fusion.c_t;
        // q from points, k and v from image, output back to C4
        let block = (c4 * ct + ct) + 2 * (ci * ct + ct) + (ct * c4 + c4);
        let sa = 3 * (c4 * ct + ct) + (ct * c4 + c4);
        total += block + cfg.fusion.self_attention_layers * sa;
    }
    total
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = Model::build(micro_config(true), 7).unwrap();
    let b = Model::build(micro_config(true), 7).unwrap();
    for ((_, p), (_, q)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.value.data(), q.value.data());
    }
    let c = Model::build(micro_config(true), 8).unwrap();
    assert_ne!(
        a.params.get(ParamIdx(0)).value.data(),
        c.params.get(ParamIdx(0)).value.data()
    );
}

use crate::autodiff::ParamId as ParamIdx;

#[test]
fn structure_only_model_has_no_fusion_parameters() {
    let m = Model::build(micro_config(false), 1).unwrap();
    assert!(m
        .params
        .iter()
        .all(|(_, p)| !p.name.starts_with("fusion") && !p.name.starts_with("image")));
}

#[test]
fn parameter_count_matches_hand_formula() {
    let mut cfgs = vec![micro_config(true), micro_config(false), NetworkConfig::default()];
    let mut concat = micro_config(true);
    concat.fusion_mode = FusionMode::Concat;
    cfgs.push(concat);
    let mut sa = micro_config(true);
    sa.fusion.self_attention_layers = 2;
    cfgs.push(sa);
    for cfg in cfgs {
        let m = Model::build(cfg.clone(), 0).unwrap();
        assert_eq!(m.params.scalar_count(), hand_param_count(&cfg), "{cfg:?}");
        assert_eq!(Model::expected_param_count(&cfg), hand_param_count(&cfg));
    }
}

#[test]
fn invalid_config_lists_every_violation() {
    let mut cfg = micro_config(true);
    cfg.descriptor_dim = 0;
    cfg.voxel_size = -1.0;
    cfg.fusion.c_t = 0;
    match Model::build(cfg, 0) {
        Err(Error::Config(v)) => assert_eq!(v.len(), 3, "{v:?}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn descriptors_are_unit_rows_at_stride_one() {
    let model = Model::build(micro_config(true), 2).unwrap();
    let pts = random_cloud(300, 3, 1.0);
    let img = random_image(16, 16, 4);
    let field = model.extract(&pts, Some(&img)).unwrap();
    let voxels = crate::sparse::voxelize(&pts, None, 0.1).unwrap();
    assert_eq!(field.len(), voxels.len());
    assert_eq!(field.dim(), 8);
    for r in 0..field.len() {
        let n: f64 = field.descriptors.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9, "row {r} norm {n}");
    }
    let again = model.extract(&pts, Some(&img)).unwrap();
    assert_eq!(field.descriptors.data(), again.descriptors.data());
    assert_eq!(field.point_map.iter().map(Vec::len).sum::<usize>(), 300);
}

#[test]
fn single_voxel_cloud_gives_one_descriptor() {
    let model = Model::build(micro_config(true), 2).unwrap();
    let field = model
        .extract(
            &[[0.01, 0.02, 0.03], [0.05, 0.05, 0.05]],
            Some(&random_image(8, 8, 1)),
        )
        .unwrap();
    assert_eq!(field.len(), 1);
}

#[test]
fn input_contracts() {
    let model = Model::build(micro_config(true), 2).unwrap();
    assert!(matches!(
        model.extract(&[], Some(&random_image(8, 8, 1))),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        model.extract(&random_cloud(10, 1, 1.0), None),
        Err(Error::Contract(_))
    ));
}

#[test]
fn rigid_motion_changes_descriptors() {
    let model = Model::build(micro_config(false), 5).unwrap();
    let pts = random_cloud(200, 6, 1.0);
    let moved =
        crate::registration::RigidTransform::from_axis_angle([0.3, 0.2, 1.0], 40.0, [0.0; 3]).apply_all(&pts);
    let a = model.extract(&pts, None).unwrap();
    let b = model.extract(&moved, None).unwrap();
    assert!(a.len() != b.len() || a.descriptors.max_abs_diff(&b.descriptors) > 1e-6);
}

#[test]
fn structure_only_ignores_the_image() {
    let model = Model::build(micro_config(false), 5).unwrap();
    let pts = random_cloud(200, 6, 1.0);
    let a = model.extract(&pts, None).unwrap();
    let b = model.extract(&pts, Some(&random_image(16, 8, 1))).unwrap();
    let c = model.extract(&pts, Some(&random_image(32, 24, 2))).unwrap();
    assert_eq!(a.descriptors.data(), b.descriptors.data());
    assert_eq!(a.descriptors.data(), c.descriptors.data());
}

#[test]
fn fusion_model_depends_on_the_image() {
    let model = Model::build(micro_config(true), 5).unwrap();
    let pts = random_cloud(200, 6, 1.0);
    let a = model.extract(&pts, Some(&random_image(16, 16, 1))).unwrap();
    let b = model.extract(&pts, Some(&random_image(16, 16, 2))).unwrap();
    assert!(a.descriptors.max_abs_diff(&b.descriptors) > 1e-9);
}

#[test]
fn every_layer_variant_runs() {
    let pts = random_cloud(150, 8, 1.0);
    let img = random_image(16, 16, 9);
    let mut three = micro_config(true);
    three.fusion.fusion_positions = crate::fusion::FusionPositions::Three;
    let mut concat = micro_config(true);
    concat.fusion_mode = FusionMode::Concat;
    let mut image_q = micro_config(true);
    image_q.fusion.query_source = crate::fusion::QuerySource::Image;
    let mut raw = micro_config(true);
    raw.normalize_output = false;
    for cfg in [three, concat, image_q, raw] {
        let model = Model::build(cfg.clone(), 1).unwrap();
        assert_eq!(model.params.scalar_count(), Model::expected_param_count(&cfg));
        let f = model.extract(&pts, Some(&img)).unwrap();
        assert!(f.descriptors.is_finite());
    }
}

#[test]
fn full_network_gradients_match_finite_differences() {
    let model = Model::build(micro_config(true), 11).unwrap();
    let pts = [[0.01, 0.01, 0.01], [0.11, 0.01, 0.01]];
    let img = random_image(8, 8, 12);
    let input = model.prepare(&pts, Some(&img)).unwrap();
    assert_eq!(input.voxels.len(), 2);
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let rep = finite_diff_check_params(
        &model.params,
        &ids,
        |t, b| Ok(model.forward(t, b, &input)?.descriptors),
        1e-6,
        4,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

fn field(rows: Vec<Vec<f64>>) -> DescriptorField {
    let n = rows.len();
    DescriptorField {
        descriptors: DenseTensor::from_rows(&rows).unwrap(),
        coords: Arc::new(CoordSet::new(1, (0..n as i32).map(|i| [i, 0, 0]).collect()).unwrap()),
        point_map: (0..n).map(|i| vec![i]).collect(),
        points_xyz: (0..n).map(|i| [i as f64, 0.0, 0.0]).collect(),
    }
}

#[test]
fn loss_is_zero_when_margins_hold() {
    let cfg = TrainConfig::default();
    let a = field(vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 3.0]]);
    let loss = hardest_contrastive_loss(&a, &a, &[(0, 0), (1, 1), (2, 2)], &cfg).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn positive_term_closed_form() {
    let cfg = TrainConfig::default();
    let delta = 0.25;
    let a = field(vec![vec![0.0, 0.0], vec![5.0, 0.0]]);
    let b = field(vec![vec![cfg.positive_margin + delta, 0.0], vec![5.0, 0.0]]);
    let loss = hardest_contrastive_loss(&a, &b, &[(0, 0), (1, 1)], &cfg).unwrap();
    // One of two pairs violates the margin; negatives are 5 apart.
    assert!((loss - delta * delta / 2.0).abs() < 1e-15);
}

#[test]
fn single_pair_has_no_negatives() {
    let a = field(vec![vec![0.0, 0.0]]);
    let err = hardest_contrastive_loss(&a, &a, &[(0, 0)], &TrainConfig::default());
    assert!(matches!(err, Err(Error::Contract(_))));
}

/// Straight-line loss: every candidate is scanned explicitly.
fn exhaustive_loss(a: &DenseTensor, b: &DenseTensor, pairs: &[(usize, usize)], mp: f64, mn: f64) -> f64 {
    let d = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };
    let pos: f64 = pairs
        .iter()
        .map(|&(i, j)| (d(a.row(i), b.row(j)) - mp).max(0.0).powi(2))
        .sum::<f64>()
        / pairs.len() as f64;
    let side = |x: &DenseTensor, y: &DenseTensor, flip: bool| -> f64 {
        let mut total = 0.0;
        for &(i, j) in pairs {
            let (anchor, _) = if flip { (j, i) } else { (i, j) };
            let mut best = f64::INFINITY;
            for &(p, q) in pairs {
                let cand = if flip { p } else { q };
                let is_partner = pairs.iter().any(|&(s, t)| {
                    if flip {
                        t == anchor && s == cand
                    } else {
                        s == anchor && t == cand
                    }
                });
                if !is_partner {
                    best = best.min(d(x.row(anchor), y.row(cand)));
                }
            }
            total += (mn - best).max(0.0).powi(2);
        }
        total / pairs.len() as f64
    };
    pos + 0.5 * (side(a, b, false) + side(b, a, true))
}

#[test]
fn loss_matches_exhaustive_mining() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..20 {
        let a = DenseTensor::uniform(&[10, 4], -0.6, 0.6, &mut rng);
        let b = DenseTensor::uniform(&[10, 4], -0.6, 0.6, &mut rng);
        let mut pairs: Vec<(usize, usize)> = (0..10).map(|i| (i, rng.random_range(0..10))).collect();
        pairs.push((3, (pairs[3].1 + 1) % 10));
        let cfg = TrainConfig::default();
        let fa = field((0..10).map(|r| a.row(r).to_vec()).collect());
        let fb = field((0..10).map(|r| b.row(r).to_vec()).collect());
        let got = hardest_contrastive_loss(&fa, &fb, &pairs, &cfg).unwrap();
        let want = exhaustive_loss(&a, &b, &pairs, cfg.positive_margin, cfg.negative_margin);
        assert!((got - want).abs() < 1e-10, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let a = DenseTensor::uniform(&[8, 4], -0.5, 0.5, &mut rng);
    let b = DenseTensor::uniform(&[8, 4], -0.5, 0.5, &mut rng);
    let pairs: Vec<(usize, usize)> = (0..8).map(|i| (i, (i * 3) % 8)).collect();
    let cfg = TrainConfig::default();
    let rep = crate::autodiff::finite_diff_check(
        |t, va| {
            let vb = t.leaf(b.clone());
            hardest_contrastive_on_tape(t, va, vb, &pairs, &cfg)
        },
        &a,
        1e-6,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-5, "{rep:?}");
}

fn toy_pair(seed: u64) -> crate::data::RegistrationPair {
    let scene = generate_scene(&SceneConfig {
        planes: 1,
        boxes: 1,
        spheres: 1,
        texture_mode: TextureMode::AmbiguousStructure,
        points_per_primitive: 300,
        spacing: 0.8,
        seed,
        ..SceneConfig::default()
    })
    .unwrap();
    make_pair(
        &scene,
        &PairConfig {
            overlap: 0.6,
            transform_magnitude: 20.0,
            voxel_size: 0.1,
            ..PairConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn toy_train_config(seed: u64, lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        epochs,
        anchors_per_pair: 64,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let mut model = Model::build(micro_config(true), 3).unwrap();
    let before = model.params.clone();
    train(&mut model, &[toy_pair(1)], &toy_train_config(0, 0.0, 3)).unwrap();
    for ((_, p), (_, q)) in model.params.iter().zip(before.iter()) {
        assert_eq!(p.value.data(), q.value.data(), "{}", p.name);
    }
}

#[test]
fn training_reduces_the_loss_on_a_toy_pair() {
    let pair = toy_pair(2);
    let mut decreased = false;
    for seed in 0..3 {
        let mut model = Model::build(micro_config(true), seed).unwrap();
        let report = train(
            &mut model,
            std::slice::from_ref(&pair),
            &toy_train_config(seed, 0.05, 50),
        )
        .unwrap();
        let first: f64 = report.step_losses[..5].iter().sum();
        let last: f64 = report.step_losses[45..].iter().sum();
        if last < first {
            decreased = true;
            break;
        }
    }
    assert!(decreased);
}

#[test]
fn training_is_deterministic() {
    let pair = toy_pair(4);
    let run = || {
        let mut model = Model::build(micro_config(true), 9).unwrap();
        train(
            &mut model,
            std::slice::from_ref(&pair),
            &toy_train_config(9, 0.05, 4),
        )
        .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn diverging_training_reports_the_step() {
    let mut model = Model::build(micro_config(false), 3).unwrap();
    let id = model.params.id("final.bias").unwrap();
    model.params.get_mut(id).value.data_mut()[0] = f64::NAN;
    match train(&mut model, &[toy_pair(1)], &toy_train_config(0, 0.05, 2)) {
        Err(Error::Training { step: 0, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let model = Model::build(micro_config(true), 13).unwrap();
    let bytes = save_checkpoint(&model).unwrap();
    let back = load_checkpoint(&bytes, Some(&model.config)).unwrap();
    for ((_, p), (_, q)) in model.params.iter().zip(back.params.iter()) {
        assert_eq!(p.value.data(), q.value.data());
    }
    let mut other = model.config.clone();
    other.descriptor_dim = 16;
    assert!(matches!(
        load_checkpoint(&bytes, Some(&other)),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        load_checkpoint(&bytes[..bytes.len() - 3], None),
        Err(Error::Parse { .. })
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        load_checkpoint(&bad, None),
        Err(Error::Parse { offset: 0, .. })
    ));
}

#[test]
fn descriptor_file_round_trip() {
    let model = Model::build(micro_config(false), 13).unwrap();
    let f = model.extract(&random_cloud(100, 2, 1.0), None).unwrap();
    let back = load_descriptors(&save_descriptors(&f).unwrap()).unwrap();
    assert_eq!(back.descriptors.data(), f.descriptors.data());
    assert_eq!(back.coords, f.coords);
    assert_eq!(back.point_map, f.point_map);
    assert_eq!(back.points_xyz, f.points_xyz);
}

#[test]
fn positives_follow_the_ground_truth() {
    let pair = toy_pair(5);
    let pos = positive_pairs(&pair.src.points, &pair.dst.points, &pair.gt, 1e-9);
    assert!(!pos.is_empty());
    for (i, j) in pos {
        let p = pair.gt.apply(pair.src.points[i]);
        assert!((0..3).all(|k| (p[k] - pair.dst.points[j][k]).abs() < 1e-9));
    }
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]

    /// Shifting by whole multiples of the coarsest stride (8 voxels) maps
    /// every voxel pyramid onto itself, so descriptors must not change.
    #[test]
    fn grid_aligned_translation_leaves_descriptors_unchanged(
        seed in 0u64..1000,
        shift in proptest::array::uniform3(-3i32..4),
    ) {
        let cfg = NetworkConfig { voxel_size: 0.125, ..micro_config(false) };
        let model = Model::build(cfg, seed).unwrap();
        let pts = random_cloud(150, seed, 1.5);
        let moved: Vec<[f64; 3]> =
            pts.iter().map(|p| std::array::from_fn(|k| p[k] + f64::from(shift[k]))).collect();
        let a = model.extract(&pts, None).unwrap();
        let b = model.extract(&moved, None).unwrap();
        proptest::prop_assert_eq!(a.descriptors.data(), b.descriptors.data());
    }
}

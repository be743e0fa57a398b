//! Trains a small model on a few synthetic pairs and registers a held-out one.

use imfnet_core::data::{generate_scene, make_pair, PairConfig, RegistrationPair, SceneConfig};
use imfnet_core::metrics::transform_errors;
use imfnet_core::network::{train, Model, NetworkConfig, TrainConfig};
use imfnet_core::pipeline::{register_pair, CorrespondenceSource};
use imfnet_core::registration::RansacParams;

fn pair(seed: u64) -> imfnet_core::Result<RegistrationPair> {
    let scene = generate_scene(&SceneConfig {
        seed,
        ..SceneConfig::default()
    })?;
    make_pair(&scene, &PairConfig::default(), seed)
}

fn main() -> imfnet_core::Result<()> {
    let train_set = (0..24).map(pair).collect::<imfnet_core::Result<Vec<_>>>()?;
    let mut model = Model::build(NetworkConfig::default(), 0)?;
    let report = train(
        &mut model,
        &train_set,
        &TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        },
    )?;
    println!("epoch losses {:?}", report.epoch_losses);

    for seed in 100..105 {
        let test = pair(seed)?;
        let result = register_pair(
            Some(&model),
            &test,
            CorrespondenceSource::Descriptors,
            true,
            &RansacParams::default(),
        )?;
        let (rte, rre) = transform_errors(&result.transform, &test.gt);
        println!(
            "pair {seed}: {} inliers, RTE {rte:.3} m, RRE {rre:.2} deg",
            result.inliers.len()
        );
    }
    Ok(())
}

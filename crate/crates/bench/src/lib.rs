//! Shared inputs for the benchmarks under `benches/`.

use imfnet_core::data::{generate_scene, make_pair, PairConfig, RegistrationPair, SceneConfig};
use imfnet_core::network::{Model, NetworkConfig};

/// One default-sized fragment pair.
pub fn scene_pair(seed: u64) -> RegistrationPair {
    let scene = generate_scene(&SceneConfig {
        seed,
        ..SceneConfig::default()
    })
    .expect("default scene config is valid");
    make_pair(&scene, &PairConfig::default(), seed).expect("default pair config is valid")
}

/// Untrained default network, with or without image fusion.
pub fn model(with_fusion: bool) -> Model {
    Model::build(
        NetworkConfig {
            with_fusion,
            ..NetworkConfig::default()
        },
        0,
    )
    .expect("default network config is valid")
}

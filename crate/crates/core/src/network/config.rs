use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::image::ImageEncoderConfig;

/// How the image texture enters the decoder at the bottleneck.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Texture is added to the structure feature.
    #[default]
    Add,
    /// Structure and texture are concatenated, doubling the decoder input.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub encoder_channels: [usize; 4],
    /// Output widths of the decoder layers, bottleneck first.
    pub decoder_channels: [usize; 4],
    pub descriptor_dim: usize,
    pub voxel_size: f64,
    pub kernel_extent: usize,
    pub normalize_output: bool,
    pub with_fusion: bool,
    pub fusion_mode: FusionMode,
    pub fusion: FusionConfig,
    pub image_encoder: ImageEncoderConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_channels: [16, 32, 64, 128],
            decoder_channels: [64, 64, 32, 32],
            descriptor_dim: 32,
            voxel_size: 0.05,
            kernel_extent: 3,
            normalize_output: true,
            with_fusion: true,
            fusion_mode: FusionMode::Add,
            fusion: FusionConfig::new(64),
            image_encoder: ImageEncoderConfig::default(),
        }
    }
}

/// Training hyperparameters. Margin and optimizer defaults are the
/// conventional hardest-contrastive values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub positive_margin: f64,
    pub negative_margin: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Pairs visited per epoch; 0 means the whole dataset.
    pub pairs_per_epoch: usize,
    pub anchors_per_pair: usize,
    /// Positive matches must lie within this many voxel sizes after the
    /// ground-truth transform.
    pub positive_radius: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            positive_margin: 0.1,
            negative_margin: 1.4,
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 10,
            pairs_per_epoch: 0,
            anchors_per_pair: 256,
            positive_radius: 1.5,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.collect_violations(&mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn collect_violations(&self, errs: &mut Vec<String>) {
        for (name, list) in [
            ("encoder_channels", &self.encoder_channels),
            ("decoder_channels", &self.decoder_channels),
        ] {
            if list.contains(&0) {
                errs.push(format!("network.{name} entries must be positive"));
            }
        }
        if self.descriptor_dim == 0 {
            errs.push("network.descriptor_dim must be at least 1".into());
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            errs.push("network.voxel_size must be positive".into());
        }
        if self.kernel_extent == 0 || self.kernel_extent.is_multiple_of(2) {
            errs.push("network.kernel_extent must be odd".into());
        }
        if self.with_fusion {
            self.fusion.validate(errs);
            if self.image_encoder.block_channels.contains(&0) || self.image_encoder.feature_dim == 0 {
                errs.push("network.image_encoder widths must be positive".into());
            }
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.collect_violations(&mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn collect_violations(&self, errs: &mut Vec<String>) {
        if !(self.positive_margin >= 0.0) {
            errs.push("train.positive_margin must be nonnegative".into());
        }
        if !(self.negative_margin > self.positive_margin) {
            errs.push("train.negative_margin must exceed positive_margin".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            errs.push("train.learning_rate must be a nonnegative number".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push("train.momentum must lie in [0, 1)".into());
        }
        if self.anchors_per_pair < 2 {
            errs.push("train.anchors_per_pair must be at least 2".into());
        }
        if !(self.positive_radius > 0.0) {
            errs.push("train.positive_radius must be positive".into());
        }
    }
}

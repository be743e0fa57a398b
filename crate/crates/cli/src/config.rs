use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use imfnet_core::data::{PairConfig, SceneConfig};
use imfnet_core::metrics::Thresholds;
use imfnet_core::network::{NetworkConfig, TrainConfig};
use imfnet_core::pipeline::EvalConfig;
use imfnet_core::registration::RansacParams;

use crate::error::{Category, CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub scenes: usize,
    pub pairs_per_scene: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 4,
            pairs_per_scene: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    #[default]
    Src,
    Dst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretConfig {
    pub side: Side,
    pub point: usize,
    pub target_layer: String,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            side: Side::Src,
            point: 0,
            target_layer: imfnet_core::dam::DEFAULT_TARGET_LAYER.to_string(),
        }
    }
}

/// Input artifacts. Relative paths resolve against the working directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Extra checkpoints compared side by side by `evaluate`.
    pub checkpoints: Vec<PathBuf>,
    pub cloud: Option<PathBuf>,
    pub image: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Pair used by `register` and `interpret`.
    pub pair_index: usize,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub pair: PairConfig,
    pub synth: SynthConfig,
    pub ransac: RansacParams,
    pub metrics: Thresholds,
    pub eval: EvalConfig,
    pub interpret: InterpretConfig,
    pub paths: Paths,
}

/// Sets `path` (dot separated) inside a JSON object tree, creating
/// intermediate objects. The value is parsed as JSON when possible and
/// taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::new(
            Category::Config,
            format!("--set expects key=value, got `{assignment}`"),
        )
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::new(
                Category::Config,
                format!("empty key segment in `{key}`"),
            ));
        }
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert(Value::Object(Default::default()));
    }
    Ok(())
}

impl RunConfig {
    /// Reads an optional JSON file, applies overrides and deserializes with
    /// unknown keys rejected.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::new(
                        Category::Config,
                        format!("cannot read config {}: {e}", p.display()),
                    )
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::new(
                        Category::Config,
                        format!("config {} is not valid JSON: {e}", p.display()),
                    )
                })?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        serde_json::from_value(root)
            .map_err(|e| CliError::new(Category::Config, format!("invalid configuration: {e}")))
    }

    /// Every violation of the numeric settings.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        self.network.collect_violations(&mut errs);
        self.train.collect_violations(&mut errs);
        self.scene.collect_violations(&mut errs);
        self.pair.collect_violations(&mut errs);
        self.metrics.collect_violations(&mut errs);
        self.eval.collect_violations(&mut errs);
        let r = &self.ransac;
        if r.iterations == 0 {
            errs.push("ransac.iterations must be positive".into());
        }
        if !(r.inlier_dist > 0.0 && r.inlier_dist.is_finite()) {
            errs.push(format!(
                "ransac.inlier_dist must be positive, got {}",
                r.inlier_dist
            ));
        }
        if r.sample_size < 3 {
            errs.push(format!(
                "ransac.sample_size must be at least 3, got {}",
                r.sample_size
            ));
        }
        if self.synth.scenes == 0 || self.synth.pairs_per_scene == 0 {
            errs.push("synth.scenes and synth.pairs_per_scene must be positive".into());
        }
        errs
    }

    /// Validates settings plus the named input paths, reporting all
    /// problems at once.
    pub fn validate(&self, required: &[(&str, Option<&Path>)]) -> CliResult<()> {
        let mut errs = self.violations();
        for (name, p) in required {
            match p {
                None => errs.push(format!("paths.{name} is required for this command")),
                Some(p) if !p.exists() => errs.push(format!("paths.{name}: {} does not exist", p.display())),
                _ => {}
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(&errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_nested_keys_and_parse_json() {
        let mut root = serde_json::json!({"train": {"epochs": 3}});
        apply_override(&mut root, "train.epochs=7").unwrap();
        apply_override(&mut root, "network.fusion.query_source=image").unwrap();
        apply_override(&mut root, "network.encoder_channels=[1,2,3,4]").unwrap();
        assert_eq!(root["train"]["epochs"], 7);
        assert_eq!(root["network"]["fusion"]["query_source"], "image");
        assert_eq!(root["network"]["encoder_channels"][3], 4);
        assert!(apply_override(&mut root, "novalue").is_err());
        assert!(apply_override(&mut root, "a..b=1").is_err());
    }

    #[test]
    fn every_violation_is_reported() {
        let over = [
            "network.voxel_size=-1".to_string(),
            "train.momentum=2".to_string(),
            "ransac.sample_size=2".to_string(),
            "metrics.tau2=1.5".to_string(),
        ];
        let cfg = RunConfig::load(None, &over).unwrap();
        let err = cfg.validate(&[("dataset", None)]).unwrap_err();
        assert_eq!(err.category, Category::Config);
        for needle in ["voxel_size", "momentum", "sample_size", "tau2", "paths.dataset"] {
            assert!(
                err.message.contains(needle),
                "{needle} missing from {}",
                err.message
            );
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::load(None, &["train.epoch=3".into()]).unwrap_err();
        assert_eq!(err.category, Category::Config);
        assert!(err.message.contains("epoch"));
    }

    #[test]
    fn defaults_are_valid() {
        assert!(RunConfig::default().violations().is_empty());
    }
}

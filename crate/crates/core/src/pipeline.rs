//! End-to-end steps shared by the command line and the test suites:
//! registering one pair and scoring it under the evaluation protocol.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RegistrationPair;
use crate::error::{Error, Result};
use crate::metrics::{anchor_residuals, ratio_within, PairResult, Thresholds};
use crate::network::{positive_pairs, DescriptorField, Model};
use crate::registration::{
    match_descriptors, ransac_register, CorrespondenceSet, RansacParams, RegistrationResult,
};

/// Where correspondences for registration come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceSource {
    /// Nearest neighbours in descriptor space.
    #[default]
    Descriptors,
    /// Exact positional correspondences from the stored ground truth;
    /// isolates the estimator from the descriptors.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Anchors drawn from the overlap region of each pair.
    pub anchors: usize,
    /// Overlap test radius, in voxels.
    pub overlap_radius: f64,
    /// Register with mutually nearest matches only.
    pub mutual_only: bool,
    pub correspondences: CorrespondenceSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            anchors: 500,
            overlap_radius: 1.5,
            mutual_only: true,
            correspondences: CorrespondenceSource::Descriptors,
        }
    }
}

impl EvalConfig {
    pub fn collect_violations(&self, errs: &mut Vec<String>) {
        if self.anchors == 0 {
            errs.push("eval.anchors must be positive".into());
        }
        if !(self.overlap_radius > 0.0 && self.overlap_radius.is_finite()) {
            errs.push(format!(
                "eval.overlap_radius must be positive, got {}",
                self.overlap_radius
            ));
        }
    }
}

/// Descriptors of both fragments of a pair.
pub fn describe_pair(model: &Model, pair: &RegistrationPair) -> Result<(DescriptorField, DescriptorField)> {
    Ok((
        model.extract(&pair.src.points, Some(&pair.src_image))?,
        model.extract(&pair.dst.points, Some(&pair.dst_image))?,
    ))
}

/// Fragment points are exact copies before file storage; 9-digit PLY
/// coordinates leave them within about a nanometer of each other.
pub const GROUND_TRUTH_TOLERANCE: f64 = 1e-6;

/// Point-level correspondences that the ground truth maps onto each other
/// within `tol` meters.
pub fn ground_truth_correspondences(pair: &RegistrationPair, tol: f64) -> CorrespondenceSet {
    CorrespondenceSet::from_indices(&positive_pairs(&pair.src.points, &pair.dst.points, &pair.gt, tol))
}

/// Estimates the source-to-target transform of a pair.
pub fn register_pair(
    model: Option<&Model>,
    pair: &RegistrationPair,
    source: CorrespondenceSource,
    mutual_only: bool,
    ransac: &RansacParams,
) -> Result<RegistrationResult> {
    match source {
        CorrespondenceSource::GroundTruth => {
            let corrs = ground_truth_correspondences(pair, GROUND_TRUTH_TOLERANCE);
            ransac_register(&corrs, &pair.src.points, &pair.dst.points, ransac)
        }
        CorrespondenceSource::Descriptors => {
            let model = model.ok_or_else(|| Error::contract("descriptor matching needs a model"))?;
            let (a, b) = describe_pair(model, pair)?;
            let corrs = match_descriptors(&a.descriptors, &b.descriptors, mutual_only)?;
            ransac_register(&corrs, &a.points_xyz, &b.points_xyz, ransac)
        }
    }
}

/// Source voxels inside the overlap, sampled down to `count` and sorted.
pub fn overlap_anchors(
    a: &DescriptorField,
    b: &DescriptorField,
    pair: &RegistrationPair,
    radius: f64,
    count: usize,
    seed: u64,
) -> Vec<usize> {
    let mut inside: Vec<usize> = positive_pairs(&a.points_xyz, &b.points_xyz, &pair.gt, radius)
        .into_iter()
        .map(|(i, _)| i)
        .collect();
    if inside.len() > count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = sample(&mut rng, inside.len(), count)
            .into_iter()
            .map(|k| inside[k])
            .collect();
        picked.sort_unstable();
        inside = picked;
    }
    inside
}

/// Scored pair plus the anchor residuals behind its inlier ratio.
#[derive(Clone, Debug)]
pub struct PairEvaluation {
    pub result: PairResult,
    pub residuals: Vec<f64>,
    pub registration: RegistrationResult,
}

pub fn evaluate_pair(
    model: &Model,
    pair: &RegistrationPair,
    id: &str,
    scene: &str,
    cfg: &EvalConfig,
    th: &Thresholds,
    ransac: &RansacParams,
) -> Result<PairEvaluation> {
    let (a, b) = describe_pair(model, pair)?;
    let radius = cfg.overlap_radius * model.config.voxel_size;
    let anchors = overlap_anchors(&a, &b, pair, radius, cfg.anchors, ransac.seed);
    if anchors.is_empty() {
        return Err(Error::contract(format!("pair {id} has no overlapping voxels")));
    }
    let all = match_descriptors(&a.descriptors, &b.descriptors, false)?;
    let residuals = anchor_residuals(&anchors, &all, &pair.gt, &a.points_xyz, &b.points_xyz)?;
    let ratio = ratio_within(&residuals, th.tau1);
    let registration = match cfg.correspondences {
        CorrespondenceSource::Descriptors => {
            let corrs = if cfg.mutual_only {
                CorrespondenceSet {
                    pairs: all.pairs.iter().filter(|c| c.mutual).cloned().collect(),
                }
            } else {
                all
            };
            ransac_register(&corrs, &a.points_xyz, &b.points_xyz, ransac)?
        }
        CorrespondenceSource::GroundTruth => {
            register_pair(None, pair, CorrespondenceSource::GroundTruth, false, ransac)?
        }
    };
    let result = PairResult::new(id, scene, ratio, &registration.transform, &pair.gt, th);
    Ok(PairEvaluation {
        result,
        residuals,
        registration,
    })
}

//! Evaluation protocol: anchor inlier ratio, feature match recall with its
//! threshold curves, transformation errors and success rate.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::{CorrespondenceSet, RigidTransform};

/// Inlier distance threshold in meters.
pub const DEFAULT_TAU1: f64 = 0.1;
/// Inlier ratio threshold.
pub const DEFAULT_TAU2: f64 = 0.05;
pub const DEFAULT_RTE_MAX: f64 = 2.0;
pub const DEFAULT_RRE_MAX: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub tau1: f64,
    pub tau2: f64,
    pub rte_max: f64,
    pub rre_max: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau1: DEFAULT_TAU1,
            tau2: DEFAULT_TAU2,
            rte_max: DEFAULT_RTE_MAX,
            rre_max: DEFAULT_RRE_MAX,
        }
    }
}

impl Thresholds {
    pub fn collect_violations(&self, errs: &mut Vec<String>) {
        for (name, v) in [
            ("tau1", self.tau1),
            ("rte_max", self.rte_max),
            ("rre_max", self.rre_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!(
                    "metrics.{name} must be a finite nonnegative number, got {v}"
                ));
            }
        }
        if !(0.0..1.0).contains(&self.tau2) {
            errs.push(format!("metrics.tau2 must lie in [0, 1), got {}", self.tau2));
        }
    }
}

/// Distance between each anchor's matched target point and its true
/// position; `INFINITY` for anchors without a match.
pub fn anchor_residuals(
    anchors: &[usize],
    matches: &CorrespondenceSet,
    gt: &RigidTransform,
    src_xyz: &[[f64; 3]],
    dst_xyz: &[[f64; 3]],
) -> Result<Vec<f64>> {
    let mut first: HashMap<usize, usize> = HashMap::with_capacity(matches.len());
    for c in &matches.pairs {
        if c.dst >= dst_xyz.len() {
            return Err(Error::contract(format!("match target {} out of range", c.dst)));
        }
        first.entry(c.src).or_insert(c.dst);
    }
    anchors
        .iter()
        .map(|&a| {
            let p = *src_xyz
                .get(a)
                .ok_or_else(|| Error::contract(format!("anchor {a} out of range")))?;
            Ok(first.get(&a).map_or(f64::INFINITY, |&d| {
                let q = gt.apply(p);
                let t = dst_xyz[d];
                ((q[0] - t[0]).powi(2) + (q[1] - t[1]).powi(2) + (q[2] - t[2]).powi(2)).sqrt()
            }))
        })
        .collect()
}

/// Fraction of residuals within `tau1` (inclusive).
pub fn ratio_within(residuals: &[f64], tau1: f64) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    residuals.iter().filter(|&&r| r <= tau1).count() as f64 / residuals.len() as f64
}

pub fn inlier_ratio(
    anchors: &[usize],
    matches: &CorrespondenceSet,
    gt: &RigidTransform,
    tau1: f64,
    src_xyz: &[[f64; 3]],
    dst_xyz: &[[f64; 3]],
) -> Result<f64> {
    if anchors.is_empty() {
        return Err(Error::contract("inlier ratio needs at least one anchor"));
    }
    Ok(ratio_within(
        &anchor_residuals(anchors, matches, gt, src_xyz, dst_xyz)?,
        tau1,
    ))
}

/// Fraction of pairs whose inlier ratio exceeds `tau2` (strictly).
pub fn feature_match_recall(ratios: &[f64], tau2: f64) -> Result<f64> {
    if ratios.is_empty() {
        return Err(Error::contract("feature match recall needs at least one pair"));
    }
    Ok(ratios.iter().filter(|&&r| r > tau2).count() as f64 / ratios.len() as f64)
}

/// Recall at each inlier-ratio threshold.
pub fn fmr_curve_tau2(ratios: &[f64], taus: &[f64]) -> Result<Vec<(f64, f64)>> {
    taus.iter()
        .map(|&t| Ok((t, feature_match_recall(ratios, t)?)))
        .collect()
}

/// Recall at each inlier-distance threshold, from per-pair anchor residuals.
pub fn fmr_curve_tau1(residuals: &[Vec<f64>], taus: &[f64], tau2: f64) -> Result<Vec<(f64, f64)>> {
    taus.iter()
        .map(|&t| {
            let ratios: Vec<f64> = residuals.iter().map(|r| ratio_within(r, t)).collect();
            Ok((t, feature_match_recall(&ratios, tau2)?))
        })
        .collect()
}

/// Population standard deviation of the per-scene recall.
pub fn fmr_scene_std(scenes: &[String], ratios: &[f64], tau2: f64) -> Result<f64> {
    if scenes.len() != ratios.len() {
        return Err(Error::dim("fmr_scene_std", &[scenes.len()], &[ratios.len()]));
    }
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (s, &r) in scenes.iter().zip(ratios) {
        groups.entry(s).or_default().push(r);
    }
    let per: Vec<f64> = groups
        .values()
        .map(|r| feature_match_recall(r, tau2))
        .collect::<Result<_>>()?;
    if per.is_empty() {
        return Err(Error::contract("no scenes"));
    }
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per.len() as f64).sqrt())
}

/// Translation distance in meters and relative rotation angle in degrees.
pub fn transform_errors(est: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    let rte = (0..3)
        .map(|i| (est.translation[i] - gt.translation[i]).powi(2))
        .sum::<f64>()
        .sqrt();
    let rel = gt.inverse().compose(est);
    (rte, rel.angle_deg())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub id: String,
    pub scene: String,
    pub inlier_ratio: f64,
    pub matched: bool,
    pub rte_m: f64,
    pub rre_deg: f64,
    pub success: bool,
}

impl PairResult {
    pub fn new(
        id: impl Into<String>,
        scene: impl Into<String>,
        inlier_ratio: f64,
        est: &RigidTransform,
        gt: &RigidTransform,
        th: &Thresholds,
    ) -> Self {
        let (rte_m, rre_deg) = transform_errors(est, gt);
        Self {
            id: id.into(),
            scene: scene.into(),
            inlier_ratio,
            matched: inlier_ratio > th.tau2,
            rte_m,
            rre_deg,
            success: rte_m <= th.rte_max && rre_deg <= th.rre_max,
        }
    }
}

/// Fraction of results within both error thresholds (inclusive).
pub fn success_rate(results: &[PairResult], rte_max: f64, rre_max: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::contract("success rate needs at least one result"));
    }
    Ok(results
        .iter()
        .filter(|r| r.rte_m <= rte_max && r.rre_deg <= rre_max)
        .count() as f64
        / results.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub pairs: usize,
    pub fmr: f64,
    pub fmr_scene_std: f64,
    pub mean_inlier_ratio: f64,
    pub success_rate: f64,
    pub mean_rte_m: f64,
    pub mean_rre_deg: f64,
}

/// Per-pair rows, aggregates and threshold curves of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Thresholds,
    pub pairs: Vec<PairResult>,
    pub aggregates: Aggregates,
    pub fmr_vs_tau2: Vec<(f64, f64)>,
    pub fmr_vs_tau1: Vec<(f64, f64)>,
}

/// Threshold grid for the inlier-ratio curve: 0.00 to 0.20 in steps of 0.01.
pub fn tau2_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 100.0).collect()
}

/// Threshold grid for the inlier-distance curve: 0.01 m to 0.20 m.
pub fn tau1_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 100.0).collect()
}

impl EvalReport {
    /// `residuals[k]` are the anchor residuals of `pairs[k]`.
    pub fn build(pairs: Vec<PairResult>, residuals: &[Vec<f64>], th: Thresholds) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::contract("evaluation needs at least one pair"));
        }
        if residuals.len() != pairs.len() {
            return Err(Error::dim("EvalReport", &[pairs.len()], &[residuals.len()]));
        }
        let ratios: Vec<f64> = pairs.iter().map(|p| p.inlier_ratio).collect();
        let scenes: Vec<String> = pairs.iter().map(|p| p.scene.clone()).collect();
        let n = pairs.len() as f64;
        let aggregates = Aggregates {
            pairs: pairs.len(),
            fmr: feature_match_recall(&ratios, th.tau2)?,
            fmr_scene_std: fmr_scene_std(&scenes, &ratios, th.tau2)?,
            mean_inlier_ratio: ratios.iter().sum::<f64>() / n,
            success_rate: success_rate(&pairs, th.rte_max, th.rre_max)?,
            mean_rte_m: pairs.iter().map(|p| p.rte_m).sum::<f64>() / n,
            mean_rre_deg: pairs.iter().map(|p| p.rre_deg).sum::<f64>() / n,
        };
        Ok(Self {
            thresholds: th,
            fmr_vs_tau2: fmr_curve_tau2(&ratios, &tau2_grid())?,
            fmr_vs_tau1: fmr_curve_tau1(residuals, &tau1_grid(), th.tau2)?,
            pairs,
            aggregates,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Two-column CSV of a threshold curve.
pub fn curve_csv(name: &str, curve: &[(f64, f64)]) -> String {
    let mut s = format!("{name},fmr\n");
    for (t, v) in curve {
        let _ = writeln!(s, "{t},{v}");
    }
    s
}

#[cfg(test)]
mod tests;

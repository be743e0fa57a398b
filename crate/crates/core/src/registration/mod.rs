//! Descriptor matching, least-squares rigid fitting and RANSAC.

mod kdtree;
mod transform;

pub use kdtree::KdTree;
pub use transform::RigidTransform;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub src: usize,
    pub dst: usize,
    pub distance: f64,
    pub mutual: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn from_indices(pairs: &[(usize, usize)]) -> Self {
        Self {
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
}

/// Nearest descriptor in `b` for every row of `a`.
pub fn match_descriptors(a: &DenseTensor, b: &DenseTensor, mutual_only: bool) -> Result<CorrespondenceSet> {
    if a.cols() != b.cols() {
        return Err(Error::dim("match_descriptors", a.shape(), b.shape()));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Empty("match_descriptors: empty descriptor field"));
    }
    let tb = KdTree::new(b.data().to_vec(), b.cols());
    let ta = KdTree::new(a.data().to_vec(), a.cols());
    let mut pairs = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let (j, d2) = tb.nearest(a.row(i)).expect("nonempty tree");
        let back = ta.nearest(b.row(j)).expect("nonempty tree").0;
        let mutual = back == i;
        if mutual || !mutual_only {
            pairs.push(Correspondence {
                src: i,
                dst: j,
                distance: d2.sqrt(),
                mutual,
            });
        }
    }
    Ok(CorrespondenceSet { pairs })
}

/// Weighted least-squares rigid fit of `src` onto `dst`.
pub fn kabsch(src: &[[f64; 3]], dst: &[[f64; 3]], weights: Option<&[f64]>) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::dim("kabsch", &[src.len(), 3], &[dst.len(), 3]));
    }
    if src.len() < 3 {
        return Err(Error::Degenerate(format!(
            "kabsch needs 3 points, got {}",
            src.len()
        )));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    if let Some(ws) = weights {
        if ws.len() != src.len() || ws.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::contract(
                "kabsch weights must be nonnegative, one per point",
            ));
        }
    }
    let total: f64 = (0..src.len()).map(w).sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("kabsch weights sum to zero".into()));
    }
    let mut cs = Vector3::zeros();
    let mut cd = Vector3::zeros();
    for i in 0..src.len() {
        cs += w(i) * Vector3::from(src[i]);
        cd += w(i) * Vector3::from(dst[i]);
    }
    cs /= total;
    cd /= total;
    let mut h = Matrix3::zeros();
    for i in 0..src.len() {
        h += w(i) * (Vector3::from(src[i]) - cs) * (Vector3::from(dst[i]) - cd).transpose();
    }
    let svd = h.svd(true, true);
    let s = svd.singular_values;
    let (smax, smid) = (s.max(), {
        let mut v = [s[0], s[1], s[2]];
        v.sort_by(|a, b| b.total_cmp(a));
        v[1]
    });
    if !(smax > 0.0) || smid <= 1e-12 * smax {
        return Err(Error::Degenerate("cross-covariance has rank below 2".into()));
    }
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let t = cd - r * cs;
    Ok(RigidTransform::from_parts(&r, &t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_dist: f64,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 2000,
            inlier_dist: 0.1,
            sample_size: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub success: bool,
    pub transform: RigidTransform,
    /// Inlier correspondences as `(src, dst)` under the refit transform.
    pub inliers: Vec<(usize, usize)>,
    pub iterations: usize,
}

impl RegistrationResult {
    fn failure(iterations: usize) -> Self {
        Self {
            success: false,
            transform: RigidTransform::identity(),
            inliers: Vec::new(),
            iterations,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let r = &self.transform.rotation;
        serde_json::json!({
            "success": self.success,
            "rotation": r.iter().flatten().collect::<Vec<_>>(),
            "translation": self.transform.translation,
            "inlier_count": self.inliers.len(),
            "iterations": self.iterations,
        })
    }
}

fn inliers_of(
    t: &RigidTransform,
    pairs: &[(usize, usize)],
    src: &[[f64; 3]],
    dst: &[[f64; 3]],
    dist: f64,
) -> Vec<(usize, usize)> {
    let d2 = dist * dist;
    pairs
        .iter()
        .copied()
        .filter(|&(s, d)| {
            let p = t.apply(src[s]);
            let q = dst[d];
            (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>() <= d2
        })
        .collect()
}

fn fit(pairs: &[(usize, usize)], src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<RigidTransform> {
    let a: Vec<_> = pairs.iter().map(|&(s, _)| src[s]).collect();
    let b: Vec<_> = pairs.iter().map(|&(_, d)| dst[d]).collect();
    kabsch(&a, &b, None)
}

/// Seeded RANSAC over correspondences. The correspondences are sorted
/// first, so the result does not depend on their order.
pub fn ransac_register(
    corrs: &CorrespondenceSet,
    src_xyz: &[[f64; 3]],
    dst_xyz: &[[f64; 3]],
    params: &RansacParams,
) -> Result<RegistrationResult> {
    if params.sample_size < 3 {
        return Err(Error::contract("RANSAC sample size must be at least 3"));
    }
    let mut pairs: Vec<(usize, usize)> = corrs.pairs.iter().map(|c| (c.src, c.dst)).collect();
    if pairs
        .iter()
        .any(|&(s, d)| s >= src_xyz.len() || d >= dst_xyz.len())
    {
        return Err(Error::contract("correspondence index out of range"));
    }
    pairs.sort_unstable();
    if pairs.len() < params.sample_size {
        return Ok(RegistrationResult::failure(0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Vec<(usize, usize)> = Vec::new();
    for _ in 0..params.iterations {
        let idx = rand::seq::index::sample(&mut rng, pairs.len(), params.sample_size);
        let sample: Vec<_> = idx.iter().map(|i| pairs[i]).collect();
        let Ok(t) = fit(&sample, src_xyz, dst_xyz) else {
            continue;
        };
        let inl = inliers_of(&t, &pairs, src_xyz, dst_xyz, params.inlier_dist);
        if inl.len() > best.len() {
            best = inl;
        }
    }
    if best.len() < params.sample_size {
        return Ok(RegistrationResult::failure(params.iterations));
    }
    let transform = match fit(&best, src_xyz, dst_xyz) {
        Ok(t) => t,
        Err(Error::Degenerate(_)) => return Ok(RegistrationResult::failure(params.iterations)),
        Err(e) => return Err(e),
    };
    let inliers = inliers_of(&transform, &pairs, src_xyz, dst_xyz, params.inlier_dist);
    Ok(RegistrationResult {
        success: true,
        transform,
        inliers,
        iterations: params.iterations,
    })
}

#[cfg(test)]
mod tests;

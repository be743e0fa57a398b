use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{look_at, render_image, CameraIntrinsics};
use super::PointCloud;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::registration::RigidTransform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub intrinsics: CameraIntrinsics,
    pub splat_radius: usize,
    /// Extra distance factor so the fragment does not touch the border.
    pub margin: f64,
    /// Camera height above the fragment center, as a fraction of its
    /// distance.
    pub elevation: f64,
    /// Aim at one half of the fragment only, so part of it is untextured.
    pub partial_view: bool,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            splat_radius: 1,
            margin: 1.15,
            elevation: 0.3,
            partial_view: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    /// Requested fraction of shared points between the fragments.
    pub overlap: f64,
    /// Largest rotation applied to the source, degrees.
    pub transform_magnitude: f64,
    /// Largest translation applied to the source, meters.
    pub translation_magnitude: f64,
    /// Fragment window width as a fraction of the scene's x range.
    pub window_fraction: f64,
    /// Grid used to measure the achieved overlap.
    pub voxel_size: f64,
    pub camera: CameraConfig,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            overlap: 0.5,
            transform_magnitude: 30.0,
            translation_magnitude: 0.5,
            window_fraction: 0.5,
            voxel_size: 0.05,
            camera: CameraConfig::default(),
        }
    }
}

impl PairConfig {
    pub fn collect_violations(&self, errs: &mut Vec<String>) {
        if !(self.overlap > 0.0 && self.overlap <= 1.0) {
            errs.push("pair.overlap must lie in (0, 1]".into());
        }
        if !(self.transform_magnitude >= 0.0 && self.transform_magnitude <= 180.0) {
            errs.push("pair.transform_magnitude must lie in [0, 180] degrees".into());
        }
        if !(self.translation_magnitude >= 0.0) {
            errs.push("pair.translation_magnitude must be nonnegative".into());
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            errs.push("pair.window_fraction must lie in (0, 1]".into());
        }
        if !(self.voxel_size > 0.0) {
            errs.push("pair.voxel_size must be positive".into());
        }
        self.camera.intrinsics.collect_violations(errs);
    }
}

/// Two fragments of one scene. `gt` maps source coordinates into the
/// target frame.
#[derive(Clone, Debug)]
pub struct RegistrationPair {
    pub src: PointCloud,
    pub dst: PointCloud,
    pub src_image: Image,
    pub dst_image: Image,
    pub gt: RigidTransform,
    /// Overlap measured on the voxel grid.
    pub overlap_fraction: f64,
}

fn voxel_keys(points: &[[f64; 3]], voxel: f64) -> HashSet<[i64; 3]> {
    points
        .iter()
        .map(|p| p.map(|v| (v / voxel).floor() as i64))
        .collect()
}

/// Shared occupied voxels over the smaller occupied set.
pub fn voxel_overlap(a: &[[f64; 3]], b: &[[f64; 3]], voxel: f64) -> f64 {
    let (va, vb) = (voxel_keys(a, voxel), voxel_keys(b, voxel));
    let denom = va.len().min(vb.len());
    if denom == 0 {
        return 0.0;
    }
    va.intersection(&vb).count() as f64 / denom as f64
}

struct Windows<'a> {
    xs: Vec<f64>,
    keys: Vec<[i64; 3]>,
    cloud: &'a PointCloud,
    x0: f64,
    x_max: f64,
    width: f64,
}

impl Windows<'_> {
    /// Half-open window `[lo, lo + width)`, closed when it reaches the end
    /// of the scene.
    fn contains(&self, lo: f64, x: f64) -> bool {
        let hi = lo + self.width;
        x >= lo && (x < hi || hi >= self.x_max)
    }

    /// Voxel overlap of the windows at `x0` and `x0 + shift`, the same
    /// measure the finished pair reports.
    fn overlap(&self, shift: f64) -> f64 {
        let (mut a, mut b) = (HashSet::new(), HashSet::new());
        for (&x, key) in self.xs.iter().zip(&self.keys) {
            if self.contains(self.x0, x) {
                a.insert(*key);
            }
            if self.contains(self.x0 + shift, x) {
                b.insert(*key);
            }
        }
        let denom = a.len().min(b.len());
        if denom == 0 {
            0.0
        } else {
            a.intersection(&b).count() as f64 / denom as f64
        }
    }

    fn crop(&self, lo: f64) -> PointCloud {
        self.cloud.filter(|_, p| self.contains(lo, p[0]))
    }
}

fn camera_for(fragment: &PointCloud, cfg: &CameraConfig) -> Result<RigidTransform> {
    let (lo, hi) = fragment.bounds();
    let c = fragment.centroid();
    let cam = &cfg.intrinsics;
    let (mut hx, hz) = (0.5 * (hi[0] - lo[0]), 0.5 * (hi[2] - lo[2]));
    let mut target = c;
    if cfg.partial_view {
        hx *= 0.5;
        target[0] = 0.5 * (c[0] + hi[0]);
    }
    let reach = (hx * cam.fx / cam.cx).max(hz * cam.fy / cam.cy) * cfg.margin;
    let dist = reach + (c[1] - lo[1]).max(0.0);
    let eye = [target[0], target[1] - dist, target[2] + cfg.elevation * dist];
    look_at(eye, target, [0.0, 0.0, 1.0])
}

fn random_motion(rng: &mut ChaCha8Rng, cfg: &PairConfig, pivot: [f64; 3]) -> RigidTransform {
    let axis: [f64; 3] = loop {
        let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = a.iter().map(|v| v * v).sum::<f64>();
        if n > 1e-3 && n <= 1.0 {
            break a;
        }
    };
    let angle = rng.random_range(0.0..=cfg.transform_magnitude);
    let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let len = rng.random_range(0.0..=cfg.translation_magnitude);
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let t = dir.map(|v| v / norm * len);
    let rot = RigidTransform::from_axis_angle(axis, angle, [0.0; 3]);
    // Rotate about the pivot: p ↦ R(p − c) + c + t.
    let rc = rot.apply(pivot);
    let shift = std::array::from_fn(|k| pivot[k] - rc[k] + t[k]);
    RigidTransform {
        translation: shift,
        ..rot
    }
}

/// Crops two x-windows of `scene` sharing `cfg.overlap` of their points,
/// moves the source by a seeded rigid motion and renders each fragment
/// from a camera facing it.
pub fn make_pair(scene: &PointCloud, cfg: &PairConfig, seed: u64) -> Result<RegistrationPair> {
    let mut errs = Vec::new();
    cfg.collect_violations(&mut errs);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if scene.is_empty() {
        return Err(Error::Empty("make_pair: empty scene"));
    }
    let (lo, hi) = scene.bounds();
    let range = hi[0] - lo[0];
    let width = cfg.window_fraction * range;
    let win = Windows {
        xs: scene.points.iter().map(|p| p[0]).collect(),
        keys: scene
            .points
            .iter()
            .map(|p| p.map(|v| (v / cfg.voxel_size).floor() as i64))
            .collect(),
        cloud: scene,
        x0: lo[0],
        x_max: hi[0],
        width,
    };
    let max_shift = range - width;
    let shift = if cfg.overlap >= 1.0 {
        0.0
    } else {
        if win.overlap(max_shift) > cfg.overlap + 0.05 {
            return Err(Error::Construction(format!(
                "overlap {} is unreachable with window fraction {}",
                cfg.overlap, cfg.window_fraction
            )));
        }
        let (mut a, mut b) = (0.0, max_shift);
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            if win.overlap(m) >= cfg.overlap {
                a = m;
            } else {
                b = m;
            }
        }
        // `a` keeps at least the requested share of voxels.
        a
    };
    let world_src = win.crop(lo[0]);
    let dst = win.crop(lo[0] + shift);
    if world_src.is_empty() || dst.is_empty() {
        return Err(Error::Construction("a fragment window is empty".into()));
    }
    let overlap_fraction = voxel_overlap(&world_src.points, &dst.points, cfg.voxel_size);
    if (overlap_fraction - cfg.overlap).abs() > 0.05 {
        return Err(Error::Construction(format!(
            "achieved voxel overlap {overlap_fraction:.3}, requested {}",
            cfg.overlap
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motion = random_motion(&mut rng, cfg, world_src.centroid());
    let src = world_src.transformed(&motion);
    let gt = motion.inverse();

    let cam = &cfg.camera;
    let src_pose = camera_for(&world_src, cam)?;
    let dst_pose = camera_for(&dst, cam)?;
    let src_image = render_image(&world_src, &src_pose, &cam.intrinsics, cam.splat_radius)?.image;
    let dst_image = render_image(&dst, &dst_pose, &cam.intrinsics, cam.splat_radius)?.image;
    Ok(RegistrationPair {
        src,
        dst,
        src_image,
        dst_image,
        gt,
        overlap_fraction,
    })
}

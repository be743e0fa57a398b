use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureMode {
    /// Primitives of random size and shape, each with its own color.
    #[default]
    DistinctColor,
    /// Primitives of one kind are exact translated copies of each other,
    /// distinguishable only by color.
    AmbiguousStructure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub planes: usize,
    pub boxes: usize,
    pub spheres: usize,
    pub texture_mode: TextureMode,
    pub points_per_primitive: usize,
    pub noise_sigma: f64,
    /// Distance between neighbouring primitive centers along x, meters.
    pub spacing: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            planes: 2,
            boxes: 2,
            spheres: 1,
            texture_mode: TextureMode::DistinctColor,
            points_per_primitive: 600,
            noise_sigma: 0.005,
            spacing: 1.2,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn collect_violations(&self, errs: &mut Vec<String>) {
        if self.planes + self.boxes + self.spheres == 0 {
            errs.push("scene needs at least one primitive".into());
        }
        if self.points_per_primitive == 0 {
            errs.push("scene.points_per_primitive must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            errs.push("scene.noise_sigma must be nonnegative".into());
        }
        if !(self.spacing > 0.0) {
            errs.push("scene.spacing must be positive".into());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Plane,
    Box,
    Sphere,
}

const PALETTE: [[u8; 3]; 12] = [
    [220, 40, 40],
    [240, 210, 40],
    [40, 90, 220],
    [40, 180, 70],
    [200, 60, 200],
    [250, 140, 30],
    [40, 200, 200],
    [120, 70, 30],
    [250, 250, 250],
    [20, 20, 20],
    [150, 200, 60],
    [110, 60, 170],
];

/// Points on a primitive of unit parameters, centered at the origin.
fn sample_shape(kind: Kind, size: f64, n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let mut u = || rng.random_range(-0.5..0.5);
    match kind {
        // Vertical square in the x–z plane.
        Kind::Plane => (0..n)
            .map(|_| [size * u(), 0.0, size * u() + 0.5 * size])
            .collect(),
        Kind::Box => (0..n)
            .map(|i| {
                let face = i % 6;
                let (a, b) = (size * u(), size * u());
                let h = 0.5 * size;
                let p = match face {
                    0 => [h, a, b],
                    1 => [-h, a, b],
                    2 => [a, h, b],
                    3 => [a, -h, b],
                    4 => [a, b, h],
                    _ => [a, b, -h],
                };
                [p[0], p[1], p[2] + h]
            })
            .collect(),
        Kind::Sphere => (0..n)
            .map(|_| loop {
                let v = [u(), u(), u()];
                let r2 = v.iter().map(|x| x * x).sum::<f64>();
                if r2 > 1e-4 && r2 <= 0.25 {
                    let s = 0.5 * size / r2.sqrt();
                    break [v[0] * s, v[1] * s, v[2] * s + 0.5 * size];
                }
            })
            .collect(),
    }
}

/// Samples the primitives in a row along x, one every `spacing` meters.
///
/// In ambiguous mode each kind uses a single size and one shared sample
/// pattern, so equal kinds differ only by translation, noise and color.
pub fn generate_scene(cfg: &SceneConfig) -> Result<PointCloud> {
    let mut errs = Vec::new();
    cfg.collect_violations(&mut errs);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut kinds = Vec::new();
    let (mut p, mut b, mut s) = (cfg.planes, cfg.boxes, cfg.spheres);
    while p + b + s > 0 {
        for (left, kind) in [(&mut p, Kind::Plane), (&mut b, Kind::Box), (&mut s, Kind::Sphere)] {
            if *left > 0 {
                *left -= 1;
                kinds.push(kind);
            }
        }
    }
    let base_size = |k: Kind| match k {
        Kind::Plane => 0.9,
        Kind::Box => 0.5,
        Kind::Sphere => 0.6,
    };
    let mut palette: Vec<[u8; 3]> = PALETTE.to_vec();
    for i in (1..palette.len()).rev() {
        palette.swap(i, rng.random_range(0..=i));
    }
    let pattern_seed: u64 = rng.random();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|_| Error::contract("invalid noise sigma"))?;
    let mut cloud = PointCloud::default();
    for (idx, &kind) in kinds.iter().enumerate() {
        let (local, color) = match cfg.texture_mode {
            TextureMode::AmbiguousStructure => {
                let mut prng = ChaCha8Rng::seed_from_u64(pattern_seed ^ kind as u64);
                let pts = sample_shape(kind, base_size(kind), cfg.points_per_primitive, &mut prng);
                (pts, palette[idx % palette.len()])
            }
            TextureMode::DistinctColor => {
                let size = base_size(kind) * rng.random_range(0.6..1.3);
                let pts = sample_shape(kind, size, cfg.points_per_primitive, &mut rng);
                let yaw = rng.random_range(-0.6..0.6f64);
                let (sn, cs) = yaw.sin_cos();
                let rotated = pts
                    .into_iter()
                    .map(|q| [cs * q[0] - sn * q[1], sn * q[0] + cs * q[1], q[2]])
                    .collect();
                (rotated, palette[idx % palette.len()])
            }
        };
        let offset = idx as f64 * cfg.spacing;
        for q in local {
            let mut pt = [q[0] + offset, q[1], q[2]];
            if cfg.noise_sigma > 0.0 {
                for v in pt.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            cloud.points.push(pt);
            cloud.colors.push(color);
            cloud.labels.push(idx as u32);
        }
    }
    Ok(cloud)
}

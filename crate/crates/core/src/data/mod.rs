//! Synthetic scenes of colored primitives, fragment pairs with exact ground
//! truth, a pinhole renderer and file I/O.

mod camera;
mod dataset;
mod io;
mod pair;
mod scene;

pub use camera::{back_project, look_at, project_point, render_image, CameraIntrinsics, Rendered};
pub use dataset::{
    load_dataset, save_dataset, save_dataset_with_scenes, Manifest, ManifestEntry, MANIFEST_FILE,
};
pub use io::{
    atomic_write, parse_ply, parse_ppm, ply_string, ppm_bytes, read_ply, read_ppm, write_ply, write_ppm,
};
pub use pair::{make_pair, voxel_overlap, CameraConfig, PairConfig, RegistrationPair};
pub use scene::{generate_scene, SceneConfig, TextureMode};

/// Points with 8-bit colors and, for generated scenes, the index of the
/// primitive each point was sampled from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
    pub labels: Vec<u32>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points for which `keep` holds.
    pub fn filter(&self, mut keep: impl FnMut(usize, &[f64; 3]) -> bool) -> PointCloud {
        let mut out = PointCloud::default();
        for (i, p) in self.points.iter().enumerate() {
            if keep(i, p) {
                out.points.push(*p);
                out.colors.push(self.colors[i]);
                if let Some(&l) = self.labels.get(i) {
                    out.labels.push(l);
                }
            }
        }
        out
    }

    pub fn transformed(&self, t: &crate::registration::RigidTransform) -> PointCloud {
        PointCloud {
            points: t.apply_all(&self.points),
            ..self.clone()
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / self.points.len().max(1) as f64)
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }
}

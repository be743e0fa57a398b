use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::registration::RigidTransform;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    /// 160×120 view with a 77° horizontal field of view.
    fn default() -> Self {
        Self {
            fx: 100.0,
            fy: 100.0,
            cx: 80.0,
            cy: 60.0,
            width: 160,
            height: 120,
        }
    }
}

impl CameraIntrinsics {
    pub fn square160() -> Self {
        Self {
            cy: 80.0,
            height: 160,
            ..Self::default()
        }
    }

    pub fn collect_violations(&self, errs: &mut Vec<String>) {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            errs.push("camera focal lengths must be positive".into());
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            errs.push("camera principal point must lie inside the image".into());
        }
        if self.width == 0 || self.height == 0 {
            errs.push("camera image size must be positive".into());
        }
    }
}

/// Pinhole projection of a camera-frame point.
pub fn project_point(p: [f64; 3], cam: &CameraIntrinsics) -> Result<(f64, f64)> {
    let z = p[2];
    if !(z > 0.0) {
        return Err(Error::BehindCamera(z));
    }
    Ok((cam.fx * p[0] / z + cam.cx, cam.fy * p[1] / z + cam.cy))
}

/// Camera-frame point at depth `z` seen at pixel `(u, v)`.
pub fn back_project(u: f64, v: f64, z: f64, cam: &CameraIntrinsics) -> [f64; 3] {
    [(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z]
}

/// World-to-camera transform for a camera at `eye` looking at `target`
/// with image rows running against `up`.
pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<RigidTransform> {
    let eye_v = Vector3::from(eye);
    let fwd = Vector3::from(target) - eye_v;
    let right = fwd.cross(&Vector3::from(up));
    if fwd.norm() < 1e-12 || right.norm() < 1e-9 * fwd.norm() {
        return Err(Error::Degenerate("look_at: view direction parallel to up".into()));
    }
    let z = fwd.normalize();
    let x = right.normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Ok(RigidTransform::from_parts(&r, &(-(r * eye_v))))
}

/// Rendered view plus the number of points that landed in it.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Image,
    pub visible_points: usize,
    /// Set when no point projected into the image.
    pub empty_view: bool,
}

pub const BACKGROUND: [u8; 3] = [128, 128, 128];

/// Z-buffered square splats of `2·splat_radius + 1` pixels on a mid-gray
/// background. `cam_pose` maps world points into the camera frame.
pub fn render_image(
    cloud: &PointCloud,
    cam_pose: &RigidTransform,
    cam: &CameraIntrinsics,
    splat_radius: usize,
) -> Result<Rendered> {
    if cloud.is_empty() {
        return Err(Error::Empty("render_image: empty cloud"));
    }
    let (w, h) = (cam.width, cam.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut rgb = BACKGROUND.repeat(w * h);
    let mut visible = 0;
    let r = splat_radius as i64;
    for (p, color) in cloud.points.iter().zip(&cloud.colors) {
        let pc = cam_pose.apply(*p);
        let Ok((u, v)) = project_point(pc, cam) else {
            continue;
        };
        let (px, py) = (u.floor(), v.floor());
        if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
            continue;
        }
        visible += 1;
        let (px, py) = (px as i64, py as i64);
        for y in (py - r).max(0)..=(py + r).min(h as i64 - 1) {
            for x in (px - r).max(0)..=(px + r).min(w as i64 - 1) {
                let k = y as usize * w + x as usize;
                if pc[2] < depth[k] {
                    depth[k] = pc[2];
                    rgb[3 * k..3 * k + 3].copy_from_slice(color);
                }
            }
        }
    }
    Ok(Rendered {
        image: Image::from_rgb8(w, h, &rgb)?,
        visible_points: visible,
        empty_view: visible == 0,
    })
}

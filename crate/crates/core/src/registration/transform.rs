use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rigid motion `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Row-major rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Validates orthonormality and `det R = +1` to within `1e-9`.
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        let r = t.matrix();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(ortho <= 1e-9 && (r.determinant() - 1.0).abs() <= 1e-9) {
            return Err(Error::contract("rotation is not orthonormal with det +1"));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite translation"));
        }
        Ok(t)
    }

    pub fn from_translation(translation: [f64; 3]) -> Self {
        Self {
            translation,
            ..Self::identity()
        }
    }

    /// Rotation by `degrees` about `axis` followed by `translation`.
    pub fn from_axis_angle(axis: [f64; 3], degrees: f64, translation: [f64; 3]) -> Self {
        let axis = Unit::new_normalize(Vector3::from(axis));
        let r = Rotation3::from_axis_angle(&axis, degrees.to_radians());
        Self::from_parts(r.matrix(), &Vector3::from(translation))
    }

    pub(crate) fn from_parts(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[(i, j)];
            }
        }
        Self {
            rotation,
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut out = self.translation;
        for i in 0..3 {
            out[i] += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    pub fn apply_all(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points.iter().map(|&p| self.apply(p)).collect()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.matrix().transpose();
        Self::from_parts(&rt, &(-(rt * self.vector())))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let r = self.matrix() * other.matrix();
        let t = self.matrix() * other.vector() + self.vector();
        Self::from_parts(&r, &t)
    }

    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.vector());
        m
    }

    /// Rotation angle in degrees.
    ///
    /// Equals `acos((tr R − 1) / 2)`, evaluated as `atan2(sin, cos)` with
    /// the sine taken from the skew-symmetric part, which keeps full
    /// precision for angles near 0 and 180°.
    pub fn angle_deg(&self) -> f64 {
        let r = &self.rotation;
        let cos = ((r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
        let axis = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
        let sin = 0.5 * axis.iter().map(|v| v * v).sum::<f64>().sqrt();
        sin.atan2(cos).to_degrees()
    }
}

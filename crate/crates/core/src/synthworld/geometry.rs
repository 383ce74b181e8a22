use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::WorldError;

/// Camera-to-world rigid transform: `rotation` maps camera axes
/// (x right, y down, z forward) into the world frame and `translation` is
/// the camera centre in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Unit quaternion, `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0; 3],
        }
    }

    /// Builds a pose, normalizing the quaternion. Fails on a zero or
    /// non-finite quaternion.
    pub fn new(rotation: [f64; 4], translation: [f64; 3]) -> Result<Self, WorldError> {
        let n = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 1e-12 && n.is_finite()) || translation.iter().any(|v| !v.is_finite()) {
            return Err(WorldError::InvalidPose(format!(
                "quaternion {rotation:?} / translation {translation:?}"
            )));
        }
        Ok(Self {
            rotation: rotation.map(|v| v / n),
            translation,
        })
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        let q = q.into_inner();
        let n = q.norm();
        Self {
            rotation: [q.w / n, q.i / n, q.j / n, q.k / n],
            translation: [translation.x, translation.y, translation.z],
        }
    }

    /// A camera at `position` looking horizontally along `heading_rad`
    /// (measured from +x towards +y) with the world z axis pointing up.
    pub fn looking_horizontally(position: [f64; 3], heading_rad: f64) -> Self {
        let (s, c) = heading_rad.sin_cos();
        let forward = Vector3::new(c, s, 0.0);
        let right = Vector3::new(s, -c, 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let m = Matrix3::from_columns(&[right, down, forward]);
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
        Self::from_unit_quaternion(q, Vector3::from(position))
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// World point expressed in the camera frame.
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.unit_quaternion().inverse_transform_vector(&(p - self.center()))
    }

    /// Direction in world coordinates of a camera-frame direction.
    pub fn camera_to_world_dir(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.unit_quaternion().transform_vector(d)
    }

    /// Left-multiplies by a rigid transform `(r, t)`: `R' = r·R`,
    /// `C' = r·C + t`.
    pub fn transformed(&self, r: &UnitQuaternion<f64>, t: &Vector3<f64>) -> Self {
        Self::from_unit_quaternion(r * self.unit_quaternion(), r.transform_vector(&self.center()) + t)
    }
}

/// Geodesic angle between two rotations in degrees,
/// `2·acos(min(1, |q1·q2|))`; insensitive to quaternion sign.
pub fn rotation_distance_deg(a: &CameraPose, b: &CameraPose) -> f64 {
    let dot: f64 = a
        .rotation
        .iter()
        .zip(&b.rotation)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        .abs();
    2.0 * dot.min(1.0).acos().to_degrees()
}

/// Euclidean distance between camera centres.
pub fn translation_distance(a: &CameraPose, b: &CameraPose) -> f64 {
    a.translation
        .iter()
        .zip(&b.translation)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pinhole intrinsics with the principal point at the image centre and
/// depth clipping planes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub focal: f64,
    pub near: f64,
    pub far: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), WorldError> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(WorldError::DegenerateIntrinsics(format!(
                "focal length {}",
                self.focal
            )));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(WorldError::DegenerateIntrinsics(format!(
                "clip planes near={} far={}",
                self.near, self.far
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

impl Resolution {
    pub fn square(side: usize) -> Self {
        Self {
            width: side,
            height: side,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizontal_camera_looks_along_heading() {
        let pose = CameraPose::looking_horizontally([1.0, 2.0, 1.5], 0.3);
        let fwd = pose.camera_to_world_dir(&Vector3::z());
        assert!((fwd - Vector3::new(0.3f64.cos(), 0.3f64.sin(), 0.0)).norm() < 1e-12);
        let down = pose.camera_to_world_dir(&Vector3::y());
        assert!((down - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!((pose.quaternion_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_distance_between_headings() {
        let a = CameraPose::looking_horizontally([0.0; 3], 0.0);
        let b = CameraPose::looking_horizontally([0.0; 3], 15f64.to_radians());
        assert!((rotation_distance_deg(&a, &b) - 15.0).abs() < 1e-9);
        let mut neg = a;
        neg.rotation = a.rotation.map(|v| -v);
        assert!(rotation_distance_deg(&a, &neg).abs() < 1e-6);
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(CameraPose::new([0.0; 4], [0.0; 3]).is_err());
    }
}

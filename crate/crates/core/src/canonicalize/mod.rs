//! Depth lifting, point clouds, object poses and pose initialisation.

mod estimators;
mod ply;

pub use estimators::{frame_align, FrameCache, IcpEstimator, IcpFit, NoisyOracle, PcaEstimator, PoseEstimator};
pub use ply::{read_ply, write_ply, write_ply_mesh, PlyFormat};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, RigidTransform, Vec3};
use crate::inference::{matrix_to_rot6d, rot6d_to_matrix};
use crate::synthdata::{DepthImage, Intrinsics};

/// Coordinate frame a point cloud is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Camera,
    Canonical,
    EstimatorCanonical,
}

impl Frame {
    pub fn name(&self) -> &'static str {
        match self {
            Frame::Camera => "camera",
            Frame::Canonical => "canonical",
            Frame::EstimatorCanonical => "estimator_canonical",
        }
    }

    pub fn from_name(s: &str) -> Option<Frame> {
        [Frame::Camera, Frame::Canonical, Frame::EstimatorCanonical]
            .into_iter()
            .find(|f| f.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, frame: Frame) -> Self {
        PointCloud { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Finite coordinates and at least one point.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidArgument("point cloud is empty".into()));
        }
        if let Some(i) = self.points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidArgument(format!("point {i} is not finite")));
        }
        Ok(())
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.points.len().max(1) as f64;
        self.points.iter().fold(Vec3::zeros(), |acc, p| acc + Vec3::from(*p)) / n
    }

    pub fn transformed(&self, t: &RigidTransform, frame: Frame) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = t.apply(&Vec3::from(*p));
                [q.x, q.y, q.z]
            })
            .collect();
        PointCloud { points, frame }
    }
}

/// Object pose in the camera: a canonical point `x_c` appears at
/// `R x_c + t` in the camera frame. The rotation is stored in 6D form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rot6d: [f64; 6],
    pub translation: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rot6d: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: &Mat3, translation: Vec3) -> Self {
        Pose {
            rot6d: matrix_to_rot6d(rotation),
            translation: [translation.x, translation.y, translation.z],
        }
    }

    pub fn rotation(&self) -> Result<Mat3> {
        rot6d_to_matrix(&self.rot6d)
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    /// Canonical to camera.
    pub fn object_to_camera(&self) -> Result<RigidTransform> {
        Ok(RigidTransform::new(self.rotation()?, self.translation()))
    }

    /// Camera to canonical: `x_c = Rᵀ (x − t)`.
    pub fn camera_to_canonical(&self) -> Result<RigidTransform> {
        Ok(self.object_to_camera()?.inverse())
    }

    pub fn from_object_to_camera(t: &RigidTransform) -> Self {
        Pose::new(&t.rotation, t.translation)
    }

    pub fn from_camera_to_canonical(t: &RigidTransform) -> Self {
        Pose::from_object_to_camera(&t.inverse())
    }

    /// Rotation orthonormal with determinant +1 and finite translation.
    pub fn validate(&self) -> Result<()> {
        let r = self.rotation()?;
        let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
        let det = r.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::Degenerate(format!(
                "rotation is not proper (|RᵀR−I| {ortho}, det {det})"
            )));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("translation is not finite".into()));
        }
        Ok(())
    }
}

/// Back-project every masked pixel: `(d(u−cx)/fx, d(v−cy)/fy, d)`.
pub fn lift_depth(depth: &DepthImage) -> Result<PointCloud> {
    depth.validate()?;
    let k = &depth.intrinsics;
    let mut points = Vec::with_capacity(depth.valid_count());
    for v in 0..depth.height {
        for u in 0..depth.width {
            let i = v * depth.width + u;
            if !depth.mask[i] {
                continue;
            }
            let d = depth.depth[i];
            points.push([d * (u as f64 - k.cx) / k.fx, d * (v as f64 - k.cy) / k.fy, d]);
        }
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("depth image has no valid pixels".into()));
    }
    Ok(PointCloud::new(points, Frame::Camera))
}

/// Pinhole projection to `(u, v, depth)`.
pub fn project(p: &[f64; 3], k: &Intrinsics) -> [f64; 3] {
    [k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy, p[2]]
}

#[cfg(test)]
mod tests;

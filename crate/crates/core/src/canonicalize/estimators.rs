use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::SymmetricEigen;
use rand::Rng;

use super::{PointCloud, Pose};
use crate::error::{Error, Result};
use crate::geometry::{axis_angle, Mat3, RigidTransform, Vec3};
use crate::kdtree::KdTree;
use crate::rng;

/// Initial pose source. The returned pose maps the estimator's own
/// canonical frame into the camera; `camera_to_canonical` goes the other way.
pub trait PoseEstimator: Send + Sync {
    fn name(&self) -> &str;

    fn estimate(&self, pc: &PointCloud) -> Result<Pose>;

    /// True when the estimator already works in the prior's canonical frame,
    /// so no alignment through the template is needed.
    fn shares_prior_frame(&self) -> bool {
        false
    }
}

/// Principal axes with third-moment sign disambiguation.
#[derive(Clone, Copy, Debug, Default)]
pub struct PcaEstimator;

/// Principal frame of a cloud: columns are the axes sorted by decreasing
/// variance, origin at the centroid.
fn principal_frame(pc: &PointCloud) -> Result<RigidTransform> {
    pc.validate()?;
    let c = pc.centroid();
    let n = pc.len() as f64;
    let mut cov = Mat3::zeros();
    for p in &pc.points {
        let d = Vec3::from(*p) - c;
        cov += d * d.transpose() / n;
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    for (rank, &k) in order.iter().enumerate() {
        if eig.eigenvalues[k] <= 1e-12 * top.max(f64::MIN_POSITIVE) {
            return Err(Error::Degenerate(format!(
                "covariance rank {rank}: principal axis {} has variance {:e}",
                rank + 1,
                eig.eigenvalues[k]
            )));
        }
    }
    let mut axes = [Vec3::zeros(); 3];
    for (slot, &k) in order.iter().enumerate().take(2) {
        let mut a: Vec3 = eig.eigenvectors.column(k).into();
        let skew: f64 = pc.points.iter().map(|p| (Vec3::from(*p) - c).dot(&a).powi(3)).sum();
        if skew < 0.0 {
            a = -a;
        }
        axes[slot] = a;
    }
    axes[2] = axes[0].cross(&axes[1]);
    Ok(RigidTransform::new(Mat3::from_columns(&axes), c))
}

impl PoseEstimator for PcaEstimator {
    fn name(&self) -> &str {
        "pca"
    }

    fn estimate(&self, pc: &PointCloud) -> Result<Pose> {
        Ok(Pose::from_object_to_camera(&principal_frame(pc)?))
    }
}

/// Point-to-point ICP against template surface samples in the prior's
/// canonical frame, seeded from the principal frames of both clouds.
#[derive(Clone, Debug)]
pub struct IcpEstimator {
    tree: KdTree,
    template_frame: RigidTransform,
    pub max_iterations: usize,
    pub reject_factor: f64,
    pub tolerance: f64,
}

/// Outcome of one ICP run.
#[derive(Clone, Copy, Debug)]
pub struct IcpFit {
    /// Camera to template frame.
    pub transform: RigidTransform,
    /// RMS distance over the kept correspondences.
    pub residual: f64,
    pub iterations: usize,
}

fn kabsch(src: &[Vec3], dst: &[Vec3]) -> RigidTransform {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let fix = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, (v * u.transpose()).determinant().signum()));
    let r = v * fix * u.transpose();
    RigidTransform::new(r, cd - r * cs)
}

impl IcpEstimator {
    pub fn new(template: &PointCloud) -> Result<Self> {
        let template_frame = principal_frame(template)?;
        Ok(IcpEstimator {
            tree: KdTree::new(&template.points),
            template_frame,
            max_iterations: 50,
            reject_factor: 3.0,
            tolerance: 1e-6,
        })
    }

    /// ICP from a given camera-to-template initial transform.
    pub fn refine(&self, pc: &PointCloud, init: &RigidTransform) -> Result<IcpFit> {
        pc.validate()?;
        let src: Vec<Vec3> = pc.points.iter().map(|p| Vec3::from(*p)).collect();
        let mut cur = *init;
        let mut prev = f64::INFINITY;
        let mut fit = IcpFit {
            transform: cur,
            residual: f64::INFINITY,
            iterations: 0,
        };
        for it in 0..=self.max_iterations {
            let moved: Vec<Vec3> = src.iter().map(|p| cur.apply(p)).collect();
            let matches: Vec<(usize, f64)> = moved
                .iter()
                .map(|q| self.tree.nearest(&[q.x, q.y, q.z]).expect("template is non-empty"))
                .collect();
            let mut dists: Vec<f64> = matches.iter().map(|m| m.1.sqrt()).collect();
            dists.sort_by(f64::total_cmp);
            let cut = self.reject_factor * dists[dists.len() / 2];
            let (mut a, mut b) = (Vec::new(), Vec::new());
            let mut sq = 0.0;
            for (i, m) in matches.iter().enumerate() {
                if m.1.sqrt() <= cut {
                    a.push(moved[i]);
                    b.push(Vec3::from(self.tree.points()[m.0]));
                    sq += m.1;
                }
            }
            let residual = (sq / a.len() as f64).sqrt();
            fit = IcpFit {
                transform: cur,
                residual,
                iterations: it,
            };
            let converged = prev.is_finite() && (prev - residual).abs() <= self.tolerance * prev.max(1e-300);
            if converged || it == self.max_iterations || a.len() < 3 {
                break;
            }
            prev = residual;
            cur = kabsch(&a, &b).compose(&cur);
        }
        if !fit.residual.is_finite() {
            return Err(Error::NumericAbort("ICP residual is not finite".into()));
        }
        Ok(fit)
    }

    /// Best ICP fit over the four proper sign flips of the principal frames.
    pub fn fit(&self, pc: &PointCloud) -> Result<IcpFit> {
        let cloud_frame = principal_frame(pc)?;
        let mut best: Option<IcpFit> = None;
        for flip in [[1.0, 1.0, 1.0], [-1.0, -1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, -1.0]] {
            let s = RigidTransform::new(Mat3::from_diagonal(&Vec3::from(flip)), Vec3::zeros());
            let init = self.template_frame.compose(&s).compose(&cloud_frame.inverse());
            let fit = self.refine(pc, &init)?;
            if best.is_none_or(|b| fit.residual < b.residual) {
                best = Some(fit);
            }
        }
        Ok(best.expect("four candidates"))
    }
}

impl PoseEstimator for IcpEstimator {
    fn name(&self) -> &str {
        "icp"
    }

    fn estimate(&self, pc: &PointCloud) -> Result<Pose> {
        Ok(Pose::from_camera_to_canonical(&self.fit(pc)?.transform))
    }

    fn shares_prior_frame(&self) -> bool {
        true
    }
}

/// Ground-truth pose perturbed by a rotation of exactly `rot_deg` degrees
/// about a random axis through the object origin and a translation of
/// exactly `trans` in a random direction.
#[derive(Clone, Debug)]
pub struct NoisyOracle {
    truth: Pose,
    pub rot_deg: f64,
    pub trans: f64,
    pub seed: u64,
}

impl NoisyOracle {
    pub fn new(truth: Pose, rot_deg: f64, trans: f64, seed: u64) -> Result<Self> {
        truth.validate()?;
        if !(rot_deg >= 0.0 && trans >= 0.0) {
            return Err(Error::InvalidArgument("oracle noise must be non-negative".into()));
        }
        Ok(NoisyOracle {
            truth,
            rot_deg,
            trans,
            seed,
        })
    }

    pub fn perturbed(&self) -> Result<Pose> {
        let mut r = rng::stream(self.seed, "oracle-noise");
        let mut unit = || loop {
            let v = Vec3::new(
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        };
        let axis = unit();
        let dir = unit();
        let noise = axis_angle(&axis, self.rot_deg.to_radians());
        let t = self.truth.object_to_camera()?;
        Ok(Pose::new(&(t.rotation * noise), t.translation + dir * self.trans))
    }
}

impl PoseEstimator for NoisyOracle {
    fn name(&self) -> &str {
        "noisy_oracle"
    }

    fn estimate(&self, pc: &PointCloud) -> Result<Pose> {
        pc.validate()?;
        self.perturbed()
    }

    fn shares_prior_frame(&self) -> bool {
        true
    }
}

/// Transform from the estimator's canonical frame to the prior's, found by
/// running the estimator once on the complete template.
pub fn frame_align(estimator: &dyn PoseEstimator, template: &PointCloud) -> Result<RigidTransform> {
    if estimator.shares_prior_frame() {
        return Ok(RigidTransform::identity());
    }
    estimator.estimate(template)?.object_to_camera()
}

/// [`frame_align`] results memoised per (estimator, category).
#[derive(Debug, Default)]
pub struct FrameCache {
    map: Mutex<HashMap<(String, String), RigidTransform>>,
}

impl FrameCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_compute(
        &self,
        estimator: &dyn PoseEstimator,
        category: &str,
        template: &PointCloud,
    ) -> Result<RigidTransform> {
        let key = (estimator.name().to_string(), category.to_string());
        if let Some(t) = self.map.lock().expect("cache lock").get(&key) {
            return Ok(*t);
        }
        let t = frame_align(estimator, template)?;
        self.map.lock().expect("cache lock").insert(key, t);
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

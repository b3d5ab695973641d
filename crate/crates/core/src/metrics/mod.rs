//! Chamfer distance, F-score and pose error, with report formatting.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonicalize::{PointCloud, Pose};
use crate::error::{Error, Result};
use crate::kdtree::{dist2, KdTree};

/// Default F-score threshold, as a fraction of the unit-cube side.
pub const DEFAULT_TAU: f64 = 0.01;

/// Side length of the canonical cube `[-1, 1]³`.
pub const CANONICAL_SIDE: f64 = 2.0;

fn check(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("metric on an empty point cloud".into()));
    }
    Ok(())
}

/// Squared distance from each query to its nearest neighbour in `target`.
pub fn nearest_sq_distances(queries: &[[f64; 3]], target: &[[f64; 3]]) -> Vec<f64> {
    let tree = KdTree::new(target);
    queries
        .par_iter()
        .map(|q| tree.nearest(q).map_or(f64::INFINITY, |(_, d)| d))
        .collect()
}

/// O(N·M) reference for [`nearest_sq_distances`].
pub fn nearest_sq_distances_brute_force(queries: &[[f64; 3]], target: &[[f64; 3]]) -> Vec<f64> {
    queries
        .iter()
        .map(|q| target.iter().map(|t| dist2(q, t)).fold(f64::INFINITY, f64::min))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn chamfer_from(ab: &[f64], ba: &[f64]) -> f64 {
    (mean(ab) + mean(ba)) * 1e4
}

/// Bidirectional chamfer distance on squared distances, times 1e4.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check(&a.points, &b.points)?;
    Ok(chamfer_from(
        &nearest_sq_distances(&a.points, &b.points),
        &nearest_sq_distances(&b.points, &a.points),
    ))
}

pub fn chamfer_brute_force(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check(&a.points, &b.points)?;
    Ok(chamfer_from(
        &nearest_sq_distances_brute_force(&a.points, &b.points),
        &nearest_sq_distances_brute_force(&b.points, &a.points),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn fscore_from(ab: &[f64], ba: &[f64], tau: f64) -> FScore {
    let frac = |d: &[f64]| d.iter().filter(|d| d.sqrt() < tau).count() as f64 / d.len() as f64;
    let (precision, recall) = (frac(ab), frac(ba));
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    FScore { precision, recall, f1 }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("threshold {tau} must be positive")));
    }
    Ok(())
}

/// Precision of `pred` and recall of `gt` at distance `tau` (strict), and F1.
pub fn fscore_detail(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<FScore> {
    check(&pred.points, &gt.points)?;
    check_tau(tau)?;
    Ok(fscore_from(
        &nearest_sq_distances(&pred.points, &gt.points),
        &nearest_sq_distances(&gt.points, &pred.points),
        tau,
    ))
}

pub fn fscore(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<f64> {
    Ok(fscore_detail(pred, gt, tau)?.f1)
}

pub fn fscore_brute_force(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<f64> {
    check(&pred.points, &gt.points)?;
    check_tau(tau)?;
    Ok(fscore_from(
        &nearest_sq_distances_brute_force(&pred.points, &gt.points),
        &nearest_sq_distances_brute_force(&gt.points, &pred.points),
        tau,
    )
    .f1)
}

/// Geodesic rotation error and translation error between two poses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub degrees: f64,
    pub translation: f64,
}

/// `arccos((tr(R_estᵀ R_gt) − 1) / 2)` in degrees, evaluated as the
/// equivalent `atan2(sin, cos)` so that small angles stay accurate.
pub fn pose_error(est: &Pose, gt: &Pose) -> Result<PoseError> {
    let m = est.rotation()?.transpose() * gt.rotation()?;
    let cos = (m.trace() - 1.0) / 2.0;
    let w = [m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]];
    let sin = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt() / 2.0;
    Ok(PoseError {
        degrees: sin.atan2(cos).to_degrees(),
        translation: (est.translation() - gt.translation()).norm(),
    })
}

/// Rescales canonical-frame coordinates so the canonical cube has side 1.
pub fn to_unit_cube(pc: &PointCloud) -> PointCloud {
    let s = 1.0 / CANONICAL_SIDE;
    PointCloud::new(pc.points.iter().map(|p| p.map(|c| c * s)).collect(), pc.frame)
}

/// Per-shape evaluation outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub name: String,
    pub chamfer_x1e4: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub pred_points: usize,
    pub gt_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_error: Option<PoseError>,
}

/// Chamfer and F-score of `pred` against `gt`, both given in the canonical
/// frame and compared after rescaling to the unit cube.
pub fn evaluate_clouds(name: &str, pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<ShapeRecord> {
    let (p, g) = (to_unit_cube(pred), to_unit_cube(gt));
    let f = fscore_detail(&p, &g, tau)?;
    Ok(ShapeRecord {
        name: name.to_string(),
        chamfer_x1e4: chamfer(&p, &g)?,
        f1: f.f1,
        precision: f.precision,
        recall: f.recall,
        pred_points: pred.len(),
        gt_points: gt.len(),
        pose_error: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub category: String,
    pub tau: f64,
    /// Mean over shapes.
    pub chamfer_x1e4: f64,
    /// Mean over shapes.
    pub f1_at_tau: f64,
    pub median_f1: f64,
    pub pred_points: usize,
    pub gt_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_pose_error_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_pose_error_trans: Option<f64>,
    pub records: Vec<ShapeRecord>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl EvalReport {
    pub fn from_records(category: &str, tau: f64, records: Vec<ShapeRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("report needs at least one shape".into()));
        }
        let n = records.len() as f64;
        let f1s: Vec<f64> = records.iter().map(|r| r.f1).collect();
        let poses: Vec<PoseError> = records.iter().filter_map(|r| r.pose_error).collect();
        let (deg, trans) = if poses.is_empty() {
            (None, None)
        } else {
            (
                Some(median(&poses.iter().map(|p| p.degrees).collect::<Vec<_>>())),
                Some(median(&poses.iter().map(|p| p.translation).collect::<Vec<_>>())),
            )
        };
        Ok(EvalReport {
            category: category.to_string(),
            tau,
            chamfer_x1e4: records.iter().map(|r| r.chamfer_x1e4).sum::<f64>() / n,
            f1_at_tau: f1s.iter().sum::<f64>() / n,
            median_f1: median(&f1s),
            pred_points: records.iter().map(|r| r.pred_points).max().unwrap_or(0),
            gt_points: records.iter().map(|r| r.gt_points).max().unwrap_or(0),
            median_pose_error_deg: deg,
            median_pose_error_trans: trans,
            records,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned per-shape table followed by the category mean.
    pub fn table(&self) -> String {
        let pct = self.tau * 100.0;
        let name_w = self
            .records
            .iter()
            .map(|r| r.name.len())
            .chain([self.category.len(), 5])
            .max()
            .unwrap_or(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<name_w$}  {:>10}  {:>8}  {:>10}",
            "shape",
            "CD",
            format!("F@{pct}%"),
            "pose(deg)"
        );
        for r in &self.records {
            let pose = r.pose_error.map_or("-".to_string(), |p| format!("{:.3}", p.degrees));
            let _ = writeln!(
                s,
                "{:<name_w$}  {:>10.4}  {:>8.4}  {:>10}",
                r.name, r.chamfer_x1e4, r.f1, pose
            );
        }
        let pose = self
            .median_pose_error_deg
            .map_or("-".to_string(), |d| format!("{d:.3}"));
        let _ = writeln!(
            s,
            "{:<name_w$}  {:>10.4}  {:>8.4}  {:>10}",
            self.category, self.chamfer_x1e4, self.f1_at_tau, pose
        );
        s
    }
}

/// One row per category: mean CD and F-score.
pub fn category_table(reports: &[EvalReport]) -> String {
    let w = reports.iter().map(|r| r.category.len()).chain([8]).max().unwrap_or(8);
    let mut s = String::new();
    let tau = reports.first().map_or(DEFAULT_TAU, |r| r.tau) * 100.0;
    let _ = writeln!(s, "{:<w$}  {:>10}  {:>8}", "category", "CD", format!("F@{tau}%"));
    for r in reports {
        let _ = writeln!(s, "{:<w$}  {:>10.4}  {:>8.4}", r.category, r.chamfer_x1e4, r.f1_at_tau);
    }
    s
}

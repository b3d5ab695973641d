//! Test-time fitting of latent code and object pose to a partial
//! observation, and the depth-to-mesh pipeline.

mod rotation;

pub use rotation::{matrix_to_rot6d, rot6d_backward, rot6d_forward, rot6d_to_matrix, Rot6dPass};

use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, TensorFile};
use crate::canonicalize::{lift_depth, FrameCache, PointCloud, Pose, PoseEstimator};
use crate::error::{Error, Result};
use crate::fields::{InstanceField, LatentCode, PointSeeds, PointWork, ShapePrior};
use crate::geometry::{Mat3, Vec3};
use crate::meshing::{marching_cubes, sample_mesh_surface, TriangleMesh, DEFAULT_RESOLUTION};
use crate::rng;
use crate::synthdata::DepthImage;
use crate::training::LossWeights;

/// Where the latent code starts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentInit {
    /// Draw from a diagonal Gaussian fitted to the trained latents.
    #[default]
    Random,
    Zero,
    Given(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub iterations: usize,
    pub lr_shape: f64,
    pub lr_pose: f64,
    /// Fresh uniform free-space points per iteration for the eikonal term.
    pub eikonal_points: usize,
    pub latent_init: LatentInit,
    pub optimize_pose: bool,
    pub optimize_shape: bool,
    pub mesh_resolution: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            iterations: 30,
            lr_shape: 1e-3,
            lr_pose: 1e-2,
            eikonal_points: 512,
            latent_init: LatentInit::Random,
            optimize_pose: true,
            optimize_shape: true,
            mesh_resolution: DEFAULT_RESOLUTION,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    /// Accepts zero iterations, which returns the initialisation unchanged.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_shape > 0.0 && self.lr_pose > 0.0) {
            return Err(Error::InvalidArgument(
                "inference learning rates must be positive".into(),
            ));
        }
        if self.eikonal_points == 0 {
            return Err(Error::InvalidArgument("eikonal_points must be positive".into()));
        }
        if self.mesh_resolution < 8 {
            return Err(Error::InvalidArgument("mesh_resolution must be at least 8".into()));
        }
        Ok(())
    }
}

/// Per-iteration unweighted terms, evaluated before that iteration's update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub observation: f64,
    pub eikonal: f64,
    /// `‖z‖`.
    pub latent: f64,
    /// Weighted objective.
    pub total: f64,
}

/// Objective value and gradients at one (latent, pose) state.
#[derive(Clone, Debug, Default)]
pub struct InferenceObjective {
    pub terms: TraceRow,
    pub grad_latent: Vec<f64>,
    pub grad_rot6d: [f64; 6],
    pub grad_translation: [f64; 3],
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn nonfinite(term: &str, index: usize, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            term: term.into(),
            index,
            value,
        })
    }
}

/// `w0 · mean |Ψ(Rᵀ(x − t))| + w2 · mean ||∇Ψ(f)| − 1| + λ2 ‖z‖` over the
/// observed camera-frame points `x` and canonical free points `f`.
pub fn inference_objective(
    prior: &ShapePrior,
    observed: &[[f64; 3]],
    free: &[[f64; 3]],
    z: &LatentCode,
    pose: &Pose,
    weights: &LossWeights,
) -> Result<InferenceObjective> {
    if observed.is_empty() || free.is_empty() {
        return Err(Error::InvalidArgument(
            "observation and free points must be non-empty".into(),
        ));
    }
    let (r, pass) = rot6d_forward(&pose.rot6d)?;
    let t = pose.translation();
    let (deform, hpass) = prior.hyper_forward(z)?;
    let field = InstanceField::new(&prior.template, deform);
    let mut dg = field.deform.net().zero_grad();
    let mut work = PointWork::default();
    let mut terms = TraceRow::default();
    let mut g_r = Mat3::zeros();
    let mut g_t = Vec3::zeros();

    let inv_o = 1.0 / observed.len() as f64;
    for (i, x) in observed.iter().enumerate() {
        let y = Vec3::from(*x) - t;
        let xc = r.transpose() * y;
        let e = field.forward([xc.x, xc.y, xc.z], &mut work)?;
        terms.observation += nonfinite("observation", i, e.psi.abs())? * inv_o;
        let seeds = PointSeeds {
            psi: weights.sdf[0] * inv_o * sign(e.psi),
            ..Default::default()
        };
        let gx = Vec3::from(field.backward(&work, &e, &seeds, None, Some(&mut dg))?);
        g_r += y * gx.transpose();
        g_t -= r * gx;
    }

    let inv_f = 1.0 / free.len() as f64;
    for (i, x) in free.iter().enumerate() {
        let e = field.forward(*x, &mut work)?;
        let gn = e.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        terms.eikonal += nonfinite("eikonal", i, (gn - 1.0).abs())? * inv_f;
        if gn > 0.0 {
            let c = weights.sdf[2] * inv_f * sign(gn - 1.0) / gn;
            let seeds = PointSeeds {
                grad: e.grad.map(|g| c * g),
                ..Default::default()
            };
            field.backward(&work, &e, &seeds, None, Some(&mut dg))?;
        }
    }

    let zn = z.norm();
    terms.latent = nonfinite("latent", 0, zn)?;
    terms.total = weights.sdf[0] * terms.observation + weights.sdf[2] * terms.eikonal + weights.lambda2 * zn;
    let mut grad_latent = prior.hyper_backward(&hpass, &dg, None)?;
    if zn > 0.0 {
        crate::autodiff::axpy(&mut grad_latent, weights.lambda2 / zn, &z.z);
    }
    Ok(InferenceObjective {
        terms,
        grad_latent,
        grad_rot6d: rot6d_backward(&pass, &g_r),
        grad_translation: [g_t.x, g_t.y, g_t.z],
    })
}

/// Starting latent code for a config.
pub fn initial_latent(prior: &ShapePrior, init: &LatentInit, seed: u64) -> Result<LatentCode> {
    let n = prior.latent_dim();
    let z = match init {
        LatentInit::Zero => vec![0.0; n],
        LatentInit::Given(z) => {
            if z.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "given latent has {} entries, expected {n}",
                    z.len()
                )));
            }
            z.clone()
        }
        LatentInit::Random if prior.latents.is_empty() => vec![0.0; n],
        LatentInit::Random => {
            let (mean, std) = prior.latent_stats();
            let mut r = rng::stream(seed, "latent-init");
            mean.iter()
                .zip(&std)
                .map(|(&m, &s)| {
                    if s > 0.0 {
                        Normal::new(m, s).expect("positive std").sample(&mut r)
                    } else {
                        m
                    }
                })
                .collect()
        }
    };
    Ok(LatentCode::new(usize::MAX, z))
}

/// Optimised latent and pose with the loss trace.
#[derive(Clone, Debug, PartialEq)]
pub struct JointFit {
    pub pose: Pose,
    pub latent: LatentCode,
    pub trace: Vec<TraceRow>,
}

/// Adam over `(z, rot6d, t)` with all network weights frozen. The pose maps
/// canonical points into the camera, so observed points are pulled back by
/// `Rᵀ(x − t)`.
pub fn joint_optimize(
    prior: &ShapePrior,
    observed: &PointCloud,
    init: &Pose,
    weights: &LossWeights,
    config: &InferenceConfig,
) -> Result<JointFit> {
    config.validate()?;
    weights.validate()?;
    observed.validate()?;
    init.validate()?;
    let mut z = initial_latent(prior, &config.latent_init, config.seed)?;
    let mut pose = *init;
    let mut shape_opt = Adam::with_lr(z.dim(), config.lr_shape);
    let mut pose_opt = Adam::with_lr(9, config.lr_pose);
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut r = rng::substream(config.seed, "eikonal", it as u64);
        let free: Vec<[f64; 3]> = (0..config.eikonal_points)
            .map(|_| std::array::from_fn(|_| r.random_range(-1.0..=1.0)))
            .collect();
        let o = inference_objective(prior, &observed.points, &free, &z, &pose, weights).map_err(|e| abort(it, e))?;
        let grads_ok = o
            .grad_latent
            .iter()
            .chain(&o.grad_rot6d)
            .chain(&o.grad_translation)
            .all(|g| g.is_finite());
        if !grads_ok || !o.terms.total.is_finite() {
            return Err(Error::NumericAbort(format!(
                "iteration {it}: non-finite objective or gradient (total {})",
                o.terms.total
            )));
        }
        trace.push(o.terms);
        if config.optimize_shape {
            shape_opt.update(&mut z.z, &o.grad_latent);
        }
        if config.optimize_pose {
            let mut p: Vec<f64> = pose.rot6d.iter().chain(&pose.translation).copied().collect();
            let g: Vec<f64> = o.grad_rot6d.iter().chain(&o.grad_translation).copied().collect();
            pose_opt.update(&mut p, &g);
            pose.rot6d.copy_from_slice(&p[..6]);
            pose.translation.copy_from_slice(&p[6..]);
        }
        if !z
            .z
            .iter()
            .chain(&pose.rot6d)
            .chain(&pose.translation)
            .all(|v| v.is_finite())
        {
            return Err(Error::NumericAbort(format!(
                "iteration {it}: parameters became non-finite"
            )));
        }
    }
    if config.iterations > 0 {
        // return an orthonormal 6D representative
        pose = Pose::new(&pose.rotation()?, pose.translation());
    }
    Ok(JointFit { pose, latent: z, trace })
}

fn abort(it: usize, e: Error) -> Error {
    if e.is_numeric() {
        Error::NumericAbort(format!("iteration {it}: {e}"))
    } else {
        e
    }
}

/// Zero level set of an instance as a mesh in the canonical frame.
pub fn extract_mesh(prior: &ShapePrior, z: &LatentCode, resolution: usize) -> Result<TriangleMesh> {
    let field = prior.instance(z)?;
    marching_cubes(|x| field.value(x), resolution)
}

/// Everything a reconstruction produces. The mesh is in the canonical frame;
/// `pose` places it in the camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionResult {
    pub mesh: TriangleMesh,
    pub pose: Pose,
    pub latent: LatentCode,
    pub trace: Vec<TraceRow>,
}

#[derive(Serialize, Deserialize)]
struct PoseFile {
    /// Row-major 3×3.
    rotation: [f64; 9],
    translation: [f64; 3],
    rot6d: [f64; 6],
}

pub fn pose_to_json(pose: &Pose) -> Result<String> {
    let r = pose.rotation()?;
    let file = PoseFile {
        rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
        translation: pose.translation,
        rot6d: pose.rot6d,
    };
    Ok(serde_json::to_string_pretty(&file).expect("pose serializes"))
}

pub fn pose_from_json(text: &str) -> Result<Pose> {
    let f: PoseFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("pose JSON: {e}")))?;
    let r = Mat3::from_row_slice(&f.rotation);
    let pose = Pose::new(&r, Vec3::from(f.translation));
    pose.validate()?;
    Ok(pose)
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iteration,observation,eikonal,latent,total\n");
    for (i, t) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{}", t.observation, t.eikonal, t.latent, t.total);
    }
    s
}

impl ReconstructionResult {
    /// Writes `mesh.obj`, `pose.json`, `latent.bin` and `trace.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.mesh.write_obj(&dir.join("mesh.obj"))?;
        let pose = dir.join("pose.json");
        std::fs::write(&pose, pose_to_json(&self.pose)?).map_err(|e| Error::io(&pose, e))?;
        let mut tf = TensorFile::new();
        tf.insert("latent", vec![self.latent.dim()], self.latent.z.clone())?;
        tf.write(&dir.join("latent.bin"))?;
        let trace = dir.join("trace.csv");
        std::fs::write(&trace, trace_to_csv(&self.trace)).map_err(|e| Error::io(&trace, e))
    }
}

/// Depth image to mesh: lift, estimate pose, align frames, optimise,
/// extract. Holds the per-category state shared across observations.
pub struct Reconstructor<'a> {
    pub prior: &'a ShapePrior,
    pub weights: LossWeights,
    pub config: InferenceConfig,
    template: OnceLock<PointCloud>,
    cache: FrameCache,
}

/// Surface samples of the bare template field.
pub fn template_cloud(prior: &ShapePrior, resolution: usize, n: usize, seed: u64) -> Result<PointCloud> {
    let mesh = marching_cubes(|x| Ok(prior.template.forward(&x)?[0]), resolution)?;
    sample_mesh_surface(&mesh, n, seed)
}

impl<'a> Reconstructor<'a> {
    pub fn new(prior: &'a ShapePrior, weights: LossWeights, config: InferenceConfig) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        Ok(Reconstructor {
            prior,
            weights,
            config,
            template: OnceLock::new(),
            cache: FrameCache::new(),
        })
    }

    /// Complete template cloud in the prior's canonical frame, built once.
    pub fn template(&self) -> Result<&PointCloud> {
        if let Some(t) = self.template.get() {
            return Ok(t);
        }
        let cloud = template_cloud(self.prior, 64, 4000, rng::derive_seed(self.config.seed, "template", 0))?;
        Ok(self.template.get_or_init(|| cloud))
    }

    pub fn reconstruct(&self, depth: &DepthImage, estimator: &dyn PoseEstimator) -> Result<ReconstructionResult> {
        self.reconstruct_seeded(depth, estimator, self.config.seed)
    }

    /// [`Reconstructor::reconstruct`] with the inference seed replaced, for
    /// independent streams per observation.
    pub fn reconstruct_seeded(
        &self,
        depth: &DepthImage,
        estimator: &dyn PoseEstimator,
        seed: u64,
    ) -> Result<ReconstructionResult> {
        let config = InferenceConfig {
            seed,
            ..self.config.clone()
        };
        let observed = lift_depth(depth).map_err(|e| e.in_stage("lift_depth"))?;
        let est = estimator.estimate(&observed).map_err(|e| e.in_stage("estimate_pose"))?;
        let align = if estimator.shares_prior_frame() {
            crate::geometry::RigidTransform::identity()
        } else {
            let template = self.template().map_err(|e| e.in_stage("frame_align"))?;
            self.cache
                .get_or_compute(estimator, &self.prior.category, template)
                .map_err(|e| e.in_stage("frame_align"))?
        };
        let cam_to_prior = est
            .camera_to_canonical()
            .map(|c| align.compose(&c))
            .map_err(|e| e.in_stage("frame_align"))?;
        let init = Pose::from_camera_to_canonical(&cam_to_prior);
        let fit = joint_optimize(self.prior, &observed, &init, &self.weights, &config)
            .map_err(|e| e.in_stage("joint_optimize"))?;
        let mesh =
            extract_mesh(self.prior, &fit.latent, config.mesh_resolution).map_err(|e| e.in_stage("marching_cubes"))?;
        Ok(ReconstructionResult {
            mesh,
            pose: fit.pose,
            latent: fit.latent,
            trace: fit.trace,
        })
    }
}

/// One-shot [`Reconstructor::reconstruct`].
pub fn reconstruct(
    prior: &ShapePrior,
    depth: &DepthImage,
    estimator: &dyn PoseEstimator,
    weights: &LossWeights,
    config: &InferenceConfig,
) -> Result<ReconstructionResult> {
    Reconstructor::new(prior, *weights, config.clone())?.reconstruct(depth, estimator)
}

#[cfg(test)]
mod tests;

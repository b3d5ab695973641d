//! Training, reconstruction, evaluation and the pose ablation.

use std::path::{Path, PathBuf};

use difrecon_core::canonicalize::{Frame, PointCloud, Pose, PoseEstimator};
use difrecon_core::fields::ShapePrior;
use difrecon_core::inference::{pose_from_json, Reconstructor};
use difrecon_core::meshing::{sample_mesh_surface, TriangleMesh};
use difrecon_core::metrics::{evaluate_clouds, median, pose_error, EvalReport, ShapeRecord};
use difrecon_core::rng::{self, derive_seed};
use difrecon_core::synthdata::sample_shape;
use difrecon_core::training::{write_history_csv, Trainer};
use difrecon_core::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    to_pretty, write_resolved, AblatePoseConfig, EvalSettings, EvaluateConfig, ReconstructConfig, TrainRunConfig,
};
use crate::dataset::{Dataset, Observation};
use crate::error::{CliError, CliResult};
use crate::output::{create_dir, write_atomic, write_dir_atomic};

/// A shape whose processing failed, with the pipeline stage that failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub name: String,
    pub stage: String,
    pub error: String,
    pub numeric: bool,
}

impl Failure {
    fn new(name: &str, fallback_stage: &str, e: &CliError) -> Self {
        let (stage, numeric) = match e {
            CliError::Core(c) => (c.stage().unwrap_or(fallback_stage), c.is_numeric()),
            _ => (fallback_stage, false),
        };
        Failure {
            name: name.to_string(),
            stage: stage.to_string(),
            error: e.to_string(),
            numeric,
        }
    }
}

fn write_failures(dir: &Path, failures: &[Failure]) -> CliResult<()> {
    write_atomic(&dir.join("failures.json"), to_pretty(&failures).as_bytes())
}

fn partial(dir: &Path, failures: &[Failure], total: usize) -> CliResult<()> {
    if failures.is_empty() {
        return Ok(());
    }
    Err(CliError::Partial {
        failed: failures.len(),
        total,
        numeric: failures.iter().any(|f| f.numeric),
        manifest: dir.join("failures.json").display().to_string(),
    })
}

fn split<T>(results: Vec<Result<T, Failure>>) -> (Vec<T>, Vec<Failure>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(f) => failed.push(f),
        }
    }
    (ok, failed)
}

pub fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("prior.bin")
    } else {
        path.to_path_buf()
    }
}

pub fn load_prior(path: &Path) -> CliResult<ShapePrior> {
    Ok(ShapePrior::load(&checkpoint_file(path))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub shapes: usize,
    pub epochs: usize,
    pub initial_total: Option<f64>,
    pub final_total: Option<f64>,
}

fn save_checkpoint(trainer: &Trainer, out: &Path) -> CliResult<()> {
    let tmp = out.join(".checkpoint.tmp");
    trainer.save(&tmp)?;
    for entry in std::fs::read_dir(&tmp).map_err(|e| Error::io(&tmp, e))? {
        let from = entry.map_err(|e| Error::io(&tmp, e))?.path();
        let to = out.join(from.file_name().expect("entry has a name"));
        std::fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
    }
    std::fs::remove_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_history_csv(&out.join("loss.csv"), &trainer.history)?;
    Ok(())
}

/// Train a prior on a dataset; writes `prior.bin`, `train_state.bin` and
/// `loss.csv` to the output directory.
pub fn cmd_train(cfg: &TrainRunConfig) -> CliResult<TrainSummary> {
    let data = Dataset::open(&cfg.dataset)?;
    let entries = data.shapes(cfg.shapes);
    if entries.is_empty() {
        return Err(Error::InvalidArgument("dataset has no shapes".into()).into());
    }
    let sets = entries
        .par_iter()
        .map(|e| data.load_samples(e))
        .collect::<CliResult<Vec<_>>>()?;
    create_dir(&cfg.out)?;
    let resumable = cfg.out.join("prior.bin").exists() && cfg.out.join("train_state.bin").exists();
    let mut trainer = if cfg.resume && resumable {
        let t = Trainer::resume(&cfg.out, cfg.train.clone(), cfg.weights)?;
        if t.prior.latents.len() != sets.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} latents but {} shapes were requested",
                t.prior.latents.len(),
                sets.len()
            ))
            .into());
        }
        t
    } else {
        let mut r = rng::stream(cfg.train.seed, "init");
        let prior = ShapePrior::init(&data.manifest.category, cfg.prior.clone(), sets.len(), &mut r)?;
        Trainer::new(prior, cfg.train.clone(), cfg.weights)?
    };
    write_resolved(&cfg.out, "train", cfg)?;
    while trainer.epochs_done() < cfg.train.epochs {
        let rec = trainer.run_epoch(&sets)?;
        if cfg.checkpoint_every > 0 && trainer.epochs_done() % cfg.checkpoint_every == 0 {
            save_checkpoint(&trainer, &cfg.out)?;
        }
        if rec.epoch % 50 == 0 {
            eprintln!("epoch {:>5}  total {:.6e}", rec.epoch, rec.total);
        }
    }
    save_checkpoint(&trainer, &cfg.out)?;
    Ok(TrainSummary {
        shapes: sets.len(),
        epochs: trainer.epochs_done(),
        initial_total: trainer.history.first().map(|r| r.total),
        final_total: trainer.history.last().map(|r| r.total),
    })
}

/// Per-observation line of `reconstruct.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructRecord {
    pub name: String,
    pub shape: String,
    pub iterations: usize,
    pub initial_total: Option<f64>,
    pub final_total: Option<f64>,
    pub final_observation: Option<f64>,
    pub vertices: usize,
    pub triangles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructSummary {
    pub category: String,
    pub records: Vec<ReconstructRecord>,
    pub failures: Vec<Failure>,
}

fn reconstruct_one(
    cfg: &ReconstructConfig,
    data: &Dataset,
    rec: &Reconstructor<'_>,
    shared: Option<&dyn PoseEstimator>,
    obs: &Observation<'_>,
) -> CliResult<ReconstructRecord> {
    let depth = data.load_depth(obs.view).map_err(|e| in_stage(e, "load_input"))?;
    let oracle;
    let estimator: &dyn PoseEstimator = match shared {
        Some(e) => e,
        None => {
            let truth = Pose::from_object_to_camera(&depth.camera_from_canonical);
            oracle = cfg
                .estimator
                .oracle(truth, obs.index as u64)
                .map_err(|e| e.in_stage("estimate_pose"))?;
            &oracle
        }
    };
    let seed = derive_seed(cfg.inference.seed, "inference", obs.index as u64);
    let result = rec.reconstruct_seeded(&depth, estimator, seed)?;
    write_dir_atomic(&cfg.out.join(&obs.view.name), |dir| Ok(result.write(dir)?))?;
    Ok(ReconstructRecord {
        name: obs.view.name.clone(),
        shape: obs.shape.name.clone(),
        iterations: result.trace.len(),
        initial_total: result.trace.first().map(|t| t.total),
        final_total: result.trace.last().map(|t| t.total),
        final_observation: result.trace.last().map(|t| t.observation),
        vertices: result.mesh.vertices.len(),
        triangles: result.mesh.triangles.len(),
    })
}

fn in_stage(e: CliError, stage: &'static str) -> CliError {
    match e {
        CliError::Core(c) => CliError::Core(c.in_stage(stage)),
        other => other,
    }
}

/// Reconstruct every observation, writing what succeeded; failures are
/// returned rather than raised.
pub fn run_reconstruct(cfg: &ReconstructConfig) -> CliResult<ReconstructSummary> {
    let prior = load_prior(&cfg.checkpoint)?;
    let data = Dataset::open(&cfg.dataset)?;
    if prior.category != data.manifest.category {
        return Err(Error::InvalidArgument(format!(
            "prior is for '{}' but the dataset holds '{}'",
            prior.category, data.manifest.category
        ))
        .into());
    }
    let rec = Reconstructor::new(&prior, cfg.weights, cfg.inference.clone())?;
    let shared = cfg.estimator.shared(&rec)?;
    create_dir(&cfg.out)?;
    write_resolved(&cfg.out, "reconstruct", cfg)?;
    let observations = data.observations(cfg.shapes);
    let results: Vec<_> = observations
        .par_iter()
        .map(|obs| {
            reconstruct_one(cfg, &data, &rec, shared.as_deref(), obs)
                .map_err(|e| Failure::new(&obs.view.name, "reconstruct", &e))
        })
        .collect();
    let (records, failures) = split(results);
    let summary = ReconstructSummary {
        category: prior.category.clone(),
        records,
        failures,
    };
    write_atomic(&cfg.out.join("reconstruct.json"), to_pretty(&summary).as_bytes())?;
    write_failures(&cfg.out, &summary.failures)?;
    Ok(summary)
}

pub fn cmd_reconstruct(cfg: &ReconstructConfig) -> CliResult<ReconstructSummary> {
    let summary = run_reconstruct(cfg)?;
    let total = summary.records.len() + summary.failures.len();
    partial(&cfg.out, &summary.failures, total)?;
    Ok(summary)
}

/// Ground-truth surface cloud of a dataset shape in the canonical frame.
pub fn ground_truth_cloud(data: &Dataset, obs: &Observation<'_>, settings: &EvalSettings) -> CliResult<PointCloud> {
    let shape = data.load_shape(obs.shape)?;
    let seed = derive_seed(settings.seed, "ground-truth", obs.index as u64);
    let set = sample_shape(&shape, settings.gt_points, 1, seed)?;
    Ok(PointCloud::new(
        set.surface.iter().map(|s| s.x).collect(),
        Frame::Canonical,
    ))
}

fn evaluate_one(
    data: &Dataset,
    results: &Path,
    obs: &Observation<'_>,
    settings: &EvalSettings,
) -> CliResult<ShapeRecord> {
    let dir = results.join(&obs.view.name);
    let mesh = TriangleMesh::read_obj(&dir.join("mesh.obj"))?;
    if mesh.is_empty() {
        return Err(Error::Degenerate(format!("{}: reconstructed mesh is empty", obs.view.name)).into());
    }
    let pred = sample_mesh_surface(
        &mesh,
        settings.pred_points,
        derive_seed(settings.seed, "prediction", obs.index as u64),
    )?;
    let gt = ground_truth_cloud(data, obs, settings)?;
    let mut record = evaluate_clouds(&obs.view.name, &pred, &gt, settings.tau)?;
    let pose_path = dir.join("pose.json");
    let text = std::fs::read_to_string(&pose_path).map_err(|e| Error::io(&pose_path, e))?;
    let depth = data.load_depth(obs.view)?;
    let truth = Pose::from_object_to_camera(&depth.camera_from_canonical);
    record.pose_error = Some(pose_error(&pose_from_json(&text)?, &truth)?);
    Ok(record)
}

/// Evaluation outcome with the shapes that could not be scored.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: Option<EvalReport>,
    pub failures: Vec<Failure>,
}

pub fn run_evaluate(cfg: &EvaluateConfig) -> CliResult<Evaluation> {
    if !(cfg.eval.tau > 0.0) || cfg.eval.pred_points == 0 || cfg.eval.gt_points == 0 {
        return Err(Error::InvalidArgument("tau and point counts must be positive".into()).into());
    }
    let data = Dataset::open(&cfg.dataset)?;
    let observations: Vec<_> = data
        .observations(None)
        .into_iter()
        .filter(|o| cfg.results.join(&o.view.name).is_dir())
        .collect();
    if observations.is_empty() {
        return Err(Error::InvalidArgument(format!("no results for this dataset in {}", cfg.results.display())).into());
    }
    create_dir(&cfg.out)?;
    write_resolved(&cfg.out, "evaluate", cfg)?;
    let results: Vec<_> = observations
        .par_iter()
        .map(|o| {
            evaluate_one(&data, &cfg.results, o, &cfg.eval).map_err(|e| Failure::new(&o.view.name, "evaluate", &e))
        })
        .collect();
    let (records, failures) = split(results);
    let report = if records.is_empty() {
        None
    } else {
        Some(EvalReport::from_records(
            &data.manifest.category,
            cfg.eval.tau,
            records,
        )?)
    };
    if let Some(r) = &report {
        write_atomic(
            &cfg.out.join("eval_report.json"),
            format!("{}\n", r.to_json()).as_bytes(),
        )?;
        write_atomic(&cfg.out.join("eval_table.txt"), r.table().as_bytes())?;
    }
    write_failures(&cfg.out, &failures)?;
    Ok(Evaluation { report, failures })
}

pub fn cmd_evaluate(cfg: &EvaluateConfig) -> CliResult<EvalReport> {
    let eval = run_evaluate(cfg)?;
    let total = eval.failures.len() + eval.report.as_ref().map_or(0, |r| r.records.len());
    partial(&cfg.out, &eval.failures, total)?;
    Ok(eval.report.expect("some records when nothing failed"))
}

/// One observation scored with and without pose optimisation. Missing
/// scores (failed runs) count as F1 = 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedScore {
    pub name: String,
    pub f1_optimized: f64,
    pub f1_frozen: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub optimized: Option<EvalReport>,
    pub frozen: Option<EvalReport>,
    pub pairs: Vec<PairedScore>,
    /// Observations where the optimized F1 is at least the frozen F1.
    pub optimized_not_worse: usize,
    /// Observations where the optimized F1 is strictly higher.
    pub optimized_better: usize,
    pub median_f1_optimized: f64,
    pub median_f1_frozen: f64,
    pub median_pose_error_deg: Option<f64>,
    pub median_pose_error_trans: Option<f64>,
}

fn f1_of(report: &Option<EvalReport>, name: &str) -> f64 {
    report
        .as_ref()
        .and_then(|r| r.records.iter().find(|s| s.name == name))
        .map_or(0.0, |s| s.f1)
}

/// Reconstruct and evaluate twice, with pose optimisation off and on, on
/// identical inputs and seeds.
pub fn cmd_ablate_pose(cfg: &AblatePoseConfig) -> CliResult<AblationReport> {
    create_dir(&cfg.out)?;
    write_resolved(&cfg.out, "ablate-pose", cfg)?;
    let mut failures = Vec::new();
    let mut reports = Vec::new();
    for (arm, optimize_pose) in [("optimized", true), ("frozen", false)] {
        let rc = cfg.arm(optimize_pose, cfg.out.join(arm));
        let summary = run_reconstruct(&rc)?;
        failures.extend(summary.failures);
        let ec = EvaluateConfig {
            dataset: cfg.dataset.clone(),
            results: rc.out.clone(),
            out: cfg.out.join(format!("eval_{arm}")),
            eval: cfg.eval.clone(),
        };
        let eval = run_evaluate(&ec)?;
        failures.extend(eval.failures);
        reports.push(eval.report);
    }
    let frozen = reports.pop().expect("two arms");
    let optimized = reports.pop().expect("two arms");
    let data = Dataset::open(&cfg.dataset)?;
    let pairs: Vec<PairedScore> = data
        .observations(cfg.shapes)
        .iter()
        .map(|o| PairedScore {
            name: o.view.name.clone(),
            f1_optimized: f1_of(&optimized, &o.view.name),
            f1_frozen: f1_of(&frozen, &o.view.name),
        })
        .collect();
    let report = AblationReport {
        optimized_not_worse: pairs.iter().filter(|p| p.f1_optimized >= p.f1_frozen).count(),
        optimized_better: pairs.iter().filter(|p| p.f1_optimized > p.f1_frozen).count(),
        median_f1_optimized: median(&pairs.iter().map(|p| p.f1_optimized).collect::<Vec<_>>()),
        median_f1_frozen: median(&pairs.iter().map(|p| p.f1_frozen).collect::<Vec<_>>()),
        median_pose_error_deg: optimized.as_ref().and_then(|r| r.median_pose_error_deg),
        median_pose_error_trans: optimized.as_ref().and_then(|r| r.median_pose_error_trans),
        pairs,
        optimized,
        frozen,
    };
    write_atomic(&cfg.out.join("ablation.json"), to_pretty(&report).as_bytes())?;
    write_atomic(&cfg.out.join("ablation_table.txt"), ablation_table(&report).as_bytes())?;
    write_failures(&cfg.out, &failures)?;
    partial(&cfg.out, &failures, 2 * report.pairs.len())?;
    Ok(report)
}

pub fn ablation_table(r: &AblationReport) -> String {
    let w = r.pairs.iter().map(|p| p.name.len()).chain([6]).max().unwrap_or(6);
    let mut s = format!("{:<w$}  {:>10}  {:>10}\n", "shape", "F1 frozen", "F1 opt");
    for p in &r.pairs {
        s.push_str(&format!(
            "{:<w$}  {:>10.4}  {:>10.4}\n",
            p.name, p.f1_frozen, p.f1_optimized
        ));
    }
    s.push_str(&format!(
        "{:<w$}  {:>10.4}  {:>10.4}\n",
        "median", r.median_f1_frozen, r.median_f1_optimized
    ));
    s
}

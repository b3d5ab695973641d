//! Run configuration: JSON documents with defaults, file overrides and
//! `--set key=value` overrides, all checked against the typed schema.

use std::path::{Path, PathBuf};

use difrecon_core::canonicalize::{IcpEstimator, NoisyOracle, PcaEstimator, Pose, PoseEstimator};
use difrecon_core::fields::PriorConfig;
use difrecon_core::inference::{InferenceConfig, Reconstructor};
use difrecon_core::metrics::DEFAULT_TAU;
use difrecon_core::training::{LossWeights, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};
use crate::output::write_atomic;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub out: PathBuf,
    pub category: String,
    pub count: usize,
    pub seed: u64,
    pub surface_points: usize,
    pub free_points: usize,
    pub views_per_shape: usize,
    pub image_size: usize,
    pub fov_deg: f64,
    pub camera_distance: f64,
    pub depth_noise: f64,
    /// Fraction of each object mask hidden by a rectangle; 0 disables.
    pub occlusion: f64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            out: PathBuf::from("data"),
            category: "sphere".into(),
            count: 10,
            seed: 0,
            surface_points: 4000,
            free_points: 4000,
            views_per_shape: 1,
            image_size: 64,
            fov_deg: 50.0,
            camera_distance: 2.5,
            depth_noise: 0.0,
            occlusion: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    /// Use only the first `n` shapes of the dataset.
    pub shapes: Option<usize>,
    pub prior: PriorConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    /// Continue from the checkpoint in `out` if one exists.
    pub resume: bool,
    /// Save a checkpoint every `n` epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            dataset: PathBuf::from("data"),
            out: PathBuf::from("prior"),
            shapes: None,
            prior: PriorConfig::desk(),
            train: TrainConfig::desk(),
            weights: LossWeights::desk(),
            resume: false,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Pca,
    Icp,
    NoisyOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Noisy oracle rotation error in degrees.
    pub rotation_noise_deg: f64,
    /// Noisy oracle translation error.
    pub translation_noise: f64,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            kind: EstimatorKind::NoisyOracle,
            rotation_noise_deg: 10.0,
            translation_noise: 0.05,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    /// Estimator shared by all observations, or `None` for the oracle,
    /// which needs each observation's true pose.
    pub fn shared(&self, rec: &Reconstructor<'_>) -> difrecon_core::Result<Option<Box<dyn PoseEstimator>>> {
        Ok(match self.kind {
            EstimatorKind::Pca => Some(Box::new(PcaEstimator)),
            EstimatorKind::Icp => Some(Box::new(IcpEstimator::new(rec.template()?)?)),
            EstimatorKind::NoisyOracle => None,
        })
    }

    pub fn oracle(&self, truth: Pose, index: u64) -> difrecon_core::Result<NoisyOracle> {
        NoisyOracle::new(
            truth,
            self.rotation_noise_deg,
            self.translation_noise,
            difrecon_core::rng::derive_seed(self.seed, "oracle-noise", index),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub tau: f64,
    pub pred_points: usize,
    pub gt_points: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            tau: DEFAULT_TAU,
            pred_points: 30_000,
            gt_points: 30_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructConfig {
    /// `prior.bin` or the directory holding it.
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    /// Use only the first `n` shapes of the dataset.
    pub shapes: Option<usize>,
    pub estimator: EstimatorConfig,
    pub inference: InferenceConfig,
    pub weights: LossWeights,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig {
            checkpoint: PathBuf::from("prior"),
            dataset: PathBuf::from("data"),
            out: PathBuf::from("results"),
            shapes: None,
            estimator: EstimatorConfig::default(),
            inference: InferenceConfig::default(),
            weights: LossWeights::desk(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub dataset: PathBuf,
    /// Output directory of a reconstruct run.
    pub results: PathBuf,
    pub out: PathBuf,
    pub eval: EvalSettings,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            dataset: PathBuf::from("data"),
            results: PathBuf::from("results"),
            out: PathBuf::from("eval"),
            eval: EvalSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblatePoseConfig {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub shapes: Option<usize>,
    pub estimator: EstimatorConfig,
    pub inference: InferenceConfig,
    pub weights: LossWeights,
    pub eval: EvalSettings,
}

impl Default for AblatePoseConfig {
    fn default() -> Self {
        AblatePoseConfig {
            checkpoint: PathBuf::from("prior"),
            dataset: PathBuf::from("data"),
            out: PathBuf::from("ablation"),
            shapes: None,
            estimator: EstimatorConfig::default(),
            inference: InferenceConfig::default(),
            weights: LossWeights::desk(),
            eval: EvalSettings::default(),
        }
    }
}

impl AblatePoseConfig {
    /// The reconstruct run with pose optimisation switched on or off.
    pub fn arm(&self, optimize_pose: bool, out: PathBuf) -> ReconstructConfig {
        ReconstructConfig {
            checkpoint: self.checkpoint.clone(),
            dataset: self.dataset.clone(),
            out,
            shapes: self.shapes,
            estimator: self.estimator.clone(),
            inference: InferenceConfig {
                optimize_pose,
                ..self.inference.clone()
            },
            weights: self.weights,
        }
    }
}

/// Parse `key=value`. The value is read as JSON when it parses, otherwise
/// as a bare string, so `--set category=car` and `--set train.lr=1e-3`
/// both work.
pub fn parse_override(s: &str) -> CliResult<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override '{s}' is not key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Usage(format!("override key '{key}' is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(doc: &mut Value, path: &[String], value: Value) -> CliResult<()> {
    let mut cur = doc;
    for (i, k) in path.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("'{}' is not a section", path[..i].join("."))))?;
        let slot = obj
            .get_mut(k)
            .ok_or_else(|| CliError::Usage(format!("unknown config key '{}'", path[..=i].join("."))))?;
        if i + 1 == path.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Ok(())
}

/// Defaults, then the optional config file, then each override in order.
pub fn resolve<T: Default + Serialize + DeserializeOwned>(file: Option<&Path>, overrides: &[String]) -> CliResult<T> {
    let mut doc = serde_json::to_value(T::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not JSON: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(CliError::Usage(format!(
                "config {} must be a JSON object",
                path.display()
            )));
        }
        merge(&mut doc, patch);
    }
    for o in overrides {
        let (path, value) = parse_override(o)?;
        set_path(&mut doc, &path, value)?;
    }
    serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

/// `config.json` in `dir`: command, tool version and the resolved config.
pub fn write_resolved(dir: &Path, command: &str, config: &impl Serialize) -> CliResult<()> {
    let doc = serde_json::json!({
        "tool": "difrecon",
        "version": VERSION,
        "command": command,
        "config": config,
    });
    write_atomic(&dir.join("config.json"), to_pretty(&doc).as_bytes())
}

pub fn to_pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LatentCode, PriorConfig, ShapePrior};
use crate::autodiff::TensorFile;
use crate::error::{Error, Result};

/// JSON sidecar written next to a prior checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorMeta {
    pub category: String,
    pub latent_dim: usize,
    pub config: PriorConfig,
    pub template_layers: Vec<usize>,
    pub deform_layers: Vec<usize>,
    pub instances: usize,
    /// Loss weights and seed of the run that produced the weights.
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

fn layer_widths(specs: &[crate::autodiff::LayerSpec]) -> Vec<usize> {
    let mut w = vec![specs[0].in_dim];
    w.extend(specs.iter().map(|s| s.out_dim));
    w
}

impl ShapePrior {
    pub fn meta(&self, training: Option<serde_json::Value>) -> PriorMeta {
        PriorMeta {
            category: self.category.clone(),
            latent_dim: self.latent_dim(),
            config: self.config.clone(),
            template_layers: layer_widths(self.template.specs()),
            deform_layers: layer_widths(&self.deform_specs),
            instances: self.latents.len(),
            training,
        }
    }

    pub fn to_tensors(&self, file: &mut TensorFile) -> Result<()> {
        file.insert_mlp("template", &self.template)?;
        for (k, h) in self.hyper.iter().enumerate() {
            file.insert_mlp(&format!("hyper{k}"), h)?;
        }
        let n = self.latent_dim();
        let mut table = Vec::with_capacity(self.latents.len() * n);
        let mut ids = Vec::with_capacity(self.latents.len());
        for l in &self.latents {
            table.extend_from_slice(&l.z);
            ids.push(l.id as f64);
        }
        file.insert("latents", vec![self.latents.len(), n], table)?;
        file.insert("latent_ids", vec![self.latents.len()], ids)?;
        Ok(())
    }

    pub fn from_tensors(meta: &PriorMeta, file: &TensorFile) -> Result<Self> {
        let template = file.read_mlp("template")?;
        let n_deform = meta.deform_layers.len().saturating_sub(1);
        let mut hyper = Vec::with_capacity(n_deform);
        for k in 0..n_deform {
            hyper.push(file.read_mlp(&format!("hyper{k}"))?);
        }
        let mut dims = vec![3];
        dims.extend_from_slice(&meta.config.deform_hidden);
        dims.push(4);
        if dims != meta.deform_layers {
            return Err(Error::Format("deform layer sizes disagree with config".into()));
        }
        let deform_specs = crate::autodiff::LayerSpec::siren_stack(&dims, meta.config.omega0);
        for (k, h) in hyper.iter().enumerate() {
            if h.out_dim() != deform_specs[k].num_params() || h.in_dim() != meta.latent_dim {
                return Err(Error::Format(format!(
                    "hypernetwork {k} does not match deformation layer {k}"
                )));
            }
        }
        let table = file.require("latents")?;
        let ids = file.require("latent_ids")?;
        let n = meta.latent_dim;
        if table.shape.len() != 2 || table.shape[1] != n || ids.data.len() != table.shape[0] {
            return Err(Error::Format("latent table has the wrong shape".into()));
        }
        let latents = table
            .data
            .chunks(n)
            .zip(&ids.data)
            .map(|(z, id)| LatentCode::new(*id as usize, z.to_vec()))
            .collect();
        Ok(ShapePrior {
            category: meta.category.clone(),
            config: meta.config.clone(),
            template,
            hyper,
            deform_specs,
            latents,
        })
    }

    /// Write `<path>` (binary) and `<path>.json` (sidecar).
    pub fn save(&self, path: &Path, training: Option<serde_json::Value>) -> Result<()> {
        let mut file = TensorFile::new();
        self.to_tensors(&mut file)?;
        file.write(path)?;
        let meta = serde_json::to_string_pretty(&self.meta(training)).map_err(|e| Error::Format(e.to_string()))?;
        let side = sidecar_path(path);
        std::fs::write(&side, meta).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: PriorMeta =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
        let file = TensorFile::read(path)?;
        Self::from_tensors(&meta, &file)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

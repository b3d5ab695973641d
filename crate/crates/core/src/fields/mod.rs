//! Deformed implicit field shape prior.
//!
//! An instance SDF is `T(x + v(x)) + Δs(x)` where `T` is a category-wide
//! template network and `(v, Δs) = D(x)` comes from a deformation network
//! whose weights are predicted from the instance latent code by one small
//! rectifier network per deformation layer.

mod checkpoint;
mod composed;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{FieldEval, LayerSpec, Mlp, Tape};
use crate::error::{structural, Result};

pub use checkpoint::{sidecar_path, PriorMeta};
pub use composed::{InstanceField, PointEval, PointSeeds, PointWork};

/// Anything that can be evaluated as a signed distance field with gradient.
pub trait SdfField {
    fn eval(&self, x: [f64; 3]) -> Result<FieldEval>;
}

impl SdfField for Mlp {
    fn eval(&self, x: [f64; 3]) -> Result<FieldEval> {
        self.eval_with_spatial_grad(x)
    }
}

/// Per-instance shape embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub id: usize,
    pub z: Vec<f64>,
}

impl LatentCode {
    pub fn new(id: usize, z: Vec<f64>) -> Self {
        LatentCode { id, z }
    }

    pub fn zeros(id: usize, dim: usize) -> Self {
        LatentCode { id, z: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn norm(&self) -> f64 {
        self.z.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Weights of the deformation network `D: R³ → (v, Δs)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformWeights(pub Mlp);

impl DeformWeights {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.in_dim() != 3 || net.out_dim() != 4 {
            return Err(structural(format!(
                "deformation network must map 3 -> 4, got {} -> {}",
                net.in_dim(),
                net.out_dim()
            )));
        }
        Ok(DeformWeights(net))
    }

    pub fn net(&self) -> &Mlp {
        &self.0
    }
}

/// Deformation output at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformEval {
    pub v: [f64; 3],
    pub delta_s: f64,
    /// `∂v_k/∂x_c`, row-major.
    pub jac_v: [f64; 9],
}

/// Network sizes of a prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub latent_dim: usize,
    pub template_hidden: Vec<usize>,
    pub deform_hidden: Vec<usize>,
    pub hyper_hidden: usize,
    pub omega0: f64,
    /// Multiplier on the initial output layer of `D`, so training starts
    /// close to the bare template.
    pub deform_output_scale: f64,
    /// Multiplier on the initial output weights of each hypernetwork.
    pub hyper_weight_scale: f64,
    /// Standard deviation of the initial latent codes.
    pub latent_init_std: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            latent_dim: 128,
            template_hidden: vec![128, 128, 128],
            deform_hidden: vec![128, 128, 128],
            hyper_hidden: 256,
            omega0: 30.0,
            deform_output_scale: 1e-2,
            hyper_weight_scale: 1e-1,
            latent_init_std: 0.01,
        }
    }
}

impl PriorConfig {
    /// Small networks that train in minutes on one CPU core.
    pub fn desk() -> Self {
        PriorConfig {
            latent_dim: 8,
            template_hidden: vec![32, 32],
            deform_hidden: vec![16, 16],
            hyper_hidden: 32,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hyper_hidden == 0 {
            return Err(structural("latent_dim and hyper_hidden must be positive"));
        }
        if self.template_hidden.contains(&0) || self.deform_hidden.contains(&0) {
            return Err(structural("hidden widths must be positive"));
        }
        if !(self.omega0 > 0.0) {
            return Err(structural("omega0 must be positive"));
        }
        Ok(())
    }
}

/// Template network, hypernetworks and the latent table of one category.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapePrior {
    pub category: String,
    pub config: PriorConfig,
    pub template: Mlp,
    /// One network per deformation layer; network `k` outputs the flattened
    /// weight and bias of layer `k`.
    pub hyper: Vec<Mlp>,
    pub deform_specs: Vec<LayerSpec>,
    pub latents: Vec<LatentCode>,
}

/// Hypernetwork forward state for one latent, needed to push deformation
/// weight gradients back to the hypernetworks and the latent.
#[derive(Clone, Debug, Default)]
pub struct HyperPass {
    tapes: Vec<Tape>,
}

impl ShapePrior {
    /// Freshly initialised prior with `instances` latent codes drawn from
    /// `N(0, latent_init_std²)`.
    pub fn init(category: &str, config: PriorConfig, instances: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut tdims = vec![3];
        tdims.extend_from_slice(&config.template_hidden);
        tdims.push(1);
        let template = Mlp::siren(&tdims, config.omega0, rng)?;

        let mut ddims = vec![3];
        ddims.extend_from_slice(&config.deform_hidden);
        ddims.push(4);
        let deform_init = Mlp::siren(&ddims, config.omega0, rng)?;
        let deform_specs = deform_init.specs().to_vec();

        let n_layers = deform_specs.len();
        let mut hyper = Vec::with_capacity(n_layers);
        for (k, spec) in deform_specs.iter().enumerate() {
            let mut net = Mlp::relu(&[config.latent_dim, config.hyper_hidden, spec.num_params()], rng)?;
            let last = net.num_layers() - 1;
            let range = net.layer_range(last);
            let n_w = net.specs()[last].out_dim * net.specs()[last].in_dim;
            let mut target: Vec<f64> = deform_init.params()[deform_init.layer_range(k)].to_vec();
            if k + 1 == n_layers {
                target.iter_mut().for_each(|t| *t *= config.deform_output_scale);
            }
            let p = net.params_mut();
            p[range.start..range.start + n_w]
                .iter_mut()
                .for_each(|w| *w *= config.hyper_weight_scale);
            p[range.start + n_w..range.end].copy_from_slice(&target);
            hyper.push(net);
        }

        let normal = Normal::new(0.0, config.latent_init_std).map_err(|e| structural(format!("latent init: {e}")))?;
        let latents = (0..instances)
            .map(|id| LatentCode::new(id, (0..config.latent_dim).map(|_| normal.sample(rng)).collect()))
            .collect();

        Ok(ShapePrior {
            category: category.to_string(),
            config,
            template,
            hyper,
            deform_specs,
            latents,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_latent(&self, z: &LatentCode) -> Result<()> {
        if z.dim() != self.latent_dim() {
            return Err(structural(format!(
                "latent has {} entries, prior expects {}",
                z.dim(),
                self.latent_dim()
            )));
        }
        if z.z.iter().any(|v| !v.is_finite()) {
            return Err(structural("latent code has non-finite entries"));
        }
        Ok(())
    }

    /// Template SDF with spatial gradient.
    pub fn template_eval(&self, x: [f64; 3]) -> Result<FieldEval> {
        self.template.eval_with_spatial_grad(x)
    }

    /// Deformation network weights predicted from `z`.
    pub fn hyper_weights(&self, z: &LatentCode) -> Result<DeformWeights> {
        Ok(self.hyper_forward(z)?.0)
    }

    /// [`ShapePrior::hyper_weights`] plus the state needed for gradients.
    pub fn hyper_forward(&self, z: &LatentCode) -> Result<(DeformWeights, HyperPass)> {
        self.check_latent(z)?;
        let mut params = Vec::new();
        let mut pass = HyperPass {
            tapes: Vec::with_capacity(self.hyper.len()),
        };
        for net in &self.hyper {
            let mut tape = Tape::default();
            net.forward_jet(&z.z, &[], 0, &mut tape)?;
            params.extend_from_slice(tape.output());
            pass.tapes.push(tape);
        }
        Ok((DeformWeights::new(Mlp::new(self.deform_specs.clone(), params)?)?, pass))
    }

    /// Push a gradient over the deformation weights back through the
    /// hypernetworks. Hypernetwork gradients go into `hyper_grads` (one buffer
    /// per network) when given; the latent gradient is returned.
    pub fn hyper_backward(
        &self,
        pass: &HyperPass,
        deform_grad: &[f64],
        mut hyper_grads: Option<&mut [Vec<f64>]>,
    ) -> Result<Vec<f64>> {
        let total: usize = self.deform_specs.iter().map(LayerSpec::num_params).sum();
        if deform_grad.len() != total {
            return Err(structural("deformation gradient has the wrong length"));
        }
        let mut gz = vec![0.0; self.latent_dim()];
        let mut off = 0;
        for (k, net) in self.hyper.iter().enumerate() {
            let n = self.deform_specs[k].num_params();
            let g = hyper_grads.as_deref_mut().map(|hg| hg[k].as_mut_slice());
            let (gin, _) = net.backward_jet(&pass.tapes[k], &deform_grad[off..off + n], &[], g)?;
            crate::autodiff::axpy(&mut gz, 1.0, &gin);
            off += n;
        }
        Ok(gz)
    }

    /// Instance field for a latent code.
    pub fn instance(&self, z: &LatentCode) -> Result<InstanceField<'_>> {
        Ok(InstanceField::new(&self.template, self.hyper_weights(z)?))
    }

    /// Composed SDF `T(x + v) + Δs` with its spatial gradient.
    pub fn instance_sdf(&self, z: &LatentCode, x: [f64; 3]) -> Result<FieldEval> {
        self.instance(z)?.eval(x)
    }

    /// Total trainable parameters in template and hypernetworks.
    pub fn num_network_params(&self) -> usize {
        self.template.num_params() + self.hyper.iter().map(Mlp::num_params).sum::<usize>()
    }

    /// Per-coordinate mean and standard deviation of the trained latents.
    pub fn latent_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.latent_dim();
        let count = self.latents.len().max(1) as f64;
        let mut mean = vec![0.0; n];
        for l in &self.latents {
            crate::autodiff::axpy(&mut mean, 1.0 / count, &l.z);
        }
        let mut var = vec![0.0; n];
        for l in &self.latents {
            for i in 0..n {
                var[i] += (l.z[i] - mean[i]).powi(2) / count;
            }
        }
        (mean, var.into_iter().map(f64::sqrt).collect())
    }
}

/// Evaluate `D` at `x`.
pub fn deform_eval(weights: &DeformWeights, x: [f64; 3]) -> Result<DeformEval> {
    let mut tape = Tape::default();
    weights
        .net()
        .forward_jet(&x, &crate::autodiff::IDENTITY3, 3, &mut tape)?;
    let o = tape.output();
    let j = tape.output_jac();
    let mut jac_v = [0.0; 9];
    jac_v.copy_from_slice(&j[..9]);
    Ok(DeformEval {
        v: [o[0], o[1], o[2]],
        delta_s: o[3],
        jac_v,
    })
}

#[cfg(test)]
mod tests;

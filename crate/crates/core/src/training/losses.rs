use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{axpy, GradientBundle};
use crate::error::{structural, Error, Result};
use crate::fields::{DeformWeights, InstanceField, LatentCode, PointSeeds, PointWork, SdfField, ShapePrior};
use crate::synthdata::ShapeSampleSet;

/// Weights of every loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Value, normal alignment, eikonal and free-space terms of the SDF loss.
    pub sdf: [f64; 4],
    /// Template normal regularizer.
    pub lambda1: f64,
    /// Latent norm.
    pub lambda2: f64,
    /// Deformation smoothness.
    pub lambda3: f64,
    /// Correction magnitude.
    pub lambda4: f64,
    /// Sharpness of the free-space penalty `exp(-delta |s|)`.
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sdf: [3e3, 1e2, 5e1, 5e2],
            lambda1: 1e2,
            lambda2: 5.0,
            lambda3: 1e2,
            lambda4: 1e6,
            delta: 100.0,
        }
    }
}

impl LossWeights {
    /// Per-category regularizer weights.
    pub fn for_category(category: &str) -> Self {
        let (lambda2, lambda3) = match category {
            "plane" => (2.0, 1e2),
            "chair" => (5.0, 5e1),
            _ => (5.0, 1e2),
        };
        LossWeights {
            lambda2,
            lambda3,
            ..Self::default()
        }
    }

    /// Published weights with a softer correction penalty, which small
    /// desk-scale priors need for the latent code to shape the deformation.
    pub fn desk() -> Self {
        LossWeights {
            lambda4: 1e2,
            ..Self::default()
        }
    }

    /// Every weight zero; start point for selecting single terms.
    pub fn zero() -> Self {
        LossWeights {
            sdf: [0.0; 4],
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            delta: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .sdf
            .iter()
            .chain([&self.lambda1, &self.lambda2, &self.lambda3, &self.lambda4]);
        if all.clone().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if !(self.delta >= 10.0 && self.delta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "delta must be at least 10, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Unweighted loss terms, each a mean over its point set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sdf: [f64; 4],
    pub normal: f64,
    pub smooth: f64,
    pub correction: f64,
    pub latent: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 8] = [
        "sdf_value",
        "sdf_normal",
        "sdf_eikonal",
        "sdf_free",
        "normal",
        "smooth",
        "correction",
        "latent",
    ];

    pub fn as_array(&self) -> [f64; 8] {
        [
            self.sdf[0],
            self.sdf[1],
            self.sdf[2],
            self.sdf[3],
            self.normal,
            self.smooth,
            self.correction,
            self.latent,
        ]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        LossTerms {
            sdf: [a[0], a[1], a[2], a[3]],
            normal: a[4],
            smooth: a[5],
            correction: a[6],
            latent: a[7],
        }
    }

    /// Weighted SDF loss.
    pub fn sdf_total(&self, w: &LossWeights) -> f64 {
        (0..4).map(|i| w.sdf[i] * self.sdf[i]).sum()
    }

    /// `self + scale * other`, term by term.
    pub fn add_scaled(&mut self, scale: f64, other: &LossTerms) {
        let mut a = self.as_array();
        for (x, y) in a.iter_mut().zip(other.as_array()) {
            *x += scale * y;
        }
        *self = Self::from_array(a);
    }
}

/// Weighted sum of all terms.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> f64 {
    terms.sdf_total(w)
        + w.lambda1 * terms.normal
        + w.lambda2 * terms.latent
        + w.lambda3 * terms.smooth
        + w.lambda4 * terms.correction
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// `1 - <g/|g|, n>`, with value 1 at `g = 0`.
fn cos_loss(g: &[f64; 3], n: &[f64; 3]) -> f64 {
    let gn = norm3(g);
    if gn > 0.0 {
        1.0 - dot3(g, n) / gn
    } else {
        1.0
    }
}

/// Gradient of [`cos_loss`] with respect to `g`, scaled by `c`, added to `out`.
fn cos_loss_grad(g: &[f64; 3], n: &[f64; 3], c: f64, out: &mut [f64; 3]) {
    let gn = norm3(g);
    if gn > 0.0 {
        let gdn = dot3(g, n) / (gn * gn);
        for k in 0..3 {
            out[k] -= c * (n[k] - gdn * g[k]) / gn;
        }
    }
}

fn check(term: &str, index: usize, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            term: term.to_string(),
            index,
            value,
        })
    }
}

fn check_samples(samples: &ShapeSampleSet) -> Result<()> {
    if samples.surface.is_empty() || samples.free.is_empty() {
        return Err(structural("sample set needs surface and free points"));
    }
    samples.validate()
}

/// The four unweighted SDF terms of any field on a sample set. Surface
/// points carry target 0; the value and eikonal terms run over all points,
/// the normal term `1 - cos(∇Ψ, n)` over surface points and the free-space
/// term over free points.
pub fn loss_sdf(field: &impl SdfField, samples: &ShapeSampleSet, weights: &LossWeights) -> Result<[f64; 4]> {
    check_samples(samples)?;
    let ns = samples.surface.len() as f64;
    let nf = samples.free.len() as f64;
    let mut t = [0.0; 4];
    for (i, s) in samples.surface.iter().enumerate() {
        let e = field.eval(s.x)?;
        t[0] += check("sdf_value", i, e.value.abs())?;
        t[1] += check("sdf_normal", i, cos_loss(&e.spatial_grad, &s.n))?;
        t[2] += check("sdf_eikonal", i, (norm3(&e.spatial_grad) - 1.0).abs())?;
    }
    let off = samples.surface.len();
    for (i, s) in samples.free.iter().enumerate() {
        let e = field.eval(s.x)?;
        t[0] += check("sdf_value", off + i, (e.value - s.s).abs())?;
        t[2] += check("sdf_eikonal", off + i, (norm3(&e.spatial_grad) - 1.0).abs())?;
        t[3] += check("sdf_free", off + i, (-weights.delta * e.value.abs()).exp())?;
    }
    t[0] /= ns + nf;
    t[1] /= ns;
    t[2] /= ns + nf;
    t[3] /= nf;
    Ok(t)
}

/// Mean of `1 - cos(∇T(x + v(x)), n)` over the surface points.
pub fn loss_normal(prior: &ShapePrior, z: &LatentCode, samples: &ShapeSampleSet) -> Result<f64> {
    check_samples(samples)?;
    let field = prior.instance(z)?;
    let mut work = PointWork::default();
    let mut acc = 0.0;
    for (i, s) in samples.surface.iter().enumerate() {
        let e = field.forward(s.x, &mut work)?;
        acc += check("normal", i, cos_loss(&e.grad_t, &s.n))?;
    }
    Ok(acc / samples.surface.len() as f64)
}

fn deform_mean(
    weights: &DeformWeights,
    points: &[[f64; 3]],
    f: impl Fn(&crate::fields::DeformEval) -> f64,
) -> Result<f64> {
    if points.is_empty() {
        return Err(structural("no points given"));
    }
    let mut acc = 0.0;
    for p in points {
        acc += f(&crate::fields::deform_eval(weights, *p)?);
    }
    Ok(acc / points.len() as f64)
}

/// Mean Frobenius norm of the deformation Jacobian.
pub fn loss_smooth(weights: &DeformWeights, points: &[[f64; 3]]) -> Result<f64> {
    deform_mean(weights, points, |d| d.jac_v.iter().map(|j| j * j).sum::<f64>().sqrt())
}

/// Mean absolute SDF correction.
pub fn loss_correction(weights: &DeformWeights, points: &[[f64; 3]]) -> Result<f64> {
    deform_mean(weights, points, |d| d.delta_s.abs())
}

/// Euclidean norm of a latent code.
pub fn loss_latent(z: &LatentCode) -> f64 {
    z.norm()
}

/// Which gradients a shape objective should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    ValueOnly,
    LatentOnly,
    All,
}

/// Loss of one shape with the gradients requested by [`GradMode`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShapeObjective {
    pub terms: LossTerms,
    pub total: f64,
    pub template_grad: Vec<f64>,
    /// One buffer per hypernetwork.
    pub hyper_grads: Vec<Vec<f64>>,
    pub latent_grad: Vec<f64>,
}

/// All loss terms of one shape and their exact gradients.
///
/// SDF, normal, eikonal and value terms run over the points they are defined
/// on; smoothness and correction run over the free points.
pub fn shape_objective(
    prior: &ShapePrior,
    z: &LatentCode,
    samples: &ShapeSampleSet,
    w: &LossWeights,
    mode: GradMode,
) -> Result<ShapeObjective> {
    if samples.surface.is_empty() || samples.free.is_empty() {
        return Err(structural("sample set needs surface and free points"));
    }
    let (deform, pass) = prior.hyper_forward(z)?;
    let field = InstanceField::new(&prior.template, deform);
    let want_net = mode == GradMode::All;
    let want_latent = mode != GradMode::ValueOnly;
    let mut tg = if want_net {
        prior.template.zero_grad()
    } else {
        Vec::new()
    };
    let mut dg = if want_latent {
        field.deform.net().zero_grad()
    } else {
        Vec::new()
    };

    let ns = samples.surface.len();
    let nf = samples.free.len();
    let inv_all = 1.0 / (ns + nf) as f64;
    let inv_s = 1.0 / ns as f64;
    let inv_f = 1.0 / nf as f64;
    let mut t = LossTerms::default();
    let mut work = PointWork::default();

    let points = samples
        .surface
        .iter()
        .map(|s| (s.x, 0.0, Some(s.n)))
        .chain(samples.free.iter().map(|f| (f.x, f.s, None)));
    for (i, (x, target, normal)) in points.enumerate() {
        let e = field.forward(x, &mut work)?;
        check("psi", i, e.psi)?;
        let mut seeds = PointSeeds::default();

        let r = e.psi - target;
        t.sdf[0] += check("sdf_value", i, r.abs())? * inv_all;
        seeds.psi += w.sdf[0] * inv_all * sign(r);

        let gn = norm3(&e.grad);
        t.sdf[2] += check("sdf_eikonal", i, (gn - 1.0).abs())? * inv_all;
        if gn > 0.0 {
            let c = w.sdf[2] * inv_all * sign(gn - 1.0) / gn;
            (0..3).for_each(|k| seeds.grad[k] += c * e.grad[k]);
        }

        if let Some(n) = normal {
            t.sdf[1] += check("sdf_normal", i, cos_loss(&e.grad, &n))? * inv_s;
            t.normal += check("normal", i, cos_loss(&e.grad_t, &n))? * inv_s;
            cos_loss_grad(&e.grad, &n, w.sdf[1] * inv_s, &mut seeds.grad);
            cos_loss_grad(&e.grad_t, &n, w.lambda1 * inv_s, &mut seeds.grad_t);
        } else {
            let rho = (-w.delta * e.psi.abs()).exp();
            t.sdf[3] += check("sdf_free", i, rho)? * inv_f;
            seeds.psi -= w.sdf[3] * inv_f * w.delta * sign(e.psi) * rho;

            let fro = e.jac_v.iter().map(|j| j * j).sum::<f64>().sqrt();
            t.smooth += check("smooth", i, fro)? * inv_f;
            if fro > 0.0 {
                let c = w.lambda3 * inv_f / fro;
                (0..9).for_each(|k| seeds.jac_v[k] = c * e.jac_v[k]);
            }
            t.correction += check("correction", i, e.delta_s.abs())? * inv_f;
            seeds.delta_s = w.lambda4 * inv_f * sign(e.delta_s);
        }

        if want_latent {
            let tgrad = want_net.then_some(tg.as_mut_slice());
            field.backward(&work, &e, &seeds, tgrad, Some(&mut dg))?;
        }
    }

    let zn = z.norm();
    t.latent = check("latent", 0, zn)?;
    let mut out = ShapeObjective {
        total: total_loss(&t, w),
        terms: t,
        template_grad: tg,
        ..Default::default()
    };
    if want_latent {
        let mut hg: Vec<Vec<f64>> = prior.hyper.iter().map(|h| h.zero_grad()).collect();
        let hyper_out = want_net.then_some(hg.as_mut_slice());
        let mut gz = prior.hyper_backward(&pass, &dg, hyper_out)?;
        if zn > 0.0 {
            axpy(&mut gz, w.lambda2 / zn, &z.z);
        }
        out.latent_grad = gz;
        if want_net {
            out.hyper_grads = hg;
        }
    }
    check("total", 0, out.total)?;
    Ok(out)
}

/// One shape in a training batch: index into the prior's latent table and
/// its samples.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub latent: usize,
    pub samples: &'a ShapeSampleSet,
}

/// Mean loss over a batch of shapes with gradients for the template, every
/// hypernetwork (in that order in `param_grads`) and each batch latent.
pub fn loss_and_grads(
    prior: &ShapePrior,
    batch: &[BatchItem<'_>],
    w: &LossWeights,
) -> Result<(LossTerms, GradientBundle)> {
    if batch.is_empty() {
        return Err(structural("empty batch"));
    }
    let per_shape: Vec<ShapeObjective> = batch
        .par_iter()
        .map(|item| {
            let z = prior
                .latents
                .get(item.latent)
                .ok_or_else(|| structural(format!("no latent with index {}", item.latent)))?;
            shape_objective(prior, z, item.samples, w, GradMode::All).map_err(|e| match e {
                Error::NonFinite { term, index, value } => Error::NonFinite {
                    term: format!("shape {} {term}", z.id),
                    index,
                    value,
                },
                e => e,
            })
        })
        .collect::<Result<_>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut terms = LossTerms::default();
    let mut bundle = GradientBundle {
        param_grads: std::iter::once(prior.template.zero_grad())
            .chain(prior.hyper.iter().map(|h| h.zero_grad()))
            .collect(),
        ..Default::default()
    };
    for s in &per_shape {
        terms.add_scaled(scale, &s.terms);
        bundle.loss += scale * s.total;
        axpy(&mut bundle.param_grads[0], scale, &s.template_grad);
        for (dst, src) in bundle.param_grads[1..].iter_mut().zip(&s.hyper_grads) {
            axpy(dst, scale, src);
        }
        bundle
            .latent_grads
            .push(s.latent_grad.iter().map(|g| g * scale).collect());
    }
    bundle.check_finite()?;
    Ok((terms, bundle))
}

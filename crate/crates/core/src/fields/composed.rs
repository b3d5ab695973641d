use super::{DeformWeights, SdfField};
use crate::autodiff::{FieldEval, Mlp, Tape, IDENTITY3};
use crate::error::Result;

/// Template plus one instance's deformation weights.
#[derive(Clone, Debug)]
pub struct InstanceField<'a> {
    pub template: &'a Mlp,
    pub deform: DeformWeights,
}

/// Everything a loss may reference at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PointEval {
    pub psi: f64,
    /// Spatial gradient of the composed field.
    pub grad: [f64; 3],
    pub v: [f64; 3],
    pub delta_s: f64,
    /// `∂v_k/∂x_c`, row-major.
    pub jac_v: [f64; 9],
    /// Template value at the deformed point.
    pub t_value: f64,
    /// Template gradient at the deformed point `x + v`.
    pub grad_t: [f64; 3],
}

/// Loss gradients with respect to the quantities in [`PointEval`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PointSeeds {
    pub psi: f64,
    pub grad: [f64; 3],
    pub grad_t: [f64; 3],
    pub jac_v: [f64; 9],
    pub delta_s: f64,
}

/// Reusable tapes for one composed evaluation.
#[derive(Clone, Debug, Default)]
pub struct PointWork {
    deform: Tape,
    template: Tape,
}

impl<'a> InstanceField<'a> {
    pub fn new(template: &'a Mlp, deform: DeformWeights) -> Self {
        InstanceField { template, deform }
    }

    /// Value only, no derivatives.
    pub fn value(&self, x: [f64; 3]) -> Result<f64> {
        let o = self.deform.net().forward(&x)?;
        let p = [x[0] + o[0], x[1] + o[1], x[2] + o[2]];
        Ok(self.template.forward(&p)?[0] + o[3])
    }

    pub fn forward(&self, x: [f64; 3], work: &mut PointWork) -> Result<PointEval> {
        self.deform.net().forward_jet(&x, &IDENTITY3, 3, &mut work.deform)?;
        let o = work.deform.output();
        let jo = work.deform.output_jac();
        let v = [o[0], o[1], o[2]];
        let delta_s = o[3];
        let mut jac_v = [0.0; 9];
        jac_v.copy_from_slice(&jo[..9]);
        let g_ds = [jo[9], jo[10], jo[11]];

        let p = [x[0] + v[0], x[1] + v[1], x[2] + v[2]];
        self.template.forward_jet(&p, &IDENTITY3, 3, &mut work.template)?;
        let t_value = work.template.output()[0];
        let jt = work.template.output_jac();
        let grad_t = [jt[0], jt[1], jt[2]];

        // (I + Jv)ᵀ ∇T(p) + ∇Δs
        let mut grad = [0.0; 3];
        for c in 0..3 {
            let mut g = grad_t[c] + g_ds[c];
            for k in 0..3 {
                g += jac_v[k * 3 + c] * grad_t[k];
            }
            grad[c] = g;
        }
        Ok(PointEval {
            psi: t_value + delta_s,
            grad,
            v,
            delta_s,
            jac_v,
            t_value,
            grad_t,
        })
    }

    /// Reverse sweep through the composition for the last
    /// [`InstanceField::forward`] recorded in `work`. Returns the gradient
    /// with respect to the input point.
    pub fn backward(
        &self,
        work: &PointWork,
        eval: &PointEval,
        seeds: &PointSeeds,
        template_grad: Option<&mut [f64]>,
        deform_grad: Option<&mut [f64]>,
    ) -> Result<[f64; 3]> {
        let mut d_grad_t = [0.0; 3];
        for k in 0..3 {
            let mut g = seeds.grad_t[k] + seeds.grad[k];
            for c in 0..3 {
                g += eval.jac_v[k * 3 + c] * seeds.grad[c];
            }
            d_grad_t[k] = g;
        }
        let (gp, _) = self
            .template
            .backward_jet(&work.template, &[seeds.psi], &d_grad_t, template_grad)?;

        let mut gjo = [0.0; 12];
        for k in 0..3 {
            for c in 0..3 {
                gjo[k * 3 + c] = seeds.jac_v[k * 3 + c] + eval.grad_t[k] * seeds.grad[c];
            }
        }
        gjo[9..12].copy_from_slice(&seeds.grad);
        let gy = [gp[0], gp[1], gp[2], seeds.psi + seeds.delta_s];
        let (gx, _) = self.deform.net().backward_jet(&work.deform, &gy, &gjo, deform_grad)?;
        Ok([gp[0] + gx[0], gp[1] + gx[1], gp[2] + gx[2]])
    }
}

impl SdfField for InstanceField<'_> {
    fn eval(&self, x: [f64; 3]) -> Result<FieldEval> {
        let mut work = PointWork::default();
        let e = self.forward(x, &mut work)?;
        Ok(FieldEval {
            value: e.psi,
            spatial_grad: e.grad,
        })
    }
}

impl InstanceField<'_> {
    pub fn eval(&self, x: [f64; 3]) -> Result<FieldEval> {
        SdfField::eval(self, x)
    }
}

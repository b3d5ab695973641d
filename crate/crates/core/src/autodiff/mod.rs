//! Differentiable evaluation of small dense networks.
//!
//! Forward passes carry `(value, spatial Jacobian)` pairs through every
//! layer; the reverse sweep differentiates that augmented computation, so
//! losses that reference spatial gradients get exact parameter gradients
//! without general second-order machinery.

pub mod container;
mod mlp;
pub mod optim;

pub use container::{Tensor, TensorFile};
pub use mlp::{Activation, FieldEval, LayerSpec, Mlp, Tape, IDENTITY3, MAX_JET_COLS};
pub use optim::Adam;

use crate::error::{Error, Result};

/// Loss value with gradients for every trainable quantity it touched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    /// One buffer per network, laid out like [`Mlp::params`].
    pub param_grads: Vec<Vec<f64>>,
    pub latent_grads: Vec<Vec<f64>>,
    /// 6D rotation followed by translation.
    pub pose_grad: Option<[f64; 9]>,
}

impl GradientBundle {
    /// Reject bundles with non-finite entries, naming where they occur.
    pub fn check_finite(&self) -> Result<()> {
        if !self.loss.is_finite() {
            return Err(Error::NonFinite {
                term: "loss".into(),
                index: 0,
                value: self.loss,
            });
        }
        let groups = self
            .param_grads
            .iter()
            .enumerate()
            .map(|(i, g)| (format!("param_grads[{i}]"), g.as_slice()))
            .chain(
                self.latent_grads
                    .iter()
                    .enumerate()
                    .map(|(i, g)| (format!("latent_grads[{i}]"), g.as_slice())),
            );
        for (name, g) in groups {
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    term: name,
                    index: j,
                    value: g[j],
                });
            }
        }
        if let Some(p) = &self.pose_grad {
            if let Some(j) = p.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    term: "pose_grad".into(),
                    index: j,
                    value: p[j],
                });
            }
        }
        Ok(())
    }
}

/// `dst += scale * src`.
pub(crate) fn axpy(dst: &mut [f64], scale: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

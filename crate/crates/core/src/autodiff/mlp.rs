use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{structural, Error, Result};

/// Maximum number of spatial Jacobian columns carried through a forward pass.
pub const MAX_JET_COLS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sine,
    Relu,
    Linear,
}

impl Activation {
    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Sine => 0,
            Activation::Relu => 1,
            Activation::Linear => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Sine),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Linear),
            c => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

/// Shape and nonlinearity of one dense layer. The pre-activation is
/// `scale * (W h + b)`; sine layers use `scale = omega`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_dim: usize,
    pub in_dim: usize,
    pub activation: Activation,
    pub scale: f64,
}

impl LayerSpec {
    pub fn num_params(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }

    /// Layer specs of a sinusoidal network with widths `dims`: sine layers
    /// scaled by `omega0` and a linear output layer.
    pub fn siren_stack(dims: &[usize], omega0: f64) -> Vec<LayerSpec> {
        let n = dims.len().saturating_sub(1);
        (0..n)
            .map(|k| {
                let last = k + 1 == n;
                LayerSpec {
                    out_dim: dims[k + 1],
                    in_dim: dims[k],
                    activation: if last { Activation::Linear } else { Activation::Sine },
                    scale: if last { 1.0 } else { omega0 },
                }
            })
            .collect()
    }
}

/// A small dense network with all parameters stored in one flat buffer.
///
/// Layout is layer by layer: row-major weight matrix followed by the bias.
/// The same layout is used for gradients, so a gradient buffer is just a
/// `Vec<f64>` of length [`Mlp::num_params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    specs: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Field value and its gradient with respect to the input point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldEval {
    pub value: f64,
    pub spatial_grad: [f64; 3],
}

/// Intermediate values of a forward pass, kept for the reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    cols: usize,
    acts: Vec<Vec<f64>>,
    jacs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pre_jac: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Output Jacobian, row-major `out × cols`.
    pub fn output_jac(&self) -> &[f64] {
        self.jacs.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

fn offsets_for(specs: &[LayerSpec]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(specs.len());
    let mut acc = 0;
    for s in specs {
        offsets.push(acc);
        acc += s.num_params();
    }
    offsets
}

impl Mlp {
    /// Build a network from layer specs and a flat parameter buffer.
    pub fn new(specs: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        if specs.is_empty() {
            return Err(structural("network needs at least one layer"));
        }
        for (k, pair) in specs.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(structural(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].out_dim,
                    k + 1,
                    pair[1].in_dim
                )));
            }
        }
        for (k, s) in specs.iter().enumerate() {
            if s.out_dim == 0 || s.in_dim == 0 {
                return Err(structural(format!("layer {k} has a zero dimension")));
            }
            if !(s.scale.is_finite() && s.scale > 0.0) {
                return Err(structural(format!("layer {k} scale must be positive")));
            }
        }
        let expected: usize = specs.iter().map(LayerSpec::num_params).sum();
        if params.len() != expected {
            return Err(structural(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(structural(format!("parameter {i} is not finite")));
        }
        let offsets = offsets_for(&specs);
        Ok(Mlp { specs, offsets, params })
    }

    /// Single layer from an explicit weight matrix (row-major) and bias.
    pub fn single_layer(
        weight: &[f64],
        bias: &[f64],
        in_dim: usize,
        activation: Activation,
        scale: f64,
    ) -> Result<Self> {
        let out_dim = bias.len();
        if weight.len() != out_dim * in_dim {
            return Err(structural("weight matrix does not match bias/in_dim"));
        }
        let mut params = weight.to_vec();
        params.extend_from_slice(bias);
        Mlp::new(
            vec![LayerSpec {
                out_dim,
                in_dim,
                activation,
                scale,
            }],
            params,
        )
    }

    /// Sinusoidal network: sine hidden layers, linear output layer.
    ///
    /// `dims` lists every width including input and output, e.g.
    /// `[3, 64, 64, 1]`. The first layer is drawn from `U(-1/in, 1/in)`,
    /// later layers from `U(-sqrt(6/in)/omega, sqrt(6/in)/omega)`.
    pub fn siren(dims: &[usize], omega0: f64, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(structural("siren needs at least input and output dims"));
        }
        if !(omega0 > 0.0) {
            return Err(structural("omega0 must be positive"));
        }
        let specs = LayerSpec::siren_stack(dims, omega0);
        let mut params = Vec::new();
        for k in 0..specs.len() {
            let (in_dim, out_dim) = (dims[k], dims[k + 1]);
            let w_bound = if k == 0 {
                1.0 / in_dim as f64
            } else {
                (6.0 / in_dim as f64).sqrt() / omega0
            };
            let b_bound = 1.0 / (in_dim as f64).sqrt();
            for _ in 0..out_dim * in_dim {
                params.push(rng.random_range(-w_bound..=w_bound));
            }
            for _ in 0..out_dim {
                params.push(rng.random_range(-b_bound..=b_bound));
            }
        }
        Mlp::new(specs, params)
    }

    /// Rectifier network with a linear output layer, He-uniform hidden
    /// weights and zero hidden biases.
    pub fn relu(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(structural("relu net needs at least input and output dims"));
        }
        let n_layers = dims.len() - 1;
        let mut specs = Vec::with_capacity(n_layers);
        let mut params = Vec::new();
        for k in 0..n_layers {
            let (in_dim, out_dim) = (dims[k], dims[k + 1]);
            let last = k + 1 == n_layers;
            let activation = if last { Activation::Linear } else { Activation::Relu };
            let bound = (6.0 / in_dim as f64).sqrt();
            for _ in 0..out_dim * in_dim {
                params.push(rng.random_range(-bound..=bound));
            }
            params.extend(std::iter::repeat_n(0.0, out_dim));
            specs.push(LayerSpec {
                out_dim,
                in_dim,
                activation,
                scale: 1.0,
            });
        }
        Mlp::new(specs, params)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn in_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].out_dim
    }

    pub fn num_layers(&self) -> usize {
        self.specs.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Range of layer `k`'s parameters (weight then bias) in the flat buffer.
    pub fn layer_range(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.offsets[k];
        start..start + self.specs[k].num_params()
    }

    pub fn weight(&self, k: usize) -> &[f64] {
        let s = &self.specs[k];
        let o = self.offsets[k];
        &self.params[o..o + s.out_dim * s.in_dim]
    }

    pub fn bias(&self, k: usize) -> &[f64] {
        let s = &self.specs[k];
        let o = self.offsets[k] + s.out_dim * s.in_dim;
        &self.params[o..o + s.out_dim]
    }

    /// Overwrite the parameters of layer `k` (weight then bias).
    pub fn set_layer(&mut self, k: usize, values: &[f64]) -> Result<()> {
        let r = self.layer_range(k);
        if values.len() != r.len() {
            return Err(structural(format!(
                "layer {k} needs {} values, got {}",
                r.len(),
                values.len()
            )));
        }
        self.params[r].copy_from_slice(values);
        Ok(())
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// Value-only forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(structural(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.in_dim()
            )));
        }
        let mut h = x.to_vec();
        let mut next = Vec::new();
        for k in 0..self.specs.len() {
            let s = self.specs[k];
            let w = self.weight(k);
            let b = self.bias(k);
            next.clear();
            for i in 0..s.out_dim {
                let row = &w[i * s.in_dim..(i + 1) * s.in_dim];
                let mut acc = b[i];
                for (wij, hj) in row.iter().zip(&h) {
                    acc += wij * hj;
                }
                let a = s.scale * acc;
                next.push(match s.activation {
                    Activation::Sine => a.sin(),
                    Activation::Relu => a.max(0.0),
                    Activation::Linear => a,
                });
            }
            std::mem::swap(&mut h, &mut next);
        }
        Ok(h)
    }

    /// Forward pass carrying a Jacobian with `cols` columns alongside the
    /// values. `jx` is the Jacobian of the input (row-major `in × cols`);
    /// pass the identity to get spatial derivatives. The tape keeps what the
    /// reverse sweep needs.
    pub fn forward_jet(&self, x: &[f64], jx: &[f64], cols: usize, tape: &mut Tape) -> Result<()> {
        let in_dim = self.in_dim();
        if cols > MAX_JET_COLS {
            return Err(structural(format!("at most {MAX_JET_COLS} jet columns")));
        }
        if x.len() != in_dim || jx.len() != in_dim * cols {
            return Err(structural(format!(
                "input has {} entries (jacobian {}), network expects {} (jacobian {})",
                x.len(),
                jx.len(),
                in_dim,
                in_dim * cols
            )));
        }
        let n = self.specs.len();
        tape.cols = cols;
        tape.acts.resize_with(n + 1, Vec::new);
        tape.jacs.resize_with(n + 1, Vec::new);
        tape.pre.resize_with(n, Vec::new);
        tape.pre_jac.resize_with(n, Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(x);
        tape.jacs[0].clear();
        tape.jacs[0].extend_from_slice(jx);

        for k in 0..n {
            let s = self.specs[k];
            let w = self.weight(k);
            let b = self.bias(k);
            let (head, tail) = tape.acts.split_at_mut(k + 1);
            let h = &head[k];
            let y = &mut tail[0];
            let (jhead, jtail) = tape.jacs.split_at_mut(k + 1);
            let jh = &jhead[k];
            let jy = &mut jtail[0];
            let a = &mut tape.pre[k];
            let ja = &mut tape.pre_jac[k];
            a.clear();
            ja.clear();
            y.clear();
            jy.clear();
            for i in 0..s.out_dim {
                let row = &w[i * s.in_dim..(i + 1) * s.in_dim];
                let mut acc = b[i];
                let mut jacc = [0.0f64; MAX_JET_COLS];
                for (j, wij) in row.iter().enumerate() {
                    acc += wij * h[j];
                    let jr = &jh[j * cols..(j + 1) * cols];
                    for c in 0..cols {
                        jacc[c] += wij * jr[c];
                    }
                }
                let ai = s.scale * acc;
                a.push(ai);
                for c in 0..cols {
                    ja.push(s.scale * jacc[c]);
                }
                let (yi, dyi) = match s.activation {
                    Activation::Sine => (ai.sin(), ai.cos()),
                    // one-sided derivative at the kink, so a zero input still
                    // receives gradient
                    Activation::Relu => {
                        if ai >= 0.0 {
                            (ai, 1.0)
                        } else {
                            (0.0, 0.0)
                        }
                    }
                    Activation::Linear => (ai, 1.0),
                };
                y.push(yi);
                for c in 0..cols {
                    jy.push(dyi * s.scale * jacc[c]);
                }
            }
        }
        Ok(())
    }

    /// Reverse sweep over a tape recorded by [`Mlp::forward_jet`].
    ///
    /// `gy` and `gjy` are the loss gradients with respect to the output
    /// values and output Jacobian. Parameter gradients are accumulated into
    /// `grad` when given (frozen networks pass `None`); the return value holds
    /// the gradients with respect to the input values and the input Jacobian.
    pub fn backward_jet(
        &self,
        tape: &Tape,
        gy: &[f64],
        gjy: &[f64],
        mut grad: Option<&mut [f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let cols = tape.cols;
        let n = self.specs.len();
        if tape.acts.len() != n + 1 {
            return Err(structural("tape was not recorded by this network"));
        }
        if gy.len() != self.out_dim() || gjy.len() != self.out_dim() * cols {
            return Err(structural("output gradient has the wrong shape"));
        }
        if grad.as_ref().is_some_and(|g| g.len() != self.params.len()) {
            return Err(structural("gradient buffer has the wrong length"));
        }
        let mut g_out = gy.to_vec();
        let mut gj_out = gjy.to_vec();
        let mut ga = Vec::new();
        let mut gja = Vec::new();
        for k in (0..n).rev() {
            let s = self.specs[k];
            let a = &tape.pre[k];
            let ja = &tape.pre_jac[k];
            ga.clear();
            gja.clear();
            for i in 0..s.out_dim {
                let gji = &gj_out[i * cols..(i + 1) * cols];
                match s.activation {
                    Activation::Sine => {
                        let (sn, cs) = a[i].sin_cos();
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += gji[c] * ja[i * cols + c];
                        }
                        ga.push(cs * g_out[i] - sn * dot);
                        for c in 0..cols {
                            gja.push(cs * gji[c]);
                        }
                    }
                    Activation::Relu => {
                        let on = if a[i] >= 0.0 { 1.0 } else { 0.0 };
                        ga.push(on * g_out[i]);
                        for c in 0..cols {
                            gja.push(on * gji[c]);
                        }
                    }
                    Activation::Linear => {
                        ga.push(g_out[i]);
                        gja.extend_from_slice(gji);
                    }
                }
            }

            let h = &tape.acts[k];
            let jh = &tape.jacs[k];
            let off = self.offsets[k];
            let w = self.weight(k);
            let mut gh = vec![0.0; s.in_dim];
            let mut gjh = vec![0.0; s.in_dim * cols];
            if let Some(grad) = grad.as_deref_mut() {
                let (gw, gb) = grad[off..off + s.num_params()].split_at_mut(s.out_dim * s.in_dim);
                for i in 0..s.out_dim {
                    let gai = s.scale * ga[i];
                    let gjai = &gja[i * cols..(i + 1) * cols];
                    gb[i] += gai;
                    let grow = &mut gw[i * s.in_dim..(i + 1) * s.in_dim];
                    for j in 0..s.in_dim {
                        let jr = &jh[j * cols..(j + 1) * cols];
                        let mut acc = gai * h[j];
                        for c in 0..cols {
                            acc += s.scale * gjai[c] * jr[c];
                        }
                        grow[j] += acc;
                    }
                }
            }
            for i in 0..s.out_dim {
                let gai = s.scale * ga[i];
                let gjai = &gja[i * cols..(i + 1) * cols];
                let wrow = &w[i * s.in_dim..(i + 1) * s.in_dim];
                for j in 0..s.in_dim {
                    let wij = wrow[j];
                    gh[j] += wij * gai;
                    for c in 0..cols {
                        gjh[j * cols + c] += s.scale * wij * gjai[c];
                    }
                }
            }
            g_out = gh;
            gj_out = gjh;
        }
        Ok((g_out, gj_out))
    }

    /// Scalar field value and its exact gradient with respect to `x`.
    pub fn eval_with_spatial_grad(&self, x: [f64; 3]) -> Result<FieldEval> {
        if self.in_dim() != 3 {
            return Err(structural(format!(
                "field networks take 3 inputs, this one takes {}",
                self.in_dim()
            )));
        }
        if self.out_dim() != 1 {
            return Err(structural("field networks produce a single output"));
        }
        let mut tape = Tape::default();
        self.forward_jet(&x, &IDENTITY3, 3, &mut tape)?;
        let jy = tape.output_jac();
        Ok(FieldEval {
            value: tape.output()[0],
            spatial_grad: [jy[0], jy[1], jy[2]],
        })
    }
}

/// Row-major 3×3 identity, the input Jacobian for spatial derivatives.
pub const IDENTITY3: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::losses::{loss_and_grads, shape_objective, BatchItem, GradMode, LossTerms, LossWeights};
use crate::autodiff::{Adam, TensorFile};
use crate::error::{structural, Error, Result};
use crate::fields::{LatentCode, ShapePrior};
use crate::rng;
use crate::synthdata::ShapeSampleSet;

/// Optimisation settings for prior training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_shapes: usize,
    /// Surface points per shape per step.
    pub surface_points_per_shape: usize,
    /// Free-space points per shape per step.
    pub free_points_per_shape: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_shapes: 128,
            surface_points_per_shape: 4000,
            free_points_per_shape: 4000,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Small batches and point counts for single-core runs.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 300,
            batch_shapes: 8,
            surface_points_per_shape: 256,
            free_points_per_shape: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_shapes == 0 || self.surface_points_per_shape == 0 || self.free_points_per_shape == 0 {
            return Err(Error::InvalidArgument("batch and point counts must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument(
                "learning rate or Adam moments out of range".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self, len: usize) -> Adam {
        Adam::new(len, self.lr, self.beta1, self.beta2, self.eps)
    }
}

/// Mean loss terms over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub terms: LossTerms,
    pub total: f64,
}

/// Auto-decoder training state: the prior plus optimizer moments.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub prior: ShapePrior,
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub history: Vec<EpochRecord>,
    /// Template first, then one per hypernetwork.
    net_opt: Vec<Adam>,
    latent_opt: Vec<Adam>,
}

impl Trainer {
    pub fn new(prior: ShapePrior, config: TrainConfig, weights: LossWeights) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let net_opt = std::iter::once(prior.template.num_params())
            .chain(prior.hyper.iter().map(|h| h.num_params()))
            .map(|n| config.adam(n))
            .collect();
        let latent_opt = prior.latents.iter().map(|l| config.adam(l.dim())).collect();
        Ok(Trainer {
            prior,
            config,
            weights,
            history: Vec::new(),
            net_opt,
            latent_opt,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// One pass over all shapes in shuffled batches.
    pub fn run_epoch(&mut self, data: &[ShapeSampleSet]) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(structural("training set is empty"));
        }
        if data.len() != self.prior.latents.len() {
            return Err(structural(format!(
                "{} sample sets for {} latent codes",
                data.len(),
                self.prior.latents.len()
            )));
        }
        let epoch = self.epochs_done();
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::substream(seed, "shuffle", epoch as u64));
        let point_seed = rng::derive_seed(seed, "points", epoch as u64);

        let mut terms = LossTerms::default();
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_shapes) {
            let subs: Vec<ShapeSampleSet> = chunk
                .iter()
                .map(|&i| {
                    data[i].subsample(
                        self.config.surface_points_per_shape,
                        self.config.free_points_per_shape,
                        &mut rng::substream(point_seed, "shape", i as u64),
                    )
                })
                .collect();
            let batch: Vec<BatchItem> = chunk
                .iter()
                .zip(&subs)
                .map(|(&i, s)| BatchItem { latent: i, samples: s })
                .collect();
            let (t, g) = loss_and_grads(&self.prior, &batch, &self.weights).map_err(|e| {
                if e.is_numeric() {
                    Error::NumericAbort(format!("epoch {epoch}, shapes {chunk:?}: {e}"))
                } else {
                    e
                }
            })?;
            let frac = chunk.len() as f64 / data.len() as f64;
            terms.add_scaled(frac, &t);
            total += frac * g.loss;

            self.net_opt[0].update(self.prior.template.params_mut(), &g.param_grads[0]);
            for (k, h) in self.prior.hyper.iter_mut().enumerate() {
                self.net_opt[k + 1].update(h.params_mut(), &g.param_grads[k + 1]);
            }
            for (&i, gz) in chunk.iter().zip(&g.latent_grads) {
                self.latent_opt[i].update(&mut self.prior.latents[i].z, gz);
            }
        }
        let rec = EpochRecord { epoch, terms, total };
        self.history.push(rec);
        Ok(rec)
    }

    /// Train until `config.epochs` epochs are done.
    pub fn run(&mut self, data: &[ShapeSampleSet], mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        while self.epochs_done() < self.config.epochs {
            let rec = self.run_epoch(data)?;
            on_epoch(&rec);
        }
        Ok(())
    }

    fn state_tensors(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        for (k, a) in self.net_opt.iter().chain(&self.latent_opt).enumerate() {
            f.insert(format!("adam{k}/m"), vec![a.m.len()], a.m.clone())?;
            f.insert(format!("adam{k}/v"), vec![a.v.len()], a.v.clone())?;
            f.insert(format!("adam{k}/step"), vec![1], vec![a.step as f64])?;
        }
        let rows: Vec<f64> = self
            .history
            .iter()
            .flat_map(|r| {
                std::iter::once(r.epoch as f64)
                    .chain(r.terms.as_array())
                    .chain([r.total])
            })
            .collect();
        f.insert("history", vec![self.history.len(), 10], rows)?;
        Ok(f)
    }

    /// Write `prior.bin` (+ sidecar) and `train_state.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let info = serde_json::json!({
            "seed": self.config.seed,
            "train": self.config,
            "weights": self.weights,
            "epochs_done": self.epochs_done(),
        });
        self.prior.save(&dir.join("prior.bin"), Some(info))?;
        self.state_tensors()?.write(&dir.join("train_state.bin"))
    }

    /// Continue from a directory written by [`Trainer::save`].
    pub fn resume(dir: &Path, config: TrainConfig, weights: LossWeights) -> Result<Self> {
        let prior = ShapePrior::load(&dir.join("prior.bin"))?;
        let mut t = Trainer::new(prior, config, weights)?;
        let f = TensorFile::read(&dir.join("train_state.bin"))?;
        let n_net = t.net_opt.len();
        for (k, a) in t.net_opt.iter_mut().chain(t.latent_opt.iter_mut()).enumerate() {
            let m = &f.require(&format!("adam{k}/m"))?.data;
            let v = &f.require(&format!("adam{k}/v"))?.data;
            if m.len() != a.m.len() || v.len() != a.v.len() {
                let what = if k < n_net { "network" } else { "latent" };
                return Err(Error::Format(format!(
                    "optimizer state {k} ({what}) has the wrong size"
                )));
            }
            a.m.copy_from_slice(m);
            a.v.copy_from_slice(v);
            a.step = f.require(&format!("adam{k}/step"))?.data[0] as u64;
        }
        t.history = f
            .require("history")?
            .data
            .chunks(10)
            .map(|c| EpochRecord {
                epoch: c[0] as usize,
                terms: LossTerms::from_array(c[1..9].try_into().expect("eight terms")),
                total: c[9],
            })
            .collect();
        Ok(t)
    }
}

/// Train a prior and return it with its per-epoch loss history.
pub fn fit(
    prior: ShapePrior,
    data: &[ShapeSampleSet],
    config: &TrainConfig,
    weights: &LossWeights,
) -> Result<(ShapePrior, Vec<EpochRecord>)> {
    if data.is_empty() {
        return Err(structural("training set is empty"));
    }
    for (i, d) in data.iter().enumerate() {
        if d.surface.is_empty() || d.free.is_empty() {
            return Err(structural(format!("shape {i} has an empty sample set")));
        }
        d.validate()?;
    }
    let mut t = Trainer::new(prior, config.clone(), *weights)?;
    t.run(data, |_| {})?;
    Ok((t.prior, t.history))
}

/// Write the loss history as CSV with one column per term.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch");
    for n in LossTerms::NAMES {
        out.push(',');
        out.push_str(n);
    }
    out.push_str(",total\n");
    for r in history {
        out.push_str(&r.epoch.to_string());
        for v in r.terms.as_array() {
            out.push_str(&format!(",{v:e}"));
        }
        out.push_str(&format!(",{:e}\n", r.total));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Settings for fitting a single latent code with frozen networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentFitConfig {
    pub iterations: usize,
    pub lr: f64,
    pub surface_points: usize,
    pub free_points: usize,
    pub seed: u64,
}

impl Default for LatentFitConfig {
    fn default() -> Self {
        LatentFitConfig {
            iterations: 300,
            lr: 1e-2,
            surface_points: 256,
            free_points: 256,
            seed: 0,
        }
    }
}

/// Auto-decode a latent for a new shape: optimize `init` with all network
/// weights frozen. Returns the code and the per-iteration totals.
pub fn fit_latent(
    prior: &ShapePrior,
    samples: &ShapeSampleSet,
    weights: &LossWeights,
    init: LatentCode,
    config: &LatentFitConfig,
) -> Result<(LatentCode, Vec<f64>)> {
    weights.validate()?;
    samples.validate()?;
    let mut z = init;
    let mut opt = Adam::with_lr(z.dim(), config.lr);
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let sub = samples.subsample(
            config.surface_points,
            config.free_points,
            &mut rng::substream(config.seed, "latent-fit", it as u64),
        );
        let o = shape_objective(prior, &z, &sub, weights, GradMode::LatentOnly).map_err(|e| {
            if e.is_numeric() {
                Error::NumericAbort(format!("iteration {it}: {e}"))
            } else {
                e
            }
        })?;
        trace.push(o.total);
        opt.update(&mut z.z, &o.latent_grad);
    }
    Ok((z, trace))
}

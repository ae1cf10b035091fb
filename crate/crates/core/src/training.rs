//! Training of scaling-vector sets against sampled drift, and the backbone
//! pretraining utility.
//!
//! Only `d_vec` and `b_vec` of one set are ever updated. Each mini-batch sees a
//! fresh drift instance whose seed is derived from the run seed, the drift
//! time and the (epoch, batch) counter.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::compensation::{ScalingVectorSet, SharedProjections};
use crate::data::LabeledDataset;
use crate::drift::{ConductanceMap, DriftModel, DriftedWeights};
use crate::error::{Error, Result};
use crate::linalg::l2_norm;
use crate::model::{ModelSpec, ModelWeights};
use crate::nn::{softmax_cross_entropy, CompContext, GradRequest, GradientSet, Network};
use crate::quant::{dequantize, quantize_tensor, QuantScheme};
use crate::rng::{derive_seed, rng_from_seed, time_key, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Momentum for `sgd-momentum`, first-moment decay for Adam.
    pub momentum: f64,
    pub seed: u64,
    /// Start each new set from the previous one instead of the zero function.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            learning_rate: 1e-2,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            seed: 0,
            warm_start: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        // zero is accepted so a run can reproduce its initialization
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Per-parameter optimizer state over a flat parameter vector.
struct OptState {
    kind: Optimizer,
    lr: f64,
    beta1: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl OptState {
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(cfg: &TrainConfig, n: usize) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            beta1: cfg.momentum,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        match self.kind {
            Optimizer::Sgd => params.iter_mut().zip(grads).for_each(|(p, g)| *p -= self.lr * g),
            Optimizer::SgdMomentum => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    *m = self.beta1 * *m + g;
                    *p -= self.lr * *m;
                }
            }
            Optimizer::Adam => {
                let c1 = 1.0 - self.beta1.powi(self.step);
                let c2 = 1.0 - Self::BETA2.powi(self.step);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

fn flatten_set(set: &ScalingVectorSet) -> Vec<f64> {
    set.layers.iter().flat_map(|l| l.d_vec.iter().chain(&l.b_vec)).copied().collect()
}

fn unflatten_into(set: &mut ScalingVectorSet, flat: &[f64]) {
    let mut i = 0;
    for l in &mut set.layers {
        for v in l.d_vec.iter_mut().chain(l.b_vec.iter_mut()) {
            *v = flat[i];
            i += 1;
        }
    }
}

fn flatten_grads(g: &GradientSet) -> Vec<f64> {
    g.layers.iter().flat_map(|l| l.grad_d_vec.iter().chain(&l.grad_b_vec)).copied().collect()
}

/// Logits (`classes × N`) of the drifted backbone with an optional set, in 64-bit floats.
pub fn forward_with_drift(
    backbone: &Backbone,
    drifted: &DriftedWeights,
    comp: Option<(&SharedProjections, &ScalingVectorSet)>,
    x: Vec<f64>,
    n: usize,
) -> Result<Vec<f64>> {
    let weights = backbone.with_drift(drifted);
    let ctx = comp.map(|(projections, set)| CompContext { projections, set });
    let net: Network<f64> = Network::new(&backbone.spec, &weights, ctx, backbone.scheme.act_bits)?;
    Ok(net.logits(x, n))
}

/// Mean batch loss and its exact gradient with respect to every scaling vector.
pub fn backward_scaling_vectors(
    spec: &ModelSpec,
    weights: &ModelWeights,
    projections: &SharedProjections,
    set: &ScalingVectorSet,
    act_bits: Option<u8>,
    x: Vec<f64>,
    labels: &[usize],
) -> Result<(f64, GradientSet)> {
    let ctx = CompContext { projections, set };
    let net: Network<f64> = Network::new(spec, weights, Some(ctx), act_bits)?;
    let trace = net.forward(x, labels.len());
    let (loss, dlogits) = softmax_cross_entropy(trace.logits(), labels, spec.classes);
    let grads = net.backward(
        &trace,
        dlogits,
        GradRequest {
            weights: false,
            compensation: true,
        },
    );
    Ok((loss, grads.compensation.expect("requested")))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub batch: usize,
    pub t_seconds: f64,
    pub loss: f64,
    pub grad_norm_b: f64,
    pub grad_norm_d: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,batch,t_seconds,loss,grad_norm_b,grad_norm_d";

/// Appends rows to a CSV training log, writing the header for a new file.
pub fn append_train_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    if fresh {
        writeln!(w, "{TRAIN_LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch, r.batch, r.t_seconds, r.loss, r.grad_norm_b, r.grad_norm_d
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Everything frozen during scaling-vector training.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub backbone: &'a Backbone,
    pub projections: &'a SharedProjections,
    pub drift: &'a DriftModel,
    pub map: &'a ConductanceMap,
}

/// Seed of the drift instance used for mini-batch `batch` of `epoch` at time `t`.
pub fn batch_drift_seed(root: u64, t: f64, epoch: usize, batch: usize) -> u64 {
    derive_seed(root, Stream::TrainDrift, &[time_key(t), epoch as u64, batch as u64])
}

/// Trains one set at drift time `t`, returning it with its per-batch log.
pub fn train_set_at_time(
    t: f64,
    ctx: TrainContext<'_>,
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
    init: ScalingVectorSet,
) -> Result<(ScalingVectorSet, Vec<TrainLogRow>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if !(t >= 1.0) {
        return Err(Error::Domain(format!("drift time {t} s is before the 1 s reference")));
    }
    let spec = &ctx.backbone.spec;
    let mut set = init;
    set.drift_time = t;
    let mut params = flatten_set(&set);
    let mut opt = OptState::new(cfg, params.len());
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut shuffle = rng_from_seed(derive_seed(cfg.seed, Stream::TrainShuffle, &[time_key(t), epoch as u64]));
        order.shuffle(&mut shuffle);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let seed = batch_drift_seed(cfg.seed, t, epoch, batch);
            let drifted = ctx.backbone.inject(t, ctx.drift, ctx.map, seed)?;
            let weights = ctx.backbone.with_drift(&drifted);
            let (x, labels) = dataset.batch::<f64>(idx);
            let (loss, grads) = backward_scaling_vectors(
                spec,
                &weights,
                ctx.projections,
                &set,
                ctx.backbone.scheme.act_bits,
                x,
                &labels,
            )?;
            if !loss.is_finite() {
                return Err(Error::Domain(format!("loss diverged at t={t} s, epoch {epoch}, batch {batch}")));
            }
            let (gb, gd) = grads.norms();
            log.push(TrainLogRow {
                epoch,
                batch,
                t_seconds: t,
                loss,
                grad_norm_b: gb,
                grad_norm_d: gd,
            });
            opt.update(&mut params, &flatten_grads(&grads));
            unflatten_into(&mut set, &params);
        }
    }
    Ok((set, log))
}

/// Full-precision pretraining followed by optional quantization-aware epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Extra epochs with fake-quantized weights and activations (straight-through).
    pub qat_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// When set, quantization-aware epochs see a fresh drift instance at this
    /// time (seconds) per batch, hardening the backbone against programming noise.
    pub noise_time_s: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            qat_epochs: 3,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            noise_time_s: Some(1.0),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if let Some(t) = self.noise_time_s {
            if !(t >= 1.0) {
                return Err(Error::Config(format!("noise_time_s {t} must be >= 1")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay be >= 0".into()));
        }
        Ok(())
    }
}

/// Weights as the array would hold them: quantized, then optionally drifted.
fn hardware_weights(
    w: &ModelWeights,
    spec: &ModelSpec,
    scheme: &QuantScheme,
    noise: Option<(f64, &DriftModel, &ConductanceMap, u64)>,
) -> Result<ModelWeights> {
    match noise {
        None => {
            let mut out = w.clone();
            for (layer, i) in out.layers.iter_mut().zip(spec.weight_layers()) {
                let (o, k) = spec.layers[i].weight_dims().unwrap();
                layer.weight = dequantize(&quantize_tensor(&layer.weight, &[o, k], scheme)?);
            }
            Ok(out)
        }
        Some((t, drift, map, seed)) => {
            let b = Backbone::quantize(spec, w, *scheme)?;
            Ok(b.with_drift(&b.inject(t, drift, map, seed)?))
        }
    }
}

/// SGD with momentum on softmax cross-entropy, cosine-decayed learning rate.
/// Quantization-aware epochs pass gradients straight through the quantizer
/// (and the sampled drift) to the full-precision weights.
/// Returns full-precision weights and the mean loss of every epoch.
pub fn pretrain(
    spec: &ModelSpec,
    train: &LabeledDataset,
    cfg: &PretrainConfig,
    scheme: &QuantScheme,
    drift: &DriftModel,
    map: &ConductanceMap,
) -> Result<(ModelWeights, Vec<f64>)> {
    cfg.validate()?;
    spec.validate()?;
    let mut weights = ModelWeights::init(spec, derive_seed(cfg.seed, Stream::Pretrain, &[0]));
    if cfg.epochs + cfg.qat_epochs == 0 {
        return Ok((weights, Vec::new()));
    }
    if train.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut velocity: Vec<Vec<f64>> = weights
        .layers
        .iter()
        .flat_map(|l| [vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]])
        .collect();
    let total = cfg.epochs + cfg.qat_epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(total);
    for epoch in 0..total {
        let qat = epoch >= cfg.epochs;
        let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos());
        let mut rng = rng_from_seed(derive_seed(cfg.seed, Stream::Pretrain, &[1, epoch as u64]));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let forward_weights = if qat {
                let noise = cfg.noise_time_s.map(|t| {
                    let seed = derive_seed(cfg.seed, Stream::Pretrain, &[2, epoch as u64, batch as u64]);
                    (t, drift, map, seed)
                });
                hardware_weights(&weights, spec, scheme, noise)?
            } else {
                weights.clone()
            };
            let act_bits = if qat { scheme.act_bits } else { None };
            let net: Network<f32> = Network::new(spec, &forward_weights, None, act_bits)?;
            let (x, labels) = train.batch::<f32>(idx);
            let trace = net.forward(x, idx.len());
            let (loss, dlogits) = softmax_cross_entropy(trace.logits(), &labels, spec.classes);
            if !loss.is_finite() {
                return Err(Error::Domain(format!("pretraining diverged in epoch {epoch}")));
            }
            sum += loss;
            batches += 1;
            let grads = net.backward(
                &trace,
                dlogits,
                GradRequest {
                    weights: true,
                    compensation: false,
                },
            );
            let grads = grads.weights.expect("requested");
            for (li, (layer, g)) in weights.layers.iter_mut().zip(&grads).enumerate() {
                for (which, (p, gv)) in [(&mut layer.weight, &g.weight), (&mut layer.bias, &g.bias)]
                    .into_iter()
                    .enumerate()
                {
                    let decay = if which == 0 { cfg.weight_decay } else { 0.0 };
                    let vel = &mut velocity[2 * li + which];
                    for ((w, gw), v) in p.iter_mut().zip(gv).zip(vel.iter_mut()) {
                        *v = cfg.momentum * *v + *gw as f64 + decay * *w;
                        *w -= lr * *v;
                    }
                }
            }
        }
        losses.push(sum / batches as f64);
    }
    Ok((weights, losses))
}

/// Central finite-difference check of [`backward_scaling_vectors`]; returns the
/// largest relative error over all entries.
pub fn finite_difference_check(
    spec: &ModelSpec,
    weights: &ModelWeights,
    projections: &SharedProjections,
    set: &ScalingVectorSet,
    x: &[f64],
    labels: &[usize],
    h: f64,
) -> Result<f64> {
    let (_, grads) = backward_scaling_vectors(spec, weights, projections, set, None, x.to_vec(), labels)?;
    let analytic = flatten_grads(&grads);
    let base = flatten_set(set);
    let loss_at = |p: &[f64]| -> Result<f64> {
        let mut s = set.clone();
        unflatten_into(&mut s, p);
        let ctx = CompContext {
            projections,
            set: &s,
        };
        let net: Network<f64> = Network::new(spec, weights, Some(ctx), None)?;
        let logits = net.logits(x.to_vec(), labels.len());
        Ok(softmax_cross_entropy(&logits, labels, spec.classes).0)
    };
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        let up = loss_at(&p)?;
        p[i] = base[i] - h;
        let down = loss_at(&p)?;
        let fd = (up - down) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}

/// Relative L2 change of a parameter vector; used by training diagnostics.
pub fn relative_change(before: &ScalingVectorSet, after: &ScalingVectorSet) -> f64 {
    let a = flatten_set(before);
    let b = flatten_set(after);
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    l2_norm(&diff) / l2_norm(&a).max(1e-300)
}

//! Adam training of unrolled models and checkpoint persistence.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{Acquisition, MultiChannelKSpace};
use crate::error::{invalid, Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::lifting::{lift_input, LiftingSpec, Stacking, Weighting};
use crate::rng::Rng;
use crate::tensor::{ComplexTensor, C64};

use super::model::{record_unrolled, CnnParams, CnnSpec, UnrolledModel};
use super::tape::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Directory rewritten with the model after every finite epoch.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("train.epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            errs.push("train.learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            errs.push("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            errs.push("train.adam_eps must be positive".into());
        }
        errs
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Loss `sum |x - t|^2 / (2 n)` over real and imaginary parts of all `n`
/// complex entries, with its parameter gradient.
pub fn loss_and_gradient(model: &UnrolledModel, b: &MultiChannelKSpace, truth: &ComplexTensor) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let g = record_unrolled(&mut tape, model, b)?;
    let loss = tape.mse(g.output, Arc::new(truth.clone()))?;
    let value = tape.value(loss).scalar()?;
    let grads = tape.backward(loss)?;
    Ok((value, g.gradient(&grads)?))
}

/// Mean loss without gradients.
pub fn evaluate(model: &UnrolledModel, examples: &[Acquisition]) -> Result<f64> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let g = record_unrolled(&mut tape, model, &ex.measured)?;
            let loss = tape.mse(g.output, Arc::new(ex.truth.clone()))?;
            tape.value(loss).scalar()
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// `1 / rms` of the centered, weighted, zero-filled k-space over `examples`.
pub fn fit_input_scale(examples: &[Acquisition], weighting: Weighting) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ex in examples {
        let b = &ex.measured;
        let (h, w) = b.data.grid()?;
        let spec = match weighting {
            Weighting::Gradient => LiftingSpec::vertical_gradient((h, w), (1, 1)),
            Weighting::Identity => LiftingSpec {
                stacking: Stacking::HorizontalMultichannel,
                window: (1, 1),
                grid: (h, w),
                channels: b.channels(),
            },
        };
        let z = lift_input(&spec, &b.data)?;
        sum += z.norm_sqr();
        n += b.mask.count() * spec.bands();
    }
    if n == 0 || sum == 0.0 {
        return invalid("cannot fit input scale on empty measurements");
    }
    Ok((n as f64 / sum).sqrt())
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: UnrolledModel,
    pub history: Vec<EpochRecord>,
}

/// Trains in place with shuffled mini-batches; per-example gradients run in
/// parallel and are summed in batch order, so results do not depend on the
/// thread count. A non-finite loss or gradient aborts with
/// [`Error::Numerical`], leaving the last finite checkpoint in place.
pub fn train(
    mut model: UnrolledModel,
    train_set: &[Acquisition],
    val_set: &[Acquisition],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let errs: Vec<String> = cfg.validate().into_iter().chain(model.validate()).collect();
    if !errs.is_empty() {
        return invalid(errs.join("; "));
    }
    if train_set.is_empty() {
        return invalid("training set is empty");
    }
    let mut params = model.flatten();
    let mut adam = Adam::new(params.len(), cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let order = Rng::derived(cfg.seed, epoch as u64).permutation(train_set.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| loss_and_gradient(&model, &train_set[i].measured, &train_set[i].truth))
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; params.len()];
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|v| *v *= inv);
            if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite loss or gradient in epoch {epoch}")));
            }
            epoch_loss += loss;
            adam.step(&mut params, &grad);
            model.assign(&params)?;
        }
        let val_loss = if val_set.is_empty() { None } else { Some(evaluate(&model, val_set)?) };
        let rec = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if !model.nk.all_finite() || model.ni.as_ref().is_some_and(|p| !p.all_finite()) {
            return Err(Error::Numerical(format!("non-finite parameters after epoch {epoch}")));
        }
        if let Some(dir) = &cfg.checkpoint {
            save_checkpoint(dir, &model, Some(&rec))?;
        }
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome { model, history })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    nk: CnnSpec,
    ni: Option<CnnSpec>,
    iterations: usize,
    lambda1: f64,
    lambda2: f64,
    weighting: Weighting,
    input_scale: f64,
    epoch: Option<usize>,
    train_loss: Option<f64>,
    files: Vec<String>,
}

fn param_tensor(v: &[f64]) -> ComplexTensor {
    ComplexTensor::from_fn(&[v.len()], |i| C64::new(v[i], 0.0))
}

fn layer_files(prefix: &str, p: &CnnParams) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for (l, (w, b)) in p.weights.iter().zip(&p.biases).enumerate() {
        out.push((format!("{prefix}_w{l}.cten"), w.clone()));
        out.push((format!("{prefix}_b{l}.cten"), b.clone()));
    }
    out
}

/// Writes `model.json` plus one tensor file per weight and bias to `dir`.
pub fn save_checkpoint(dir: &Path, model: &UnrolledModel, rec: Option<&EpochRecord>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut files = layer_files("nk", &model.nk);
    if let Some(ni) = &model.ni {
        files.extend(layer_files("ni", ni));
    }
    for (name, v) in &files {
        save_tensor(dir.join(name), &param_tensor(v))?;
    }
    let meta = CheckpointMeta {
        nk: model.nk.spec,
        ni: model.ni.as_ref().map(|p| p.spec),
        iterations: model.iterations,
        lambda1: model.lambda1,
        lambda2: model.lambda2,
        weighting: model.weighting,
        input_scale: model.input_scale,
        epoch: rec.map(|r| r.epoch),
        train_loss: rec.map(|r| r.train_loss),
        files: files.into_iter().map(|(n, _)| n).collect(),
    };
    let path = dir.join("model.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?)?;
    Ok(path)
}

fn load_params(dir: &Path, prefix: &str, spec: CnnSpec) -> Result<CnnParams> {
    let mut p = CnnParams::zeros(spec);
    for l in 0..spec.layers {
        for (name, dst) in [
            (format!("{prefix}_w{l}.cten"), &mut p.weights[l]),
            (format!("{prefix}_b{l}.cten"), &mut p.biases[l]),
        ] {
            let t = load_tensor(dir.join(&name))?;
            if t.len() != dst.len() {
                return Err(Error::Format(format!("{name}: expected {} values, found {}", dst.len(), t.len())));
            }
            for (d, v) in dst.iter_mut().zip(t.data()) {
                *d = v.re;
            }
        }
    }
    Ok(p)
}

/// Reads a checkpoint written by [`save_checkpoint`]; `path` is either the
/// directory or its `model.json`.
pub fn load_checkpoint(path: &Path) -> Result<UnrolledModel> {
    let (dir, json) = if path.is_dir() {
        (path.to_path_buf(), path.join("model.json"))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(&json)?)?;
    let model = UnrolledModel {
        nk: load_params(&dir, "nk", meta.nk)?,
        ni: meta.ni.map(|s| load_params(&dir, "ni", s)).transpose()?,
        iterations: meta.iterations,
        lambda1: meta.lambda1,
        lambda2: meta.lambda2,
        weighting: meta.weighting,
        input_scale: meta.input_scale,
    };
    let errs = model.validate();
    if !errs.is_empty() {
        return Err(Error::Format(errs.join("; ")));
    }
    Ok(model)
}

//! Residual CNN priors and the unrolled K-DSLR / H-DSLR networks.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::acquisition::{apply_mask, MultiChannelKSpace};
use crate::error::{invalid, shape_err, Result};
use crate::lifting::Weighting;
use crate::rng::Rng;
use crate::tensor::ComplexTensor;

use super::real::{ConvShape, RealTensor};
use super::tape::{DcSpec, Tape, Value, Var};

/// `layers` convolutions; ReLU after every layer but the last. Input and
/// output both have `channels` real channels (twice the complex bands).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSpec {
    pub layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub channels: usize,
}

impl CnnSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.layers == 0 {
            errs.push("cnn.layers must be >= 1".into());
        }
        if self.filters == 0 && self.layers > 1 {
            errs.push("cnn.filters must be >= 1".into());
        }
        if self.kernel % 2 == 0 {
            errs.push("cnn.kernel must be odd".into());
        }
        if self.channels == 0 || self.channels % 2 != 0 {
            errs.push("cnn.channels must be a positive even number (real/imaginary pairs)".into());
        }
        errs
    }

    pub fn conv_shapes(&self) -> Vec<ConvShape> {
        (0..self.layers)
            .map(|l| ConvShape {
                cin: if l == 0 { self.channels } else { self.filters },
                cout: if l + 1 == self.layers { self.channels } else { self.filters },
                k: self.kernel,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.conv_shapes().iter().map(|s| s.weights() + s.cout).sum()
    }
}

/// Per-layer weights `[F, C, k, k]` (flattened) and biases `[F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnParams {
    pub spec: CnnSpec,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl CnnParams {
    pub fn zeros(spec: CnnSpec) -> Self {
        let shapes = spec.conv_shapes();
        Self {
            spec,
            weights: shapes.iter().map(|s| vec![0.0; s.weights()]).collect(),
            biases: shapes.iter().map(|s| vec![0.0; s.cout]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.spec.param_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Layer-major: weights of layer 0, biases of layer 0, weights of layer 1, ...
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return shape_err(format!("expected {} parameters, got {}", self.len(), flat.len()));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|v| v.is_finite())
    }
}

/// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))` with
/// `fan_in = C k^2`, `fan_out = F k^2`; zero biases.
pub fn xavier_init(rng: &mut Rng, spec: CnnSpec) -> CnnParams {
    let mut p = CnnParams::zeros(spec);
    for (l, s) in spec.conv_shapes().iter().enumerate() {
        let bound = xavier_bound(s);
        for v in p.weights[l].iter_mut() {
            *v = rng.uniform_range(-bound, bound);
        }
    }
    p
}

pub fn xavier_bound(s: &ConvShape) -> f64 {
    let k2 = (s.k * s.k) as f64;
    (6.0 / ((s.cin as f64 + s.cout as f64) * k2)).sqrt()
}

/// Tape handles for one network's parameters.
#[derive(Clone, Debug)]
pub struct CnnVars {
    pub layers: Vec<(Var, Var)>,
}

impl CnnVars {
    pub fn record(tape: &mut Tape, p: &CnnParams) -> Result<Self> {
        let mut layers = Vec::with_capacity(p.weights.len());
        for (w, b) in p.weights.iter().zip(&p.biases) {
            let wv = tape.leaf(Value::Real(RealTensor::new(vec![w.len()], w.clone())?));
            let bv = tape.leaf(Value::Real(RealTensor::new(vec![b.len()], b.clone())?));
            layers.push((wv, bv));
        }
        Ok(Self { layers })
    }

    /// Parameter gradient in [`CnnParams::flatten`] order.
    pub fn gradient(&self, grads: &super::tape::Gradients) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for &(w, b) in &self.layers {
            for v in [w, b] {
                match grads.get(v) {
                    Some(g) => out.extend_from_slice(g.real()?.data()),
                    None => return shape_err("missing parameter gradient"),
                }
            }
        }
        Ok(out)
    }
}

/// The residual branch `N(x)` on real packed input.
pub fn cnn_on_tape(tape: &mut Tape, x: Var, spec: &CnnSpec, vars: &CnnVars) -> Result<Var> {
    let mut h = x;
    for (l, (s, &(w, b))) in spec.conv_shapes().iter().zip(&vars.layers).enumerate() {
        h = tape.conv2d(h, w, b, *s)?;
        if l + 1 < spec.layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// `N(x)` evaluated without recording gradients.
pub fn cnn_forward(x: &RealTensor, p: &CnnParams) -> Result<RealTensor> {
    let mut tape = Tape::new();
    let vars = CnnVars::record(&mut tape, p)?;
    let xv = tape.leaf(Value::Real(x.clone()));
    let y = cnn_on_tape(&mut tape, xv, &p.spec, &vars)?;
    Ok(tape.value(y).real()?.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnrolledModel {
    /// k-space prior `N_k`.
    pub nk: CnnParams,
    /// Image prior `N_I`; required when `lambda2 > 0` and ignored when
    /// `lambda2 == 0`.
    pub ni: Option<CnnParams>,
    pub iterations: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub weighting: Weighting,
    /// Multiplies the k-space input of `N_k` (its output is divided by the
    /// same constant), bringing Fourier-domain magnitudes near unit scale.
    pub input_scale: f64,
}

impl UnrolledModel {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.nk.spec.validate();
        if let Some(ni) = &self.ni {
            errs.extend(ni.spec.validate().into_iter().map(|e| format!("image {e}")));
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            errs.push("lambda1 and lambda2 must be non-negative".into());
        }
        if self.lambda2 > 0.0 && self.ni.is_none() {
            errs.push("lambda2 > 0 needs an image-domain CNN".into());
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            errs.push("input_scale must be positive".into());
        }
        errs
    }

    pub fn param_count(&self) -> usize {
        self.nk.len() + self.ni.as_ref().map_or(0, |p| p.len())
    }

    /// All parameters, `N_k` first.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.nk.flatten();
        if let Some(ni) = &self.ni {
            v.extend(ni.flatten());
        }
        v
    }

    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.nk.len();
        if flat.len() != self.param_count() {
            return shape_err("parameter vector length mismatch");
        }
        self.nk.assign(&flat[..n])?;
        if let Some(ni) = &mut self.ni {
            ni.assign(&flat[n..])?;
        }
        Ok(())
    }

    pub fn is_hybrid(&self) -> bool {
        self.ni.is_some()
    }
}

/// Handles produced by [`record_unrolled`].
pub struct UnrolledGraph {
    pub output: Var,
    pub kspace: Var,
    pub nk: CnnVars,
    pub ni: Option<CnnVars>,
}

impl UnrolledGraph {
    pub fn gradient(&self, grads: &super::tape::Gradients) -> Result<Vec<f64>> {
        let mut g = self.nk.gradient(grads)?;
        if let Some(ni) = &self.ni {
            g.extend(ni.gradient(grads)?);
        }
        Ok(g)
    }
}

/// `Theta = D_k(G(x_hat))` in storage order; the CNN sees the centered,
/// scaled, packed lifting input.
fn denoise_k(tape: &mut Tape, model: &UnrolledModel, vars: &CnnVars, x: Var) -> Result<Var> {
    let gz = match model.weighting {
        Weighting::Gradient => tape.grad_weight(x)?,
        Weighting::Identity => x,
    };
    let c = tape.shift(gz, true)?;
    let s = tape.scale(c, model.input_scale)?;
    let p = tape.pack(s)?;
    let y = cnn_on_tape(tape, p, &model.nk.spec, vars)?;
    let u = tape.unpack(y)?;
    let n = tape.scale(u, 1.0 / model.input_scale)?;
    let d = tape.sub(c, n)?;
    tape.shift(d, false)
}

/// `Phi = F(D_I(F^{-1} x_hat))`.
fn denoise_i(tape: &mut Tape, spec: &CnnSpec, vars: &CnnVars, x: Var) -> Result<Var> {
    let img = tape.ifft2(x)?;
    let p = tape.pack(img)?;
    let y = cnn_on_tape(tape, p, spec, vars)?;
    let u = tape.unpack(y)?;
    let d = tape.sub(img, u)?;
    tape.fft2(d)
}

/// Records the unrolled reconstruction of `b` on `tape`.
pub fn record_unrolled(tape: &mut Tape, model: &UnrolledModel, b: &MultiChannelKSpace) -> Result<UnrolledGraph> {
    let errs = model.validate();
    if !errs.is_empty() {
        return invalid(errs.join("; "));
    }
    let bands = match model.weighting {
        Weighting::Gradient => 2 * b.channels(),
        Weighting::Identity => b.channels(),
    };
    if model.nk.spec.channels != 2 * bands {
        return shape_err(format!(
            "k-space CNN takes {} channels but the data give {}",
            model.nk.spec.channels,
            2 * bands
        ));
    }
    if let Some(ni) = &model.ni {
        if ni.spec.channels != 2 * b.channels() {
            return shape_err("image CNN channel count does not match the data");
        }
    }
    let nk = CnnVars::record(tape, &model.nk)?;
    let ni = model.ni.as_ref().map(|p| CnnVars::record(tape, p)).transpose()?;
    let dc = Arc::new(DcSpec::new(b, model.lambda1, model.lambda2, model.weighting)?);
    let mut x0 = b.data.clone();
    apply_mask(&mut x0, &b.mask);
    let mut x = tape.leaf(Value::Complex(x0));
    for _ in 0..model.iterations {
        let theta = denoise_k(tape, model, &nk, x)?;
        let phi = match (&ni, &model.ni) {
            (Some(vars), Some(p)) if model.lambda2 > 0.0 => Some(denoise_i(tape, &p.spec, vars, x)?),
            _ => None,
        };
        x = tape.dc_solve(Some(theta), phi, dc.clone())?;
    }
    let output = tape.ifft2(x)?;
    Ok(UnrolledGraph {
        output,
        kspace: x,
        nk,
        ni,
    })
}

/// Image-domain reconstruction `Gamma_K`, `[M, H, W]`.
pub fn unrolled_forward(b: &MultiChannelKSpace, model: &UnrolledModel) -> Result<ComplexTensor> {
    let mut tape = Tape::new();
    let g = record_unrolled(&mut tape, model, b)?;
    Ok(tape.value(g.output).complex()?.clone())
}

/// K-DSLR: k-space prior only.
pub fn kdslr_forward(b: &MultiChannelKSpace, model: &UnrolledModel) -> Result<ComplexTensor> {
    if model.lambda2 != 0.0 {
        return invalid("K-DSLR expects lambda2 = 0");
    }
    unrolled_forward(b, model)
}

/// H-DSLR: k-space and image priors.
pub fn hdslr_forward(b: &MultiChannelKSpace, model: &UnrolledModel) -> Result<ComplexTensor> {
    if model.ni.is_none() {
        return invalid("H-DSLR needs an image-domain CNN");
    }
    unrolled_forward(b, model)
}

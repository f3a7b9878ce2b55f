//! Randomized finite-difference checks of tape gradients.

use std::sync::Arc;

use crate::acquisition::MultiChannelKSpace;
use crate::error::{shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{ComplexTensor, C64};

use super::model::{record_unrolled, UnrolledModel};
use super::real::RealTensor;
use super::tape::{Tape, Value, Var};
use super::train::loss_and_gradient;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per direction: `|fd - ad| / max(|fd|, |ad|, 1e-8)`.
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

fn random_like(v: &Value, rng: &mut Rng) -> Value {
    match v {
        Value::Real(r) => Value::Real(
            RealTensor::new(r.shape().to_vec(), (0..r.len()).map(|_| rng.normal()).collect()).expect("same shape"),
        ),
        Value::Complex(c) => Value::Complex(rng.complex_normal_tensor(c.shape(), 1.0)),
        Value::Scalar(_) => Value::Scalar(rng.normal()),
    }
}

fn sq_norm(v: &Value) -> f64 {
    match v {
        Value::Real(r) => r.norm_sqr(),
        Value::Complex(c) => c.norm_sqr(),
        Value::Scalar(s) => s * s,
    }
}

/// Real inner product, treating complex entries as `(re, im)` pairs.
fn real_dot(a: &Value, b: &Value) -> Result<f64> {
    match (a, b) {
        (Value::Real(x), Value::Real(y)) => Ok(x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum()),
        (Value::Complex(x), Value::Complex(y)) => Ok(x.dot(y)?.re),
        (Value::Scalar(x), Value::Scalar(y)) => Ok(x * y),
        _ => shape_err("gradient kind does not match its input"),
    }
}

fn axpy(x: &Value, s: f64, d: &Value) -> Value {
    match (x, d) {
        (Value::Real(a), Value::Real(b)) => {
            let mut out = a.clone();
            out.add_assign(&b.scaled(s));
            Value::Real(out)
        }
        (Value::Complex(a), Value::Complex(b)) => {
            let mut out = a.clone();
            out.axpy(C64::new(s, 0.0), b).expect("same shape");
            Value::Complex(out)
        }
        (Value::Scalar(a), Value::Scalar(b)) => Value::Scalar(a + s * b),
        _ => unreachable!("directions are drawn with matching kinds"),
    }
}

fn zero_like(v: &Value) -> Value {
    match v {
        Value::Real(r) => Value::Real(RealTensor::zeros(r.shape())),
        Value::Complex(c) => Value::Complex(ComplexTensor::zeros(c.shape())),
        Value::Scalar(_) => Value::Scalar(0.0),
    }
}

fn evaluate<F>(inputs: &[Value], build: &F) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let root = build(&mut tape, &vars)?;
    tape.value(root).scalar()?;
    Ok((tape, vars, root))
}

/// Compares the tape gradient of the scalar `build(inputs)` with central
/// differences along `directions` random unit directions over all inputs.
pub fn check_gradients<F>(inputs: &[Value], build: F, directions: usize, step: f64, rng: &mut Rng) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, root) = evaluate(inputs, &build)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Value> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get(v).cloned().unwrap_or_else(|| zero_like(x)))
        .collect();
    let mut rel_errors = Vec::with_capacity(directions);
    for _ in 0..directions {
        let mut dir: Vec<Value> = inputs.iter().map(|x| random_like(x, rng)).collect();
        let norm = dir.iter().map(sq_norm).sum::<f64>().sqrt();
        for d in dir.iter_mut() {
            *d = axpy(&zero_like(d), 1.0 / norm, d);
        }
        let mut ad = 0.0;
        for (g, d) in analytic.iter().zip(&dir) {
            ad += real_dot(g, d)?;
        }
        let f = |s: f64| -> Result<f64> {
            let shifted: Vec<Value> = inputs.iter().zip(&dir).map(|(x, d)| axpy(x, s, d)).collect();
            let (t, _, r) = evaluate(&shifted, &build)?;
            t.value(r).scalar()
        };
        let fd = (f(step)? - f(-step)?) / (2.0 * step);
        rel_errors.push((fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8));
    }
    Ok(GradCheckReport { rel_errors })
}

/// Finite-difference check of the training-loss gradient with respect to
/// every CNN parameter of `model`.
pub fn check_model_gradients(
    model: &UnrolledModel,
    b: &MultiChannelKSpace,
    truth: &ComplexTensor,
    directions: usize,
    step: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let (_, grad) = loss_and_gradient(model, b, truth)?;
    let params = model.flatten();
    let mut probe = model.clone();
    let mut rel_errors = Vec::with_capacity(directions);
    for _ in 0..directions {
        let mut dir: Vec<f64> = (0..params.len()).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let ad: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let mut f = |s: f64| -> Result<f64> {
            let shifted: Vec<f64> = params.iter().zip(&dir).map(|(p, d)| p + s * d).collect();
            probe.assign(&shifted)?;
            let mut tape = Tape::new();
            let g = record_unrolled(&mut tape, &probe, b)?;
            let loss = tape.mse(g.output, Arc::new(truth.clone()))?;
            tape.value(loss).scalar()
        };
        let fd = (f(step)? - f(-step)?) / (2.0 * step);
        rel_errors.push((fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8));
    }
    Ok(GradCheckReport { rel_errors })
}

//! Conjugate gradient for Hermitian positive semi-definite operators on
//! [`ComplexTensor`] values.

use crate::error::Result;
use crate::tensor::{ComplexTensor, C64};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CgConfig {
    pub max_iters: usize,
    /// Stop once `||b - A x|| <= tol * ||b||`.
    pub tol: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self { max_iters: 30, tol: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: ComplexTensor,
    pub iterations: usize,
    /// Final relative residual `||b - A x|| / ||b||`.
    pub residual: f64,
    pub converged: bool,
}

/// Solves `A x = b` from the starting point `x0`.
///
/// The recursive residual drifts from the true one over long runs, so the
/// reported residual is recomputed from `A x` at exit.
pub fn conjugate_gradient<F>(mut apply: F, b: &ComplexTensor, x0: ComplexTensor, cfg: &CgConfig) -> Result<CgOutcome>
where
    F: FnMut(&ComplexTensor) -> Result<ComplexTensor>,
{
    b.check_same(&x0)?;
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Ok(CgOutcome {
            x: ComplexTensor::zeros(b.shape()),
            iterations: 0,
            residual: 0.0,
            converged: true,
        });
    }
    let mut x = x0;
    let mut r = b - &apply(&x)?;
    let mut p = r.clone();
    let mut rr = r.norm_sqr();
    let mut iterations = 0;
    while iterations < cfg.max_iters && rr.sqrt() > cfg.tol * bnorm {
        let ap = apply(&p)?;
        let pap = p.dot(&ap)?.re;
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        x.axpy(C64::new(alpha, 0.0), &p)?;
        r.axpy(C64::new(-alpha, 0.0), &ap)?;
        let rr_new = r.norm_sqr();
        let beta = rr_new / rr;
        rr = rr_new;
        p = &r + &(&p * C64::new(beta, 0.0));
        iterations += 1;
    }
    let residual = (b - &apply(&x)?).norm() / bnorm;
    Ok(CgOutcome {
        x,
        iterations,
        residual,
        converged: residual <= cfg.tol * 1.0001 || rr.sqrt() <= cfg.tol * bnorm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn solves_diagonal_system() {
        let d: Vec<f64> = (0..16).map(|i| 1.0 + i as f64).collect();
        let b = Rng::new(1).complex_normal_tensor(&[16], 1.0);
        let apply = |x: &ComplexTensor| {
            Ok(ComplexTensor::new(
                vec![16],
                x.data().iter().zip(&d).map(|(v, s)| v * *s).collect(),
            )?)
        };
        let out = conjugate_gradient(apply, &b, ComplexTensor::zeros(&[16]), &CgConfig { max_iters: 40, tol: 1e-12 }).unwrap();
        assert!(out.converged);
        for i in 0..16 {
            assert!((out.x.data()[i] * d[i] - b.data()[i]).norm() < 1e-10);
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let b = ComplexTensor::zeros(&[4]);
        let out = conjugate_gradient(|x| Ok(x.clone()), &b, ComplexTensor::zeros(&[4]), &CgConfig::default()).unwrap();
        assert_eq!(out.x.norm(), 0.0);
        assert_eq!(out.iterations, 0);
    }
}

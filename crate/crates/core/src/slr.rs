//! Classical structured low-rank recovery: IRLS with the re-weighted null
//! space, the variable-split alternation with the first-order residual
//! denoiser, and the single-solve calibrated path.
//!
//! All solvers work on the k-space unknown `Gamma_hat` (`[M, H, W]`, standard
//! DFT order) and report the image-domain result as well.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acquisition::{apply_mask, MultiChannelKSpace, SamplingMask};
use crate::cg::{conjugate_gradient, CgConfig, CgOutcome};
use crate::error::{invalid, Error, Result};
use crate::lifting::{
    apply_filterbank, apply_filterbank_adjoint, build_filterbank, lift_gram, lift_input, lift_input_adjoint,
    nullspace_weight, residual_projector, spectral_max, FilterBank, LiftingConfig, LiftingSpec, NullSpaceBasis,
    Stacking, WeightedLift,
};
use crate::tensor::{ComplexTensor, C64};

/// `Gamma_hat -> ||T(G(Gamma_hat)) Q||_F^2` and its half-gradient
/// `G^H T^*(T(G Gamma_hat) Q Q^H)`.
///
/// Thin bases go through the filterbank; full IRLS weights through the
/// explicit lifted matrix.
#[derive(Clone, Debug)]
pub struct Penalty {
    spec: LiftingSpec,
    kind: PenaltyKind,
}

#[derive(Clone, Debug)]
enum PenaltyKind {
    Empty,
    Bank(FilterBank),
    Weighted(WeightedLift),
}

impl Penalty {
    pub fn new(spec: &LiftingSpec, basis: &NullSpaceBasis) -> Result<Self> {
        let kind = if basis.filters() == 0 {
            PenaltyKind::Empty
        } else if 2 * basis.filters() < spec.cols() {
            PenaltyKind::Bank(build_filterbank(&basis.q, spec)?)
        } else {
            PenaltyKind::Weighted(WeightedLift::new(*spec, basis)?)
        };
        Ok(Self { spec: *spec, kind })
    }

    pub fn value(&self, khat: &ComplexTensor) -> Result<f64> {
        match &self.kind {
            PenaltyKind::Empty => Ok(0.0),
            PenaltyKind::Bank(bank) => Ok(apply_filterbank(bank, &lift_input(&self.spec, khat)?)?.norm_sqr()),
            PenaltyKind::Weighted(w) => w.penalty(&lift_input(&self.spec, khat)?),
        }
    }

    pub fn apply(&self, khat: &ComplexTensor) -> Result<ComplexTensor> {
        let z = match &self.kind {
            PenaltyKind::Empty => return Ok(ComplexTensor::zeros(khat.shape())),
            PenaltyKind::Bank(bank) => {
                let y = apply_filterbank(bank, &lift_input(&self.spec, khat)?)?;
                apply_filterbank_adjoint(bank, &y)?
            }
            PenaltyKind::Weighted(w) => w.apply(&lift_input(&self.spec, khat)?)?,
        };
        lift_input_adjoint(&self.spec, &z)
    }
}

fn masked(x: &ComplexTensor, mask: &SamplingMask) -> ComplexTensor {
    let mut y = x.clone();
    apply_mask(&mut y, mask);
    y
}

/// `||S Gamma_hat - B||^2`, with the unnormalized transform.
fn data_term(khat: &ComplexTensor, b: &MultiChannelKSpace) -> Result<f64> {
    Ok((&masked(khat, &b.mask) - &masked(&b.data, &b.mask)).norm_sqr())
}

fn dc_residual(khat: &ComplexTensor, b: &MultiChannelKSpace) -> Result<f64> {
    let bn = masked(&b.data, &b.mask).norm();
    let d = data_term(khat, b)?.sqrt();
    Ok(if bn > 0.0 { d / bn } else { d })
}

fn check_data(b: &MultiChannelKSpace, spec: &LiftingSpec) -> Result<()> {
    let grid = b.data.grid()?;
    if grid != spec.grid || b.channels() != spec.channels {
        return Err(Error::Shape(format!(
            "data [{}, {}, {}] does not match lifting grid {:?} with {} channels",
            b.channels(),
            grid.0,
            grid.1,
            spec.grid,
            spec.channels
        )));
    }
    Ok(())
}

/// `||A(Gamma) - B||^2 + lambda ||T(G(Gamma_hat)) Q||_F^2` for an image-domain `Gamma`.
pub fn slr_cost(
    gamma: &ComplexTensor,
    b: &MultiChannelKSpace,
    basis: &NullSpaceBasis,
    lambda: f64,
    spec: &LiftingSpec,
) -> Result<f64> {
    check_data(b, spec)?;
    let khat = gamma.fft2_last()?;
    kspace_cost(&khat, b, &Penalty::new(spec, basis)?, lambda)
}

fn kspace_cost(khat: &ComplexTensor, b: &MultiChannelKSpace, pen: &Penalty, lambda: f64) -> Result<f64> {
    let p = if lambda == 0.0 { 0.0 } else { pen.value(khat)? };
    Ok(data_term(khat, b)? + lambda * p)
}

/// Result of one CG image update.
#[derive(Clone, Debug)]
pub struct ImageUpdate {
    pub kspace: ComplexTensor,
    pub image: ComplexTensor,
    pub cg: CgOutcome,
}

/// Solves `(S + lambda M_Q) Gamma_hat = S B` by CG, warm-started from `init`
/// (zero-filled k-space when absent).
pub fn irls_image_update(
    b: &MultiChannelKSpace,
    basis: &NullSpaceBasis,
    lambda: f64,
    spec: &LiftingSpec,
    cg: &CgConfig,
    init: Option<&ComplexTensor>,
) -> Result<ImageUpdate> {
    check_data(b, spec)?;
    let pen = Penalty::new(spec, basis)?;
    penalized_solve(b, &pen, lambda, cg, init)
}

fn penalized_solve(
    b: &MultiChannelKSpace,
    pen: &Penalty,
    lambda: f64,
    cg: &CgConfig,
    init: Option<&ComplexTensor>,
) -> Result<ImageUpdate> {
    let rhs = masked(&b.data, &b.mask);
    let x0 = init.cloned().unwrap_or_else(|| rhs.clone());
    let op = |x: &ComplexTensor| -> Result<ComplexTensor> {
        let mut y = masked(x, &b.mask);
        if lambda != 0.0 {
            y.axpy(C64::new(lambda, 0.0), &pen.apply(x)?)?;
        }
        Ok(y)
    };
    let out = conjugate_gradient(op, &rhs, x0, cg)?;
    Ok(ImageUpdate {
        image: out.x.ifft2_last()?,
        kspace: out.x.clone(),
        cg: out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub cost: f64,
    pub dc_residual: f64,
    pub epsilon: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct ReconResult {
    pub kspace: ComplexTensor,
    pub image: ComplexTensor,
    pub trace: Vec<TraceRow>,
    /// IRLS only: objective with the frozen `Q` before and after each image update.
    pub majorant: Vec<(f64, f64)>,
    pub cg_converged: bool,
    pub stage_seconds: BTreeMap<String, f64>,
}

impl ReconResult {
    fn from_kspace(kspace: ComplexTensor) -> Result<Self> {
        Ok(Self {
            image: kspace.ifft2_last()?,
            kspace,
            trace: Vec::new(),
            majorant: Vec::new(),
            cg_converged: true,
            stage_seconds: BTreeMap::new(),
        })
    }
}

pub fn write_trace_csv(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Continuation schedule for `eps` relative to the largest Gram eigenvalue at
/// the zero-filled start.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsSchedule {
    pub initial_rel: f64,
    pub decay: f64,
    pub floor_rel: f64,
}

impl Default for EpsSchedule {
    fn default() -> Self {
        Self {
            initial_rel: 1e-2,
            decay: 0.5,
            floor_rel: 1e-9,
        }
    }
}

impl EpsSchedule {
    fn validate(&self, errs: &mut Vec<String>, prefix: &str) {
        if !(self.initial_rel > 0.0) {
            errs.push(format!("{prefix}.initial_rel must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            errs.push(format!("{prefix}.decay must be in (0, 1]"));
        }
        if !(self.floor_rel > 0.0) {
            errs.push(format!("{prefix}.floor_rel must be positive"));
        }
    }
}

fn default_lifting() -> LiftingConfig {
    LiftingConfig {
        stacking: Stacking::HorizontalMultichannel,
        window: [5, 5],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrlsConfig {
    pub lambda: f64,
    pub eps: EpsSchedule,
    pub outer_iters: usize,
    pub cg: CgConfig,
    /// Early stop once the relative change of the logged cost drops below this.
    pub stop_tol: f64,
    pub lifting: LiftingConfig,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            eps: EpsSchedule::default(),
            outer_iters: 50,
            cg: CgConfig::default(),
            stop_tol: 1e-6,
            lifting: default_lifting(),
        }
    }
}

impl IrlsConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lambda > 0.0) {
            errs.push("irls.lambda must be positive".into());
        }
        self.eps.validate(&mut errs, "irls.eps");
        if self.outer_iters == 0 {
            errs.push("irls.outer_iters must be >= 1".into());
        }
        validate_cg(&self.cg, &mut errs, "irls.cg");
        validate_window(&self.lifting, &mut errs, "irls.lifting");
        errs
    }
}

fn validate_cg(cg: &CgConfig, errs: &mut Vec<String>, prefix: &str) {
    if cg.max_iters == 0 {
        errs.push(format!("{prefix}.max_iters must be >= 1"));
    }
    if !(cg.tol > 0.0) {
        errs.push(format!("{prefix}.tol must be positive"));
    }
}

fn validate_window(l: &LiftingConfig, errs: &mut Vec<String>, prefix: &str) {
    if l.window.iter().any(|&w| w == 0) {
        errs.push(format!("{prefix}.window extents must be >= 1"));
    }
}

fn secs(t: &Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Alternates the Gram re-weighting with the CG image update, starting from
/// the zero-filled k-space.
pub fn irls_solve(b: &MultiChannelKSpace, cfg: &IrlsConfig) -> Result<ReconResult> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return invalid(errs.join("; "));
    }
    let spec = cfg.lifting.spec(b.data.grid()?, b.channels())?;
    let start = Instant::now();
    let mut x = masked(&b.data, &b.mask);
    let smax = spectral_max(&lift_gram(&lift_input(&spec, &x)?, &spec)?);
    if smax == 0.0 {
        return ReconResult::from_kspace(x);
    }
    let floor = cfg.eps.floor_rel * smax;
    let mut eps = (cfg.eps.initial_rel * smax).max(floor);
    let mut result = ReconResult::from_kspace(x.clone())?;
    let (mut t_weight, mut t_solve) = (0.0, 0.0);
    let mut prev_cost: Option<f64> = None;
    for it in 0..cfg.outer_iters {
        let t0 = Instant::now();
        let gram = lift_gram(&lift_input(&spec, &x)?, &spec)?;
        let basis = nullspace_weight(&gram, eps)?;
        let pen = Penalty::new(&spec, &basis)?;
        t_weight += secs(&t0);

        let t1 = Instant::now();
        let before = kspace_cost(&x, b, &pen, cfg.lambda)?;
        let upd = penalized_solve(b, &pen, cfg.lambda, &cfg.cg, Some(&x))?;
        x = upd.kspace;
        let after = kspace_cost(&x, b, &pen, cfg.lambda)?;
        t_solve += secs(&t1);

        result.cg_converged &= upd.cg.converged;
        result.majorant.push((before, after));
        result.trace.push(TraceRow {
            iteration: it,
            cost: after,
            dc_residual: dc_residual(&x, b)?,
            epsilon: eps,
            seconds: secs(&start),
        });
        if let Some(p) = prev_cost {
            if (p - after).abs() <= cfg.stop_tol * after.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }
        prev_cost = Some(after);
        eps = (eps * cfg.eps.decay).max(floor);
    }
    result.image = x.ifft2_last()?;
    result.kspace = x;
    result.stage_seconds.insert("weight".into(), t_weight);
    result.stage_seconds.insert("solve".into(), t_solve);
    result.stage_seconds.insert("total".into(), secs(&start));
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub lambda: f64,
    pub beta: f64,
    pub iterations: usize,
    pub stop_tol: f64,
    /// Schedule used when the null space is recomputed every iteration.
    pub eps: EpsSchedule,
    pub lifting: LiftingConfig,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta: 100.0,
            iterations: 200,
            stop_tol: 1e-10,
            eps: EpsSchedule::default(),
            lifting: default_lifting(),
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lambda > 0.0) {
            errs.push("split.lambda must be positive".into());
        }
        if !(self.beta > 0.0) {
            errs.push("split.beta must be positive".into());
        }
        if !(self.lambda < self.beta) {
            errs.push("split.lambda must be smaller than split.beta for the first-order denoiser".into());
        }
        if self.iterations == 0 {
            errs.push("split.iterations must be >= 1".into());
        }
        self.eps.validate(&mut errs, "split.eps");
        validate_window(&self.lifting, &mut errs, "split.lifting");
        errs
    }
}

/// Where the split solver takes its null-space filters from.
#[derive(Clone, Debug)]
pub enum QSource {
    /// Re-estimate the IRLS weight from the current iterate every iteration.
    Recompute,
    Fixed(NullSpaceBasis),
}

/// Pointwise solve of `(S + beta G^H G) Gamma_hat = S B + beta G^H Z_hat`,
/// where `gz` is `G^H Z_hat` already mapped back to storage order.
fn split_image_update(b: &MultiChannelKSpace, gz: &ComplexTensor, beta: f64, spec: &LiftingSpec) -> Result<ComplexTensor> {
    let (h, w) = spec.grid;
    let wg = spec.weighting();
    let mut out = ComplexTensor::zeros(b.data.shape());
    for c in 0..b.channels() {
        let (bp, gp) = (b.data.plane(c), gz.plane(c));
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let m = b.mask.weight(i);
                let den = m + beta * wg.gram_weight(y, x, h, w);
                dst[i] = if den > 0.0 {
                    (bp[i] * m + gp[i] * beta) / den
                } else {
                    C64::new(0.0, 0.0)
                };
            }
        }
    }
    Ok(out)
}

/// Variable-split alternation `Z <- L(G Gamma_hat)`, `Gamma_hat <- analytic DC`,
/// starting from the zero-filled k-space.
pub fn split_solve(b: &MultiChannelKSpace, cfg: &SplitConfig, q: &QSource) -> Result<ReconResult> {
    split_solve_from(b, cfg, q, None)
}

pub fn split_solve_from(
    b: &MultiChannelKSpace,
    cfg: &SplitConfig,
    q: &QSource,
    init: Option<&ComplexTensor>,
) -> Result<ReconResult> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return invalid(errs.join("; "));
    }
    let spec = cfg.lifting.spec(b.data.grid()?, b.channels())?;
    let start = Instant::now();
    let mut x = match init {
        Some(x0) => {
            x0.check_same(&b.data)?;
            x0.clone()
        }
        None => masked(&b.data, &b.mask),
    };
    let ratio = cfg.lambda / cfg.beta;
    let (mut eps, floor) = match q {
        QSource::Recompute => {
            let smax = spectral_max(&lift_gram(&lift_input(&spec, &x)?, &spec)?);
            let floor = cfg.eps.floor_rel * smax;
            ((cfg.eps.initial_rel * smax).max(floor), floor)
        }
        QSource::Fixed(basis) => (basis.eps, basis.eps),
    };
    let mut result = ReconResult::from_kspace(x.clone())?;
    for it in 0..cfg.iterations {
        let basis = match q {
            QSource::Fixed(basis) => basis.clone(),
            QSource::Recompute if eps > 0.0 => nullspace_weight(&lift_gram(&lift_input(&spec, &x)?, &spec)?, eps)?,
            QSource::Recompute => NullSpaceBasis::empty(spec.cols()),
        };
        let bank = build_filterbank(&basis.q, &spec)?;
        let z = residual_projector(&bank, &lift_input(&spec, &x)?, ratio)?;
        let next = split_image_update(b, &lift_input_adjoint(&spec, &z)?, cfg.beta, &spec)?;
        let change = (&next - &x).norm() / x.norm().max(f64::MIN_POSITIVE);
        x = next;
        let pen = Penalty::new(&spec, &basis)?;
        result.trace.push(TraceRow {
            iteration: it,
            cost: kspace_cost(&x, b, &pen, cfg.lambda)?,
            dc_residual: dc_residual(&x, b)?,
            epsilon: eps,
            seconds: secs(&start),
        });
        if change <= cfg.stop_tol {
            break;
        }
        if matches!(q, QSource::Recompute) {
            eps = (eps * cfg.eps.decay).max(floor);
        }
    }
    result.image = x.ifft2_last()?;
    result.kspace = x;
    result.stage_seconds.insert("total".into(), secs(&start));
    Ok(result)
}

/// One CG solve of the fixed-`Q` problem.
pub fn calibrated_solve(
    b: &MultiChannelKSpace,
    basis: &NullSpaceBasis,
    lambda: f64,
    spec: &LiftingSpec,
    cg: &CgConfig,
) -> Result<ReconResult> {
    check_data(b, spec)?;
    let start = Instant::now();
    let pen = Penalty::new(spec, basis)?;
    let upd = penalized_solve(b, &pen, lambda, cg, None)?;
    let mut result = ReconResult::from_kspace(upd.kspace)?;
    result.cg_converged = upd.cg.converged;
    result.trace.push(TraceRow {
        iteration: 0,
        cost: kspace_cost(&result.kspace, b, &pen, lambda)?,
        dc_residual: dc_residual(&result.kspace, b)?,
        epsilon: basis.eps,
        seconds: secs(&start),
    });
    result.stage_seconds.insert("total".into(), secs(&start));
    Ok(result)
}

//! Reconstruction quality metrics, the annihilation probe, and PGM/CSV
//! emission.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::lifting::{apply_weighting, centered, uncentered, Weighting};
use crate::rng::Rng;
use crate::slr::csv_err;
use crate::tensor::{ComplexTensor, C64};
use crate::unrolled::model::{cnn_forward, CnnParams, UnrolledModel};
use crate::unrolled::real::{pack, unpack};

/// `20 log10(||rec|| / ||org - rec||)`; `+inf` when the two coincide.
pub fn snr(org: &ComplexTensor, rec: &ComplexTensor) -> Result<f64> {
    org.check_same(rec)?;
    let err = (org - rec).norm();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (rec.norm() / err).log10())
}

/// Per-pixel magnitude; multi-channel `[M, H, W]` input is combined by root
/// sum of squares over channels. Returns the `(H, W)` grid and the values.
pub fn magnitude(x: &ComplexTensor) -> Result<((usize, usize), Vec<f64>)> {
    let grid = x.grid()?;
    let hw = grid.0 * grid.1;
    let mut out = vec![0.0; hw];
    for (i, v) in x.data().iter().enumerate() {
        out[i % hw] += v.norm_sqr();
    }
    out.iter_mut().for_each(|v| *v = v.sqrt());
    Ok((grid, out))
}

fn peak_of(org: &[f64]) -> f64 {
    org.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// PSNR of real images: `20 log10(peak sqrt(N) / ||org - rec||)` with
/// `peak = max |org|`.
pub fn psnr_real(org: &[f64], rec: &[f64]) -> Result<f64> {
    if org.len() != rec.len() || org.is_empty() {
        return shape_err("psnr needs two non-empty images of equal size");
    }
    let err = org.iter().zip(rec).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak_of(org) * (org.len() as f64).sqrt() / err).log10())
}

pub fn psnr(org: &ComplexTensor, rec: &ComplexTensor) -> Result<f64> {
    org.check_same(rec)?;
    psnr_real(&magnitude(org)?.1, &magnitude(rec)?.1)
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully contained 11x11 Gaussian windows, dynamic range
/// `max |org|`.
pub fn ssim_real(org: &[f64], rec: &[f64], shape: (usize, usize)) -> Result<f64> {
    let (h, w) = shape;
    if org.len() != h * w || rec.len() != h * w {
        return shape_err("ssim image size does not match its grid");
    }
    if h < SSIM_WIN || w < SSIM_WIN {
        return invalid(format!("ssim needs at least {SSIM_WIN}x{SSIM_WIN} images"));
    }
    let peak = peak_of(org);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WIN + 1, w - SSIM_WIN + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WIN {
                for dx in 0..SSIM_WIN {
                    let wt = g[dy] * g[dx];
                    let i = (y + dy) * w + x + dx;
                    let (a, b) = (org[i], rec[i]);
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += if den == 0.0 { 1.0 } else { num / den };
        }
    }
    Ok(total / (oh * ow) as f64)
}

pub fn ssim(org: &ComplexTensor, rec: &ComplexTensor) -> Result<f64> {
    org.check_same(rec)?;
    let (grid, a) = magnitude(org)?;
    ssim_real(&a, &magnitude(rec)?.1, grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub snr_db: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricRow {
    pub fn compute(id: impl Into<String>, org: &ComplexTensor, rec: &ComplexTensor) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            snr_db: snr(org, rec)?,
            psnr_db: psnr(org, rec)?,
            ssim: ssim(org, rec)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

fn aggregate(v: impl Iterator<Item = f64>) -> Aggregate {
    let v: Vec<f64> = v.collect();
    if v.is_empty() {
        return Aggregate { mean: f64::NAN, std: f64::NAN };
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Aggregate { mean, std: var.sqrt() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn snr(&self) -> Aggregate {
        aggregate(self.rows.iter().map(|r| r.snr_db))
    }

    pub fn psnr(&self) -> Aggregate {
        aggregate(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn ssim(&self) -> Aggregate {
        aggregate(self.rows.iter().map(|r| r.ssim))
    }

    pub fn summary(&self) -> String {
        let (s, p, m) = (self.snr(), self.psnr(), self.ssim());
        format!(
            "{}: n={} snr={:.2}±{:.2} dB psnr={:.2}±{:.2} dB ssim={:.4}±{:.4}",
            self.label,
            self.rows.len(),
            s.mean,
            s.std,
            p.mean,
            p.std,
            m.mean,
            m.std
        )
    }

    /// One header line plus one line per example.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, label: impl Into<String>) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
        let rows = rd.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>().map_err(csv_err)?;
        Ok(Self {
            label: label.into(),
            rows,
        })
    }
}

/// Plain (P2) 16-bit PGM with values scaled linearly from `[0, max]` to
/// `[0, 65535]`; negative values clamp to zero.
pub fn encode_pgm(values: &[f64], shape: (usize, usize)) -> Result<String> {
    let (h, w) = shape;
    if values.len() != h * w {
        return shape_err("pgm payload does not match its grid");
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P2\n{w} {h}\n65535\n");
    for row in values.chunks(w) {
        for (i, chunk) in row.chunks(10).enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let line: Vec<String> = chunk
                .iter()
                .map(|&v| {
                    let q = if max > 0.0 { (v.max(0.0) / max * 65535.0).round() } else { 0.0 };
                    (q as u16).to_string()
                })
                .collect();
            out.push_str(&line.join(" "));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, values: &[f64], shape: (usize, usize)) -> Result<()> {
    std::fs::write(path, encode_pgm(values, shape)?)?;
    Ok(())
}

/// Parses a plain PGM; returns the grid, maxval and samples.
pub fn parse_pgm(text: &str) -> Result<((usize, usize), u16, Vec<u16>)> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(Error::Format("not a plain PGM (P2) file".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad or missing PGM {what}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PGM maxval {maxval} out of range")));
    }
    let mut data = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let v = num("sample")?;
        if v > maxval {
            return Err(Error::Format("PGM sample exceeds maxval".into()));
        }
        data.push(v as u16);
    }
    Ok(((h, w), maxval as u16, data))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageKind {
    Magnitude,
    ErrorMap,
}

/// Magnitude image of `x`, or the error map `|x - reference|` for
/// [`ImageKind::ErrorMap`].
pub fn emit_image(path: &Path, x: &ComplexTensor, kind: ImageKind, reference: Option<&ComplexTensor>) -> Result<()> {
    let (grid, values) = match (kind, reference) {
        (ImageKind::Magnitude, _) => magnitude(x)?,
        (ImageKind::ErrorMap, Some(r)) => {
            x.check_same(r)?;
            magnitude(&(x - r))?
        }
        (ImageKind::ErrorMap, None) => return invalid("an error map needs a reference image"),
    };
    write_pgm(path, &values, grid)
}

/// Black-box operator probed by [`annihilation_probe`]: maps a centered
/// lifting input `[bands, H, W]` to outputs on the same centered grid.
pub trait ProbeOperator: Sync {
    fn respond(&self, z: &ComplexTensor) -> Result<ComplexTensor>;
}

/// The `N_k` branch of a trained model.
pub struct CnnProbe<'a> {
    pub params: &'a CnnParams,
    pub input_scale: f64,
}

impl<'a> CnnProbe<'a> {
    pub fn from_model(model: &'a UnrolledModel) -> Self {
        Self {
            params: &model.nk,
            input_scale: model.input_scale,
        }
    }
}

impl ProbeOperator for CnnProbe<'_> {
    fn respond(&self, z: &ComplexTensor) -> Result<ComplexTensor> {
        let y = cnn_forward(&pack(&z.scale(self.input_scale))?, self.params)?;
        let out = unpack(&y)?.scale(1.0 / self.input_scale);
        if !out.all_finite() {
            return Err(Error::Numerical("probed network produced non-finite output".into()));
        }
        Ok(out)
    }
}

/// Linear bank of circular k-space convolutions. Filter `f` holds
/// `bands x fy x fx` taps (band-major, rows then columns) at offsets
/// centered on the window; output `f` sums its per-band convolutions.
#[derive(Clone, Debug)]
pub struct CircularBank {
    pub bands: usize,
    pub window: (usize, usize),
    pub filters: Vec<Vec<C64>>,
}

impl CircularBank {
    pub fn new(bands: usize, window: (usize, usize), filters: Vec<Vec<C64>>) -> Result<Self> {
        let taps = bands * window.0 * window.1;
        if bands == 0 || window.0 == 0 || window.1 == 0 || filters.iter().any(|f| f.len() != taps) {
            return shape_err(format!("every filter needs {taps} taps"));
        }
        Ok(Self { bands, window, filters })
    }

    fn offset(&self, dy: usize, dx: usize) -> (i64, i64) {
        (dy as i64 - (self.window.0 / 2) as i64, dx as i64 - (self.window.1 / 2) as i64)
    }

    /// Image-domain multiplier `h_{f,b}(r) = sum_m h[m] exp(j 2 pi m . r / N)`
    /// of filter `f` on band `b`; convolution in k-space is multiplication
    /// by this map after the inverse DFT.
    pub fn spatial_response(&self, f: usize, b: usize, grid: (usize, usize)) -> Vec<C64> {
        let (h, w) = grid;
        let (fy, fx) = self.window;
        let taps = &self.filters[f][b * fy * fx..(b + 1) * fy * fx];
        let mut out = vec![C64::new(0.0, 0.0); h * w];
        for (i, o) in out.iter_mut().enumerate() {
            let (ry, rx) = ((i / w) as f64, (i % w) as f64);
            for dy in 0..fy {
                for dx in 0..fx {
                    let (my, mx) = self.offset(dy, dx);
                    let phase = 2.0 * PI * (my as f64 * ry / h as f64 + mx as f64 * rx / w as f64);
                    *o += taps[dy * fx + dx] * C64::from_polar(1.0, phase);
                }
            }
        }
        out
    }

    /// Limit of the probe's SOS map for perturbations injected in the
    /// weighted domain: `2 sigma^2 sum_f sum_b |h_{f,b}(r)|^2`.
    pub fn analytic_sos(&self, grid: (usize, usize), sigma: f64) -> Vec<f64> {
        let mut sos = vec![0.0; grid.0 * grid.1];
        for f in 0..self.filters.len() {
            for b in 0..self.bands {
                for (s, v) in sos.iter_mut().zip(self.spatial_response(f, b, grid)) {
                    *s += 2.0 * sigma * sigma * v.norm_sqr();
                }
            }
        }
        sos
    }
}

impl ProbeOperator for CircularBank {
    fn respond(&self, z: &ComplexTensor) -> Result<ComplexTensor> {
        if z.ndim() != 3 || z.planes() != self.bands {
            return shape_err(format!("bank expects [{}, H, W], got {:?}", self.bands, z.shape()));
        }
        let (h, w) = z.grid()?;
        let (fy, fx) = self.window;
        let mut out = ComplexTensor::zeros(&[self.filters.len(), h, w]);
        for (f, taps) in self.filters.iter().enumerate() {
            let dst = out.plane_mut(f);
            for b in 0..self.bands {
                let src = z.plane(b);
                for dy in 0..fy {
                    for dx in 0..fx {
                        let t = taps[(b * fy + dy) * fx + dx];
                        if t == C64::new(0.0, 0.0) {
                            continue;
                        }
                        let (my, mx) = self.offset(dy, dx);
                        for y in 0..h {
                            let sy = (y as i64 - my).rem_euclid(h as i64) as usize;
                            for x in 0..w {
                                let sx = (x as i64 - mx).rem_euclid(w as i64) as usize;
                                dst[y * w + x] += t * src[sy * w + sx];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Injection {
    /// Perturb the image, then weight: `G(F(gamma + e))`.
    Image,
    /// Perturb each weighted band directly: `G(F gamma) + F(e_b)`.
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Per-component standard deviation of the complex perturbation.
    pub sigma: f64,
    pub realizations: usize,
    /// Subtract the response to the unperturbed input.
    pub subtract_reference: bool,
    pub injection: Injection,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            sigma: 0.01,
            realizations: 1000,
            subtract_reference: true,
            injection: Injection::Weighted,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            errs.push("probe.sigma must be positive".into());
        }
        if self.realizations == 0 {
            errs.push("probe.realizations must be >= 1".into());
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub grid: (usize, usize),
    /// Mean over realizations of the per-pixel sum of squares of the
    /// inverse DFT of the output perturbation, summed over output channels.
    pub sos: Vec<f64>,
    pub realizations: usize,
    pub sigma: f64,
    pub reference: Option<Vec<f64>>,
}

impl ProbeResult {
    pub fn normalized(&self) -> Vec<f64> {
        let max = self.sos.iter().cloned().fold(0.0, f64::max);
        if max == 0.0 {
            return self.sos.clone();
        }
        self.sos.iter().map(|v| v / max).collect()
    }

    /// `||sos - reference|| / ||reference||`.
    pub fn reference_error(&self) -> Option<f64> {
        let r = self.reference.as_ref()?;
        Some(l2_relative(&self.sos, r))
    }
}

pub fn l2_relative(a: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(reference).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = reference.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

const PROBE_CHUNK: usize = 32;

/// Monte-Carlo estimate of the output-perturbation energy map of `op` around
/// the reference image `gamma` (`[M, H, W]`). Realization `r` draws from
/// `Rng::derived(seed, r)` and chunks are summed in index order, so the map
/// does not depend on the thread count.
pub fn annihilation_probe(
    op: &dyn ProbeOperator,
    gamma: &ComplexTensor,
    weighting: Weighting,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return invalid(errs.join("; "));
    }
    if gamma.ndim() != 3 {
        return shape_err(format!("expected [M, H, W] reference image, got {:?}", gamma.shape()));
    }
    let grid = gamma.grid()?;
    let (h, w) = grid;
    let kspace = gamma.fft2_last()?;
    let base = centered(&apply_weighting(weighting, &kspace)?);
    let base_out = if cfg.subtract_reference { Some(op.respond(&base)?) } else { None };
    let bands = base.planes();
    let m = gamma.planes();

    let realization = |r: usize| -> Result<Vec<f64>> {
        let mut rng = Rng::derived(cfg.seed, r as u64);
        let z = match cfg.injection {
            Injection::Image => {
                let e = rng.complex_normal_tensor(&[m, h, w], cfg.sigma);
                centered(&apply_weighting(weighting, &(gamma + &e).fft2_last()?)?)
            }
            Injection::Weighted => {
                let e = rng.complex_normal_tensor(&[bands, h, w], cfg.sigma);
                &base + &centered(&e.fft2_last()?)
            }
        };
        let mut out = op.respond(&z)?;
        if let Some(b) = &base_out {
            out = &out - b;
        }
        let img = uncentered(&out).ifft2_last()?;
        let mut sos = vec![0.0; h * w];
        for (i, v) in img.data().iter().enumerate() {
            sos[i % (h * w)] += v.norm_sqr();
        }
        Ok(sos)
    };

    let chunks: Vec<Vec<f64>> = (0..cfg.realizations.div_ceil(PROBE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; h * w];
            for r in c * PROBE_CHUNK..((c + 1) * PROBE_CHUNK).min(cfg.realizations) {
                for (a, v) in acc.iter_mut().zip(realization(r)?) {
                    *a += v;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut sos = vec![0.0; h * w];
    for c in &chunks {
        for (s, v) in sos.iter_mut().zip(c) {
            *s += v;
        }
    }
    let inv = 1.0 / cfg.realizations as f64;
    sos.iter_mut().for_each(|v| *v *= inv);
    if sos.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("probe SOS map is not finite".into()));
    }
    Ok(ProbeResult {
        grid,
        sos,
        realizations: cfg.realizations,
        sigma: cfg.sigma,
        reference: None,
    })
}

/// Pixels with a 4-neighbour (periodic) of a different label.
pub fn edge_pixels(labels: &[u32], grid: (usize, usize)) -> Vec<bool> {
    let (h, w) = grid;
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let l = labels[i];
            [((y + 1) % h, x), ((y + h - 1) % h, x), (y, (x + 1) % w), (y, (x + w - 1) % w)]
                .iter()
                .any(|&(a, b)| labels[a * w + b] != l)
        })
        .collect()
}

/// Pixels whose multi-channel value differs from a 4-neighbour (periodic) by
/// more than `rel_tol` times the largest per-pixel norm of `x` (`[M, H, W]`).
pub fn edge_pixels_from_image(x: &ComplexTensor, rel_tol: f64) -> Result<Vec<bool>> {
    let (h, w) = x.grid()?;
    let m = x.planes();
    let dist = |a: usize, b: usize| -> f64 { (0..m).map(|c| (x.plane(c)[a] - x.plane(c)[b]).norm_sqr()).sum::<f64>().sqrt() };
    let peak = (0..h * w)
        .map(|i| (0..m).map(|c| x.plane(c)[i].norm_sqr()).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let tol = rel_tol * peak;
    Ok((0..h * w)
        .map(|i| {
            let (y, xx) = (i / w, i % w);
            [((y + 1) % h, xx), ((y + h - 1) % h, xx), (y, (xx + 1) % w), (y, (xx + w - 1) % w)]
                .iter()
                .any(|&(a, b)| dist(i, a * w + b) > tol)
        })
        .collect())
}

/// Mean of `map` over edge pixels and over the remaining (flat) pixels.
pub fn edge_flat_means(map: &[f64], edges: &[bool]) -> (f64, f64) {
    let (mut se, mut ne, mut sf, mut nf) = (0.0, 0usize, 0.0, 0usize);
    for (v, &e) in map.iter().zip(edges) {
        if e {
            se += v;
            ne += 1;
        } else {
            sf += v;
            nf += 1;
        }
    }
    (se / ne.max(1) as f64, sf / nf.max(1) as f64)
}

/// Text rendering of a report row block, used for terminal summaries.
pub fn format_rows(report: &MetricReport) -> String {
    let mut s = String::new();
    for r in &report.rows {
        let _ = writeln!(s, "{:<12} {:>8.2} {:>8.2} {:>7.4}", r.id, r.snr_db, r.psnr_db, r.ssim);
    }
    s
}

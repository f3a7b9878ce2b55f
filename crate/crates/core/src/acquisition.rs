//! Measurement simulation: phantoms, coil sensitivities, sampling masks, the
//! forward operator `A = S . F` with its adjoint, noise, and dataset synthesis.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, shape_err, Result};
use crate::io::load_tensor;
use crate::rng::Rng;
use crate::tensor::{centered_pos, freq_index, signed_freq, ComplexTensor, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    UniformLines,
    VariableDensityLines,
    VariableDensity2d,
}

/// Boolean k-space sampling pattern in standard DFT order. Phase encodes run
/// along the first (row) axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    shape: (usize, usize),
    sampled: Vec<bool>,
    /// Extents `(rows, cols)` of the fully sampled centered block, if any.
    pub calibration: Option<(usize, usize)>,
}

impl SamplingMask {
    pub fn full(shape: (usize, usize)) -> Self {
        Self {
            shape,
            sampled: vec![true; shape.0 * shape.1],
            calibration: None,
        }
    }

    pub fn from_bools(shape: (usize, usize), sampled: Vec<bool>) -> Result<Self> {
        if sampled.len() != shape.0 * shape.1 {
            return shape_err("mask length does not match its grid");
        }
        Ok(Self {
            shape,
            sampled,
            calibration: None,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.sampled
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.sampled[y * self.shape.1 + x]
    }

    pub fn weight(&self, idx: usize) -> f64 {
        if self.sampled[idx] {
            1.0
        } else {
            0.0
        }
    }

    pub fn count(&self) -> usize {
        self.sampled.iter().filter(|&&s| s).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.sampled.len() as f64
    }

    /// Pointwise product; `m.intersect(&m) == m`.
    pub fn intersect(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err("mask shapes differ");
        }
        Ok(Self {
            shape: self.shape,
            sampled: self.sampled.iter().zip(&other.sampled).map(|(&a, &b)| a && b).collect(),
            calibration: self.calibration,
        })
    }

    /// 0/1 tensor of shape `[H, W]` for persistence.
    pub fn to_tensor(&self) -> ComplexTensor {
        ComplexTensor::from_fn(&[self.shape.0, self.shape.1], |i| C64::new(self.weight(i), 0.0))
    }

    pub fn from_tensor(t: &ComplexTensor) -> Result<Self> {
        let (h, w) = t.grid()?;
        if t.len() != h * w {
            return shape_err("mask tensor must be 2-D");
        }
        Self::from_bools((h, w), t.data().iter().map(|v| v.re > 0.5).collect())
    }

    /// Storage indices of the centered calibration block.
    pub fn calibration_indices(&self) -> Option<Vec<usize>> {
        let (ch, cw) = self.calibration?;
        Some(calibration_block(self.shape, (ch, cw)))
    }

    /// Sets `calibration` to the largest fully sampled centered square block
    /// (`None` if even the DC sample is missing).
    pub fn detect_calibration(mut self) -> Self {
        let (h, w) = self.shape;
        self.calibration = (1..=h.min(w))
            .rev()
            .find(|&e| calibration_block(self.shape, (e, e)).iter().all(|&i| self.sampled[i]))
            .map(|e| (e, e));
        self
    }
}

fn calibration_block(shape: (usize, usize), extent: (usize, usize)) -> Vec<usize> {
    let (h, w) = shape;
    let (ch, cw) = extent;
    let (y0, x0) = (h / 2 - ch / 2, w / 2 - cw / 2);
    let mut idx = Vec::with_capacity(ch * cw);
    for y in 0..h {
        let cy = centered_pos(y, h);
        if cy < y0 || cy >= y0 + ch {
            continue;
        }
        for x in 0..w {
            let cx = centered_pos(x, w);
            if cx >= x0 && cx < x0 + cw {
                idx.push(y * w + x);
            }
        }
    }
    idx
}

/// Scale `alpha` so that `sum min(1, alpha * profile)` over free entries plus
/// the forced count hits `target`.
fn fit_density(profile: &[f64], forced: &[bool], target: f64) -> Vec<f64> {
    let free_mass = |alpha: f64| -> f64 {
        profile
            .iter()
            .zip(forced)
            .map(|(&p, &f)| if f { 1.0 } else { (alpha * p).min(1.0) })
            .sum()
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while free_mass(hi) < target && hi < 1e30 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if free_mass(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    profile
        .iter()
        .zip(forced)
        .map(|(&p, &f)| if f { 1.0 } else { (hi * p).min(1.0) })
        .collect()
}

/// Draws a sampling mask.
///
/// `calib_extent` is the side of the fully sampled center: rows for the line
/// masks, a square for `VariableDensity2d`. Variable-density patterns use a
/// Gaussian density `exp(-(k/sigma_d)^2)` with `sigma_d = extent / 6`, scaled
/// so the expected sampled fraction is `1 / acceleration`.
pub fn make_mask(
    rng: &mut Rng,
    shape: (usize, usize),
    kind: MaskKind,
    acceleration: f64,
    calib_extent: usize,
) -> Result<SamplingMask> {
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return invalid("mask grid must be non-empty");
    }
    if !(acceleration >= 1.0) {
        return invalid(format!("acceleration must be >= 1, got {acceleration}"));
    }
    let calib_ok = match kind {
        MaskKind::VariableDensity2d => calib_extent <= h && calib_extent <= w,
        _ => calib_extent <= h,
    };
    if !calib_ok {
        return invalid(format!("calibration extent {calib_extent} exceeds grid {h}x{w}"));
    }
    let calibration = match (calib_extent, kind) {
        (0, _) => None,
        (c, MaskKind::VariableDensity2d) => Some((c, c)),
        (c, _) => Some((c, w)),
    };
    let mut forced = vec![false; h * w];
    if let Some(ext) = calibration {
        for i in calibration_block(shape, ext) {
            forced[i] = true;
        }
    }
    let mut sampled = vec![false; h * w];
    if acceleration == 1.0 {
        sampled.iter_mut().for_each(|s| *s = true);
    } else {
        match kind {
            MaskKind::UniformLines => {
                let r = acceleration.round().max(1.0) as i64;
                for y in 0..h {
                    let on = signed_freq(y, h).rem_euclid(r) == 0;
                    for x in 0..w {
                        sampled[y * w + x] = on || forced[y * w + x];
                    }
                }
            }
            MaskKind::VariableDensityLines => {
                let sigma = h as f64 / 6.0;
                let profile: Vec<f64> = (0..h)
                    .map(|y| (-(signed_freq(y, h) as f64 / sigma).powi(2)).exp())
                    .collect();
                let row_forced: Vec<bool> = (0..h).map(|y| forced[y * w]).collect();
                let p = fit_density(&profile, &row_forced, h as f64 / acceleration);
                for y in 0..h {
                    let on = rng.uniform() < p[y];
                    for x in 0..w {
                        sampled[y * w + x] = on;
                    }
                }
            }
            MaskKind::VariableDensity2d => {
                let (sy, sx) = (h as f64 / 6.0, w as f64 / 6.0);
                let profile: Vec<f64> = (0..h * w)
                    .map(|i| {
                        let ky = signed_freq(i / w, h) as f64 / sy;
                        let kx = signed_freq(i % w, w) as f64 / sx;
                        (-(ky * ky + kx * kx)).exp()
                    })
                    .collect();
                let p = fit_density(&profile, &forced, (h * w) as f64 / acceleration);
                for i in 0..h * w {
                    sampled[i] = rng.uniform() < p[i];
                }
            }
        }
    }
    Ok(SamplingMask {
        shape,
        sampled,
        calibration,
    })
}

/// Coil sensitivity maps `s_i` over the image grid, `[M, H, W]`.
#[derive(Clone, Debug)]
pub struct CoilSensitivities {
    pub maps: ComplexTensor,
    /// Fourier coefficients of the maps before normalization; exactly zero
    /// outside the centered `bandwidth x bandwidth` window.
    pub kernels: ComplexTensor,
    pub bandwidth: usize,
    pub normalized: bool,
}

impl CoilSensitivities {
    /// Bandlimited maps without normalization. Each map is the inverse DFT of
    /// random coefficients on the centered window; a DC bias keeps the maps
    /// away from zero. Scaled so that the mean sum-of-squares is one.
    pub fn bandlimited(rng: &mut Rng, shape: (usize, usize), m: usize, bandwidth: usize) -> Result<Self> {
        let (h, w) = shape;
        if m == 0 {
            return invalid("at least one coil required");
        }
        if bandwidth == 0 || bandwidth > h.min(w) {
            return invalid(format!("bandwidth {bandwidth} does not fit grid {h}x{w}"));
        }
        let half = (bandwidth / 2) as i64;
        let n = (h * w) as f64;
        let mut kernels = ComplexTensor::zeros(&[m, h, w]);
        for c in 0..m {
            let plane = kernels.plane_mut(c);
            for ky in -half..(bandwidth as i64 - half) {
                for kx in -half..(bandwidth as i64 - half) {
                    let r2 = (ky * ky + kx * kx) as f64;
                    let amp = n * 0.5 / (1.0 + r2);
                    let idx = freq_index(ky, h) * w + freq_index(kx, w);
                    plane[idx] = rng.complex_normal(amp);
                }
            }
            let phase = rng.uniform_range(0.0, 2.0 * PI);
            plane[0] += C64::from_polar(1.5 * n, phase);
        }
        let maps = kernels.ifft2_last()?;
        let mean_sos = maps.norm_sqr() / n;
        let s = 1.0 / mean_sos.sqrt();
        Ok(Self {
            maps: maps.scale(s),
            kernels: kernels.scale(s),
            bandwidth,
            normalized: false,
        })
    }

    pub fn normalize(mut self) -> Self {
        let (h, w) = self.maps.grid().unwrap();
        let m = self.maps.planes();
        for p in 0..h * w {
            let sos: f64 = (0..m).map(|c| self.maps.data()[c * h * w + p].norm_sqr()).sum();
            let inv = 1.0 / sos.sqrt();
            for c in 0..m {
                self.maps.data_mut()[c * h * w + p] *= inv;
            }
        }
        self.normalized = true;
        self
    }

    pub fn coils(&self) -> usize {
        self.maps.planes()
    }

    /// Multi-channel image `Gamma` with planes `s_i * gamma`.
    pub fn modulate(&self, image: &ComplexTensor) -> Result<ComplexTensor> {
        let (h, w) = self.maps.grid()?;
        if image.len() != h * w {
            return shape_err("image grid does not match sensitivities");
        }
        let m = self.coils();
        let mut out = ComplexTensor::zeros(&[m, h, w]);
        for c in 0..m {
            let s = self.maps.plane(c);
            for (o, (&a, &b)) in out.plane_mut(c).iter_mut().zip(s.iter().zip(image.data())) {
                *o = a * b;
            }
        }
        Ok(out)
    }
}

/// Bandlimited sensitivities normalized to unit sum-of-squares at every pixel.
pub fn make_sensitivities(rng: &mut Rng, shape: (usize, usize), m: usize, bandwidth: usize) -> Result<CoilSensitivities> {
    Ok(CoilSensitivities::bandlimited(rng, shape, m, bandwidth)?.normalize())
}

#[derive(Clone, Debug)]
pub struct Phantom {
    /// Ground-truth complex image `[H, W]`.
    pub image: ComplexTensor,
    /// Region label per pixel; 0 is background.
    pub labels: Vec<u32>,
    /// Exact k-space samples when the phantom is defined in the continuous
    /// domain (see [`edge_phantom`]).
    pub kspace: Option<ComplexTensor>,
}

impl Phantom {
    pub fn kspace(&self) -> Result<ComplexTensor> {
        match &self.kspace {
            Some(k) => Ok(k.clone()),
            None => self.image.fft2_last(),
        }
    }
}

fn random_amplitude(rng: &mut Rng) -> C64 {
    C64::from_polar(rng.uniform_range(0.2, 1.0), rng.uniform_range(0.0, 2.0 * PI))
}

/// Piecewise-constant phantom from `n_shapes` overlapping ellipses and
/// rectangles, painted in order so later shapes overwrite earlier ones.
pub fn make_phantom(rng: &mut Rng, shape: (usize, usize), n_shapes: usize) -> Result<Phantom> {
    make_phantom_within(rng, shape, n_shapes, 1.0)
}

/// [`make_phantom`] with shape centers and radii scaled by `extent` about the
/// grid center, so the object covers roughly that fraction of the field of
/// view and the rest is empty background.
pub fn make_phantom_within(rng: &mut Rng, shape: (usize, usize), n_shapes: usize, extent: f64) -> Result<Phantom> {
    let (h, w) = shape;
    if !(extent > 0.0 && extent <= 1.0) {
        return invalid(format!("phantom extent must lie in (0, 1], got {extent}"));
    }
    if h < 16 || w < 16 {
        return invalid(format!("phantom grid must be at least 16x16, got {h}x{w}"));
    }
    let mut labels = vec![0u32; h * w];
    let mut values = vec![C64::new(0.0, 0.0)];
    for s in 0..n_shapes {
        let cy = (0.5 + extent * rng.uniform_range(-0.25, 0.25)) * h as f64;
        let cx = (0.5 + extent * rng.uniform_range(-0.25, 0.25)) * w as f64;
        let ry = extent * rng.uniform_range(0.08, 0.25) * h as f64;
        let rx = extent * rng.uniform_range(0.08, 0.25) * w as f64;
        let ellipse = rng.uniform() < 0.6;
        let theta = rng.uniform_range(0.0, PI);
        let (st, ct) = theta.sin_cos();
        values.push(random_amplitude(rng));
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let inside = if ellipse {
                    let u = ct * dx + st * dy;
                    let v = -st * dx + ct * dy;
                    (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
                } else {
                    dy.abs() <= ry && dx.abs() <= rx
                };
                if inside {
                    labels[y * w + x] = (s + 1) as u32;
                }
            }
        }
    }
    let image = ComplexTensor::from_fn(&[h, w], |i| values[labels[i] as usize]);
    Ok(Phantom {
        image,
        labels,
        kspace: None,
    })
}

/// Cut positions (in `[0, 1)`, unit-period coordinates) of an [`edge_phantom`].
#[derive(Clone, Debug)]
pub struct EdgeCuts {
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
}

impl EdgeCuts {
    /// Fourier coefficients of the bandlimited function
    /// `mu(x, y) = prod_i sin(pi (x - a_i)) * prod_j sin(pi (y - c_j))`, whose
    /// zero set contains every edge. Returned as a `(rows+1) x (cols+1)` tap
    /// array ordered from the most negative frequency.
    pub fn annihilator(&self) -> Vec<Vec<C64>> {
        let fy = sine_product_coeffs(&self.rows);
        let fx = sine_product_coeffs(&self.cols);
        fy.iter().map(|&a| fx.iter().map(|&b| a * b).collect()).collect()
    }
}

/// Coefficients of `prod_i sin(pi (t - a_i))` at integer frequencies
/// `-n/2 ..= n/2` for an even number `n` of roots.
fn sine_product_coeffs(roots: &[f64]) -> Vec<C64> {
    let mut poly = vec![C64::new(1.0, 0.0)];
    for &a in roots {
        // sin(pi (t - a)) = (e^{j pi (t-a)} - e^{-j pi (t-a)}) / 2j
        let plus = C64::from_polar(1.0, -PI * a) / C64::new(0.0, 2.0);
        let minus = -C64::from_polar(1.0, PI * a) / C64::new(0.0, 2.0);
        let mut next = vec![C64::new(0.0, 0.0); poly.len() + 1];
        for (j, &p) in poly.iter().enumerate() {
            next[j] += p * minus;
            next[j + 1] += p * plus;
        }
        poly = next;
    }
    // index j carries frequency j - n/2
    poly
}

fn interval_coeff(a: f64, b: f64, k: i64) -> C64 {
    if k == 0 {
        return C64::new(b - a, 0.0);
    }
    let w = 2.0 * PI * k as f64;
    (C64::from_polar(1.0, -w * a) - C64::from_polar(1.0, -w * b)) / C64::new(0.0, w)
}

/// Piecewise-constant phantom on the unit torus whose edges are axis-aligned
/// cuts, with k-space given by its exact Fourier-series coefficients. The
/// edges lie on the zero set of [`EdgeCuts::annihilator`], a bandlimited
/// function with `(n_row_cuts + 1) x (n_col_cuts + 1)` coefficients, so the
/// gradient-weighted k-space obeys an exact finite annihilation relation.
///
/// Cut counts must be even. The image is the inverse DFT of the samples.
pub fn edge_phantom(
    rng: &mut Rng,
    shape: (usize, usize),
    n_row_cuts: usize,
    n_col_cuts: usize,
) -> Result<(Phantom, EdgeCuts)> {
    cut_phantom(rng, shape, n_row_cuts, n_col_cuts, false)
}

/// Single rectangle on a constant background: the two-cut [`edge_phantom`]
/// with one amplitude inside the rectangle and another everywhere else.
pub fn rectangle_phantom(rng: &mut Rng, shape: (usize, usize)) -> Result<(Phantom, EdgeCuts)> {
    cut_phantom(rng, shape, 2, 2, true)
}

fn cut_phantom(
    rng: &mut Rng,
    shape: (usize, usize),
    n_row_cuts: usize,
    n_col_cuts: usize,
    rectangle: bool,
) -> Result<(Phantom, EdgeCuts)> {
    let (h, w) = shape;
    if h < 8 || w < 8 {
        return invalid("edge phantom grid must be at least 8x8");
    }
    if n_row_cuts % 2 != 0 || n_col_cuts % 2 != 0 || n_row_cuts == 0 || n_col_cuts == 0 {
        return invalid("cut counts must be even and positive");
    }
    let draw_cuts = |rng: &mut Rng, n: usize| -> Vec<f64> {
        // stratified so cells keep a minimum width
        let mut v: Vec<f64> = (0..n)
            .map(|i| (i as f64 + rng.uniform_range(0.15, 0.85)) / n as f64)
            .collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let rows = draw_cuts(rng, n_row_cuts);
    let cols = draw_cuts(rng, n_col_cuts);
    let intervals = |cuts: &[f64]| -> Vec<(f64, f64)> {
        let n = cuts.len();
        (0..n)
            .map(|i| if i + 1 < n { (cuts[i], cuts[i + 1]) } else { (cuts[n - 1], cuts[0] + 1.0) })
            .collect()
    };
    let ri = intervals(&rows);
    let ci = intervals(&cols);
    let values: Vec<C64> = if rectangle {
        let (inside, outside) = (random_amplitude(rng), random_amplitude(rng));
        (0..ri.len() * ci.len()).map(|i| if i == 0 { inside } else { outside }).collect()
    } else {
        (0..ri.len() * ci.len()).map(|_| random_amplitude(rng)).collect()
    };

    let fy: Vec<Vec<C64>> = ri
        .iter()
        .map(|&(a, b)| (0..h).map(|y| interval_coeff(a, b, signed_freq(y, h))).collect())
        .collect();
    let fx: Vec<Vec<C64>> = ci
        .iter()
        .map(|&(a, b)| (0..w).map(|x| interval_coeff(a, b, signed_freq(x, w))).collect())
        .collect();
    let n = (h * w) as f64;
    let kspace = ComplexTensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        let mut acc = C64::new(0.0, 0.0);
        for (r, fyr) in fy.iter().enumerate() {
            for (c, fxc) in fx.iter().enumerate() {
                acc += values[r * ci.len() + c] * fyr[y] * fxc[x];
            }
        }
        acc * n
    });
    let locate = |t: f64, iv: &[(f64, f64)]| -> usize {
        iv.iter()
            .position(|&(a, b)| (t >= a && t < b) || (t + 1.0 >= a && t + 1.0 < b))
            .unwrap_or(0)
    };
    let labels: Vec<u32> = (0..h * w)
        .map(|i| {
            let r = locate((i / w) as f64 / h as f64, &ri);
            let c = locate((i % w) as f64 / w as f64, &ci);
            (r * ci.len() + c) as u32
        })
        .collect();
    let image = kspace.ifft2_last()?;
    Ok((
        Phantom {
            image,
            labels,
            kspace: Some(kspace),
        },
        EdgeCuts { rows, cols },
    ))
}

/// Measured multi-channel k-space `B` (zero off-mask) with its mask.
#[derive(Clone, Debug)]
pub struct MultiChannelKSpace {
    pub data: ComplexTensor,
    pub mask: SamplingMask,
}

impl MultiChannelKSpace {
    pub fn new(data: ComplexTensor, mask: SamplingMask) -> Result<Self> {
        check_mask(&data, &mask)?;
        Ok(Self { data, mask })
    }

    pub fn channels(&self) -> usize {
        self.data.planes()
    }
}

fn check_mask(x: &ComplexTensor, mask: &SamplingMask) -> Result<()> {
    if x.ndim() != 3 {
        return shape_err(format!("expected [M, H, W], got {:?}", x.shape()));
    }
    if x.grid()? != mask.shape() {
        return shape_err(format!("grid {:?} vs mask {:?}", x.grid()?, mask.shape()));
    }
    Ok(())
}

/// Zeroes unsampled entries of a `[M, H, W]` k-space tensor in place.
pub fn apply_mask(k: &mut ComplexTensor, mask: &SamplingMask) {
    let hw = mask.as_slice().len();
    for (i, v) in k.data_mut().iter_mut().enumerate() {
        if !mask.as_slice()[i % hw] {
            *v = C64::new(0.0, 0.0);
        }
    }
}

/// `A(Gamma)`: per-channel forward DFT followed by sampling.
pub fn apply_forward(images: &ComplexTensor, mask: &SamplingMask) -> Result<MultiChannelKSpace> {
    check_mask(images, mask)?;
    let mut k = images.fft2_last()?;
    apply_mask(&mut k, mask);
    Ok(MultiChannelKSpace {
        data: k,
        mask: mask.clone(),
    })
}

/// `A^H(B)`: sampling then inverse DFT. With the unnormalized forward DFT the
/// exact adjoint carries a factor `H W` relative to `ifft2`; this returns the
/// zero-filled reconstruction `ifft2(S B)`, i.e. `A^H / (H W)`.
pub fn apply_adjoint(b: &MultiChannelKSpace) -> Result<ComplexTensor> {
    let mut k = b.data.clone();
    apply_mask(&mut k, &b.mask);
    k.ifft2_last()
}

/// Exact adjoint of [`apply_forward`] under `<x, y> = sum conj(x) y`.
pub fn apply_adjoint_exact(b: &MultiChannelKSpace) -> Result<ComplexTensor> {
    let (h, w) = b.mask.shape();
    Ok(apply_adjoint(b)?.scale((h * w) as f64))
}

/// Adds i.i.d. complex Gaussian noise on sampled entries only.
pub fn add_noise(b: &MultiChannelKSpace, rng: &mut Rng, sigma: f64) -> Result<MultiChannelKSpace> {
    if !(sigma >= 0.0) {
        return invalid("noise sigma must be non-negative");
    }
    let mut out = b.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let hw = b.mask.as_slice().len();
    for (i, v) in out.data.data_mut().iter_mut().enumerate() {
        if b.mask.as_slice()[i % hw] {
            *v += rng.complex_normal(sigma);
        }
    }
    Ok(out)
}

/// Ground truth plus measurements for one example.
#[derive(Clone, Debug)]
pub struct Acquisition {
    /// Multi-channel ground truth `Gamma`, `[M, H, W]`.
    pub truth: ComplexTensor,
    pub measured: MultiChannelKSpace,
    pub noise_sigma: f64,
}

impl Acquisition {
    pub fn mask(&self) -> &SamplingMask {
        &self.measured.mask
    }

    pub fn zero_filled(&self) -> Result<ComplexTensor> {
        apply_adjoint(&self.measured)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    /// Overlapping ellipses and rectangles rasterized on the grid.
    Shapes,
    /// Axis-aligned cut phantom with exact Fourier-series k-space.
    EdgeCells,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub counts: SplitCounts,
    pub shape: [usize; 2],
    pub channels: usize,
    pub mask_kind: MaskKind,
    pub acceleration: f64,
    pub calib_extent: usize,
    pub noise_sigma: f64,
    pub phantom: PhantomKind,
    pub n_shapes: usize,
    /// Fraction of the field of view spanned by `shapes` phantoms.
    pub phantom_extent: f64,
    /// Cuts per axis for `edge-cells` phantoms.
    pub n_cuts: usize,
    pub bandwidth: usize,
    pub normalize_sensitivities: bool,
    /// Draw a fresh mask per example instead of one shared mask.
    pub mask_per_example: bool,
    /// Draw fresh coil maps per example instead of one shared receive array.
    pub sensitivities_per_example: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            counts: SplitCounts { train: 8, val: 2, test: 2 },
            shape: [32, 32],
            channels: 4,
            mask_kind: MaskKind::VariableDensity2d,
            acceleration: 4.0,
            calib_extent: 0,
            noise_sigma: 0.0,
            phantom: PhantomKind::Shapes,
            n_shapes: 5,
            phantom_extent: 1.0,
            n_cuts: 2,
            bandwidth: 5,
            normalize_sensitivities: true,
            mask_per_example: true,
            sensitivities_per_example: false,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let [h, w] = self.shape;
        if h < 16 || w < 16 {
            errs.push(format!("shape must be at least 16x16, got {h}x{w}"));
        }
        if self.channels == 0 {
            errs.push("channels must be >= 1".into());
        }
        if !(self.phantom_extent > 0.0 && self.phantom_extent <= 1.0) {
            errs.push("phantom_extent must lie in (0, 1]".into());
        }
        if !(self.acceleration >= 1.0) {
            errs.push("acceleration must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0) {
            errs.push("noise_sigma must be >= 0".into());
        }
        if self.calib_extent > h.min(w) {
            errs.push("calib_extent exceeds grid".into());
        }
        if self.bandwidth == 0 || self.bandwidth > h.min(w) {
            errs.push("bandwidth must be in 1..=min(shape)".into());
        }
        if self.phantom == PhantomKind::EdgeCells && (self.n_cuts == 0 || self.n_cuts % 2 != 0) {
            errs.push("n_cuts must be even and positive for edge-cells phantoms".into());
        }
        errs
    }
}

/// Draws shared by every example of a dataset.
#[derive(Clone, Debug, Default)]
pub struct SharedDraws {
    pub mask: Option<SamplingMask>,
    pub sensitivities: Option<CoilSensitivities>,
}

impl SharedDraws {
    /// Shared mask and coil maps as requested by `cfg`, drawn from streams of
    /// `seed` that no example uses.
    pub fn for_dataset(seed: u64, cfg: &DatasetConfig) -> Result<Self> {
        let shape = (cfg.shape[0], cfg.shape[1]);
        let mask = if cfg.mask_per_example {
            None
        } else {
            let mut r = Rng::derived(seed, u64::MAX);
            Some(make_mask(&mut r, shape, cfg.mask_kind, cfg.acceleration, cfg.calib_extent)?)
        };
        let sensitivities = if cfg.sensitivities_per_example || cfg.channels == 1 {
            None
        } else {
            let mut r = Rng::derived(seed, u64::MAX - 1);
            Some(draw_sensitivities(&mut r, cfg)?)
        };
        Ok(Self { mask, sensitivities })
    }
}

fn draw_sensitivities(rng: &mut Rng, cfg: &DatasetConfig) -> Result<CoilSensitivities> {
    let sens = CoilSensitivities::bandlimited(rng, (cfg.shape[0], cfg.shape[1]), cfg.channels, cfg.bandwidth)?;
    Ok(if cfg.normalize_sensitivities { sens.normalize() } else { sens })
}

/// Simulates one example: phantom, sensitivities (skipped when `M = 1`),
/// sampling and noise, all drawn from `rng`.
pub fn simulate(rng: &mut Rng, cfg: &DatasetConfig, mask: Option<&SamplingMask>) -> Result<Acquisition> {
    let shared = SharedDraws {
        mask: mask.cloned(),
        sensitivities: None,
    };
    simulate_with(rng, cfg, &shared)
}

/// [`simulate`] with any shared mask or coil maps taken from `shared`.
pub fn simulate_with(rng: &mut Rng, cfg: &DatasetConfig, shared: &SharedDraws) -> Result<Acquisition> {
    let shape = (cfg.shape[0], cfg.shape[1]);
    let phantom = match cfg.phantom {
        PhantomKind::Shapes => make_phantom_within(rng, shape, cfg.n_shapes, cfg.phantom_extent)?,
        PhantomKind::EdgeCells => edge_phantom(rng, shape, cfg.n_cuts, cfg.n_cuts)?.0,
    };
    let truth = if cfg.channels == 1 {
        phantom.image.clone().reshape(&[1, shape.0, shape.1])?
    } else {
        match &shared.sensitivities {
            Some(s) => {
                if s.coils() != cfg.channels || s.maps.grid()? != shape {
                    return shape_err("shared coil maps do not match the dataset");
                }
                s.modulate(&phantom.image)?
            }
            None => draw_sensitivities(rng, cfg)?.modulate(&phantom.image)?,
        }
    };
    let owned;
    let mask = match &shared.mask {
        Some(m) => m,
        None => {
            owned = make_mask(rng, shape, cfg.mask_kind, cfg.acceleration, cfg.calib_extent)?;
            &owned
        }
    };
    // exact Fourier-series data for the single-channel continuous phantom
    let measured = match (&phantom.kspace, cfg.channels) {
        (Some(k), 1) => {
            let mut k = k.clone().reshape(&[1, shape.0, shape.1])?;
            apply_mask(&mut k, mask);
            MultiChannelKSpace::new(k, mask.clone())?
        }
        _ => apply_forward(&truth, mask)?,
    };
    let measured = add_noise(&measured, rng, cfg.noise_sigma)?;
    Ok(Acquisition {
        truth,
        measured,
        noise_sigma: cfg.noise_sigma,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHashes {
    pub gt: String,
    pub ksp: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub gt_path: String,
    pub ksp_path: String,
    pub mask_path: String,
    pub sha256s: FileHashes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub shape: [usize; 2],
    pub channels: usize,
    pub mask_kind: MaskKind,
    pub acceleration: f64,
    pub noise_sigma: f64,
    pub examples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes every example of `cfg` under `dir` and returns the manifest, which
/// is also stored as `dir/manifest.json`. Example `i` draws from
/// `Rng::derived(seed, i)`, so parallel and serial runs write identical bytes.
pub fn synth_dataset(seed: u64, cfg: &DatasetConfig, dir: &Path) -> Result<Manifest> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return invalid(errs.join("; "));
    }
    fs::create_dir_all(dir)?;
    let shared = SharedDraws::for_dataset(seed, cfg)?;
    let splits: Vec<(&str, usize)> = [("train", cfg.counts.train), ("val", cfg.counts.val), ("test", cfg.counts.test)]
        .into_iter()
        .flat_map(|(name, n)| (0..n).map(move |i| (name, i)))
        .collect();
    let entries: Result<Vec<ManifestEntry>> = splits
        .par_iter()
        .enumerate()
        .map(|(global, &(split, i))| {
            let mut rng = Rng::derived(seed, global as u64);
            let acq = simulate_with(&mut rng, cfg, &shared)?;
            let id = format!("{split}-{i:04}");
            let write = |suffix: &str, t: &ComplexTensor| -> Result<(String, String)> {
                let name = format!("{id}_{suffix}.cten");
                let bytes = crate::io::encode(t);
                fs::write(dir.join(&name), &bytes)?;
                Ok((name, sha256_hex(&bytes)))
            };
            let (gt_path, gt) = write("gt", &acq.truth)?;
            let (ksp_path, ksp) = write("ksp", &acq.measured.data)?;
            let (mask_path, mask) = write("mask", &acq.measured.mask.to_tensor())?;
            Ok(ManifestEntry {
                id,
                split: split.to_string(),
                gt_path,
                ksp_path,
                mask_path,
                sha256s: FileHashes { gt, ksp, mask },
            })
        })
        .collect();
    let manifest = Manifest {
        version: 1,
        seed,
        shape: cfg.shape,
        channels: cfg.channels,
        mask_kind: cfg.mask_kind,
        acceleration: cfg.acceleration,
        noise_sigma: cfg.noise_sigma,
        examples: entries?,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A manifest together with the directory its relative paths resolve in.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, manifest })
    }

    pub fn split(&self, name: &str) -> Vec<&ManifestEntry> {
        self.manifest.examples.iter().filter(|e| e.split == name).collect()
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<Acquisition> {
        let truth = load_tensor(self.root.join(&entry.gt_path))?;
        let ksp = load_tensor(self.root.join(&entry.ksp_path))?;
        let mask = SamplingMask::from_tensor(&load_tensor(self.root.join(&entry.mask_path))?)?.detect_calibration();
        Ok(Acquisition {
            truth,
            measured: MultiChannelKSpace::new(ksp, mask)?,
            noise_sigma: self.manifest.noise_sigma,
        })
    }

    /// Recomputes file hashes and lists entries whose checksums disagree.
    pub fn verify(&self) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for e in &self.manifest.examples {
            for (path, want) in [(&e.gt_path, &e.sha256s.gt), (&e.ksp_path, &e.sha256s.ksp), (&e.mask_path, &e.sha256s.mask)] {
                let got = sha256_hex(&fs::read(self.root.join(path))?);
                if &got != want {
                    bad.push(path.clone());
                }
            }
        }
        Ok(bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn empty_phantom_is_zero_and_deterministic() {
        let p = make_phantom(&mut Rng::new(1), (16, 16), 0).unwrap();
        assert_eq!(p.image.norm(), 0.0);
        let a = make_phantom(&mut Rng::new(5), (32, 32), 4).unwrap();
        let b = make_phantom(&mut Rng::new(5), (32, 32), 4).unwrap();
        assert_eq!(a.image, b.image);
        assert!(make_phantom(&mut Rng::new(1), (15, 32), 1).is_err());
    }

    #[test]
    fn phantom_is_constant_per_region() {
        let p = make_phantom(&mut Rng::new(2), (32, 32), 5).unwrap();
        let mut seen = std::collections::HashMap::new();
        for (l, v) in p.labels.iter().zip(p.image.data()) {
            let e = seen.entry(*l).or_insert(*v);
            assert_eq!(e, v);
        }
        for (l, v) in &seen {
            if *l > 0 {
                let a = v.norm();
                assert!((0.2..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn phantom_gradient_is_sparse() {
        // fraction of pixels with a nonzero forward difference, 64x64, default shape count
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let p = make_phantom(&mut Rng::new(seed), (64, 64), 5).unwrap();
            let d = p.image.data();
            let mut n = 0;
            for y in 0..64 {
                for x in 0..64 {
                    let v = d[y * 64 + x];
                    let gx = d[y * 64 + (x + 1) % 64] - v;
                    let gy = d[((y + 1) % 64) * 64 + x] - v;
                    if gx.norm() > 0.0 || gy.norm() > 0.0 {
                        n += 1;
                    }
                }
            }
            worst = worst.max(n as f64 / 4096.0);
        }
        assert!(worst < 0.25, "gradient fraction {worst}");
    }

    #[test]
    fn single_coil_normalizes_to_unit_modulus() {
        let s = make_sensitivities(&mut Rng::new(3), (16, 16), 1, 5).unwrap();
        assert!(s.maps.data().iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sensitivities_sum_of_squares_is_one() {
        let s = make_sensitivities(&mut Rng::new(4), (32, 24), 4, 5).unwrap();
        for p in 0..32 * 24 {
            let sos: f64 = (0..4).map(|c| s.maps.data()[c * 32 * 24 + p].norm_sqr()).sum();
            assert!((sos - 1.0).abs() < 1e-10);
        }
        assert!(make_sensitivities(&mut Rng::new(4), (8, 8), 2, 9).is_err());
    }

    #[test]
    fn sensitivity_kernels_are_bandlimited() {
        let (h, w) = (32, 32);
        let s = make_sensitivities(&mut Rng::new(6), (h, w), 4, 5).unwrap();
        let mut out_total = 0.0;
        let mut total = 0.0;
        let spec = s.maps.fft2_last().unwrap();
        for ch in 0..4 {
            for i in 0..h * w {
                let (ky, kx) = (signed_freq(i / w, h), signed_freq(i % w, w));
                let inside = ky.abs() <= 2 && kx.abs() <= 2;
                if !inside {
                    assert_eq!(s.kernels.plane(ch)[i], c(0.0, 0.0));
                    out_total += spec.plane(ch)[i].norm_sqr();
                }
                total += spec.plane(ch)[i].norm_sqr();
            }
        }
        let frac = out_total / total;
        assert!(frac < 0.10, "out-of-band fraction {frac}");
    }

    #[test]
    fn sos_energy_is_conserved() {
        let s = make_sensitivities(&mut Rng::new(8), (16, 16), 3, 3).unwrap();
        let g = make_phantom(&mut Rng::new(9), (16, 16), 3).unwrap().image;
        let gam = s.modulate(&g).unwrap();
        for p in 0..256 {
            let e: f64 = (0..3).map(|c| gam.plane(c)[p].norm_sqr()).sum();
            assert!((e - g.data()[p].norm_sqr()).abs() < 1e-10);
        }
    }

    #[test]
    fn full_acceleration_is_all_true() {
        for kind in [MaskKind::UniformLines, MaskKind::VariableDensityLines, MaskKind::VariableDensity2d] {
            let m = make_mask(&mut Rng::new(1), (8, 8), kind, 1.0, 0).unwrap();
            assert_eq!(m.count(), 64);
        }
    }

    #[test]
    fn uniform_lines_take_every_other_row() {
        let m = make_mask(&mut Rng::new(1), (8, 6), MaskKind::UniformLines, 2.0, 0).unwrap();
        for y in 0..8 {
            for x in 0..6 {
                assert_eq!(m.get(y, x), y % 2 == 0);
            }
        }
    }

    #[test]
    fn variable_density_2d_rate() {
        let mut fr = Vec::new();
        for seed in 0..100 {
            let m = make_mask(&mut Rng::new(seed), (64, 64), MaskKind::VariableDensity2d, 4.0, 0).unwrap();
            fr.push(m.fraction());
        }
        assert!(fr.iter().all(|f| (0.20..=0.30).contains(f)), "{fr:?}");
    }

    #[test]
    fn calibration_region_is_sampled() {
        let m = make_mask(&mut Rng::new(2), (32, 32), MaskKind::VariableDensityLines, 4.0, 8).unwrap();
        for i in m.calibration_indices().unwrap() {
            assert!(m.as_slice()[i]);
        }
        assert_eq!(m.calibration_indices().unwrap().len(), 8 * 32);
        let m2 = make_mask(&mut Rng::new(2), (32, 32), MaskKind::VariableDensity2d, 6.0, 10).unwrap();
        assert_eq!(m2.calibration_indices().unwrap().len(), 100);
        assert!(m2.calibration_indices().unwrap().iter().all(|&i| m2.as_slice()[i]));
        assert!(make_mask(&mut Rng::new(2), (16, 16), MaskKind::VariableDensity2d, 2.0, 17).is_err());
    }

    #[test]
    fn masks_are_reproducible_and_idempotent() {
        let a = make_mask(&mut Rng::new(11), (32, 32), MaskKind::VariableDensityLines, 3.0, 4).unwrap();
        let b = make_mask(&mut Rng::new(11), (32, 32), MaskKind::VariableDensityLines, 3.0, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.intersect(&a).unwrap(), a);
    }

    #[test]
    fn forward_with_full_mask_is_fft() {
        let x = Rng::new(1).complex_normal_tensor(&[2, 8, 8], 1.0);
        let b = apply_forward(&x, &SamplingMask::full((8, 8))).unwrap();
        assert_eq!(b.data, x.fft2_last().unwrap());
        let back = apply_adjoint(&b).unwrap();
        assert!((&back - &x).norm() < 1e-12 * x.norm());
        let z = apply_forward(&ComplexTensor::zeros(&[2, 8, 8]), &b.mask).unwrap();
        assert_eq!(z.data.norm(), 0.0);
    }

    #[test]
    fn adjoint_projection_in_fourier() {
        let mut rng = Rng::new(12);
        let mask = make_mask(&mut rng, (16, 16), MaskKind::VariableDensity2d, 3.0, 0).unwrap();
        let x = rng.complex_normal_tensor(&[1, 16, 16], 1.0);
        let xhat = x.fft2_last().unwrap();
        let y = apply_adjoint(&apply_forward(&x, &mask).unwrap()).unwrap().fft2_last().unwrap();
        for i in 0..256 {
            let want = if mask.as_slice()[i] { xhat.data()[i] } else { c(0.0, 0.0) };
            assert!((y.data()[i] - want).norm() < 1e-10);
        }
    }

    #[test]
    fn noise_only_on_samples() {
        let mut rng = Rng::new(13);
        let mask = make_mask(&mut rng, (64, 64), MaskKind::VariableDensity2d, 2.0, 0).unwrap();
        let b = apply_forward(&ComplexTensor::zeros(&[4, 64, 64]), &mask).unwrap();
        assert_eq!(add_noise(&b, &mut rng, 0.0).unwrap().data, b.data);
        let nb = add_noise(&b, &mut rng, 0.05).unwrap();
        let mut comps = Vec::new();
        for (i, v) in nb.data.data().iter().enumerate() {
            if mask.as_slice()[i % 4096] {
                comps.push(v.re);
                comps.push(v.im);
            } else {
                assert_eq!(*v, c(0.0, 0.0));
            }
        }
        let std = (comps.iter().map(|v| v * v).sum::<f64>() / comps.len() as f64).sqrt();
        assert!((std - 0.05).abs() < 0.05 * 0.05, "std {std}");
    }

    #[test]
    fn sine_product_has_the_cut_roots() {
        let roots = [0.13, 0.58];
        let co = sine_product_coeffs(&roots);
        assert_eq!(co.len(), 3);
        let eval = |t: f64| -> C64 {
            co.iter()
                .enumerate()
                .map(|(j, &a)| a * C64::from_polar(1.0, 2.0 * PI * (j as f64 - 1.0) * t))
                .sum()
        };
        for &r in &roots {
            assert!(eval(r).norm() < 1e-14);
        }
        let direct = (PI * (0.3 - 0.13)).sin() * (PI * (0.3 - 0.58)).sin();
        assert!((eval(0.3) - c(direct, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn edge_phantom_dc_is_mean_value() {
        let (p, cuts) = edge_phantom(&mut Rng::new(14), (16, 16), 2, 2).unwrap();
        assert_eq!(cuts.rows.len(), 2);
        // DC sample equals N times the area-weighted mean over the torus,
        // which the inverse DFT spreads as the image mean
        let k = p.kspace.unwrap();
        let mean: C64 = p.image.data().iter().sum::<C64>() / 256.0;
        assert!((k.data()[0] / 256.0 - mean).norm() < 1e-12);
        assert!(edge_phantom(&mut Rng::new(1), (16, 16), 3, 2).is_err());
    }
}

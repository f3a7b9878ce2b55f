//! Fourier weighting `G`, block-Hankel lifting `T(.)`, Gram matrices, null-space
//! bases and the convolutional filterbank `J(Q)` equivalent to `T(Z) Q`.
//!
//! Lifting convention: for a filter window `(fy, fx)` the rows of a lifted
//! block enumerate the valid positions `n` (where the whole window fits),
//! lexicographically; the columns enumerate window offsets `m`,
//! lexicographically; entry `(n, m)` is `Z[n - m]`. Multiplying the block by a
//! vectorized filter therefore computes the valid linear convolution `Z * q`.
//!
//! Lifting acts on arrays exactly as given. Callers that lift k-space move it
//! to the centered arrangement first (see [`centered`]), so that neighbouring
//! array entries are neighbouring frequencies.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::acquisition::MultiChannelKSpace;
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{signed_freq, ComplexTensor, C64};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stacking {
    /// Single-channel `G(gamma_hat)` (two gradient bands), band blocks stacked
    /// by rows.
    VerticalGradient,
    /// `M` channels with identity weighting, channel blocks stacked by columns.
    HorizontalMultichannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Identity,
    Gradient,
}

impl Weighting {
    /// Diagonal of `G^H G` at storage index `(y, x)` of an `h x w` grid.
    pub fn gram_weight(self, y: usize, x: usize, h: usize, w: usize) -> f64 {
        match self {
            Weighting::Identity => 1.0,
            Weighting::Gradient => {
                let ky = signed_freq(y, h) as f64;
                let kx = signed_freq(x, w) as f64;
                4.0 * PI * PI * (kx * kx + ky * ky)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftingSpec {
    pub stacking: Stacking,
    /// Filter window `(rows, cols)`.
    pub window: (usize, usize),
    /// Grid `(rows, cols)` of the lifted tensor.
    pub grid: (usize, usize),
    /// Image channels; 1 for the gradient lifting.
    pub channels: usize,
}

impl LiftingSpec {
    pub fn vertical_gradient(grid: (usize, usize), window: (usize, usize)) -> Self {
        Self {
            stacking: Stacking::VerticalGradient,
            window,
            grid,
            channels: 1,
        }
    }

    pub fn horizontal(grid: (usize, usize), window: (usize, usize), channels: usize) -> Self {
        Self {
            stacking: Stacking::HorizontalMultichannel,
            window,
            grid,
            channels,
        }
    }

    pub fn with_grid(mut self, grid: (usize, usize)) -> Self {
        self.grid = grid;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (fy, fx) = self.window;
        let (h, w) = self.grid;
        if fy == 0 || fx == 0 {
            return invalid("filter window must be non-empty");
        }
        if fy > h || fx > w {
            return invalid(format!("window {:?} larger than grid {:?}", self.window, self.grid));
        }
        if self.channels == 0 {
            return invalid("channels must be >= 1");
        }
        if self.stacking == Stacking::VerticalGradient && self.channels != 1 {
            return invalid("gradient lifting is single-channel");
        }
        Ok(())
    }

    pub fn weighting(&self) -> Weighting {
        match self.stacking {
            Stacking::VerticalGradient => Weighting::Gradient,
            Stacking::HorizontalMultichannel => Weighting::Identity,
        }
    }

    /// Bands of the lifted tensor `G(Gamma_hat)`.
    pub fn bands(&self) -> usize {
        match self.stacking {
            Stacking::VerticalGradient => 2,
            Stacking::HorizontalMultichannel => self.channels,
        }
    }

    pub fn row_blocks(&self) -> usize {
        match self.stacking {
            Stacking::VerticalGradient => 2,
            Stacking::HorizontalMultichannel => 1,
        }
    }

    pub fn col_blocks(&self) -> usize {
        match self.stacking {
            Stacking::VerticalGradient => 1,
            Stacking::HorizontalMultichannel => self.channels,
        }
    }

    pub fn taps(&self) -> usize {
        self.window.0 * self.window.1
    }

    /// Valid positions per axis.
    pub fn valid(&self) -> (usize, usize) {
        (self.grid.0 - self.window.0 + 1, self.grid.1 - self.window.1 + 1)
    }

    pub fn positions(&self) -> usize {
        let (py, px) = self.valid();
        py * px
    }

    pub fn rows(&self) -> usize {
        self.positions() * self.row_blocks()
    }

    pub fn cols(&self) -> usize {
        self.taps() * self.col_blocks()
    }

    fn check_input(&self, z: &ComplexTensor) -> Result<()> {
        self.validate()?;
        if z.ndim() != 3 || z.shape()[0] != self.bands() || z.grid()? != self.grid {
            return shape_err(format!(
                "lifting expects [{}, {}, {}], got {:?}",
                self.bands(),
                self.grid.0,
                self.grid.1,
                z.shape()
            ));
        }
        Ok(())
    }
}

/// Stacking and window as they appear in configs; the grid and channel count
/// come from the data being lifted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiftingConfig {
    pub stacking: Stacking,
    /// `[rows, cols]`
    pub window: [usize; 2],
}

impl LiftingConfig {
    pub fn spec(&self, grid: (usize, usize), channels: usize) -> Result<LiftingSpec> {
        let window = (self.window[0], self.window[1]);
        let spec = match self.stacking {
            Stacking::VerticalGradient => {
                if channels != 1 {
                    return invalid(format!("gradient lifting needs single-channel data, got {channels} channels"));
                }
                LiftingSpec::vertical_gradient(grid, window)
            }
            Stacking::HorizontalMultichannel => LiftingSpec::horizontal(grid, window, channels),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `Gamma_hat -> T-ready tensor`: weighting then centering.
pub fn lift_input(spec: &LiftingSpec, khat: &ComplexTensor) -> Result<ComplexTensor> {
    Ok(centered(&apply_weighting(spec.weighting(), khat)?))
}

/// Adjoint of [`lift_input`].
pub fn lift_input_adjoint(spec: &LiftingSpec, z: &ComplexTensor) -> Result<ComplexTensor> {
    apply_weighting_adjoint(spec.weighting(), &uncentered(z))
}

/// `G(gamma_hat)`: two bands `j 2 pi k_x gamma_hat` and `j 2 pi k_y gamma_hat`
/// with signed integer frequencies; input in standard DFT order, `[H, W]` or
/// `[1, H, W]`.
pub fn grad_weight(khat: &ComplexTensor) -> Result<ComplexTensor> {
    let (h, w) = khat.grid()?;
    if khat.len() != h * w {
        return shape_err(format!("grad_weight expects one channel, got {:?}", khat.shape()));
    }
    let mut out = ComplexTensor::zeros(&[2, h, w]);
    let src = khat.data();
    for y in 0..h {
        let ky = 2.0 * PI * signed_freq(y, h) as f64;
        for x in 0..w {
            let kx = 2.0 * PI * signed_freq(x, w) as f64;
            let v = src[y * w + x];
            out.data_mut()[y * w + x] = C64::new(0.0, kx) * v;
            out.data_mut()[h * w + y * w + x] = C64::new(0.0, ky) * v;
        }
    }
    Ok(out)
}

/// `G^H(Z)[k] = -(j 2 pi k_x z_1[k] + j 2 pi k_y z_2[k])`, returned as `[1, H, W]`.
pub fn grad_weight_adjoint(z: &ComplexTensor) -> Result<ComplexTensor> {
    if z.ndim() != 3 || z.shape()[0] != 2 {
        return shape_err(format!("grad_weight_adjoint expects [2, H, W], got {:?}", z.shape()));
    }
    let (h, w) = z.grid()?;
    let mut out = ComplexTensor::zeros(&[1, h, w]);
    for y in 0..h {
        let ky = 2.0 * PI * signed_freq(y, h) as f64;
        for x in 0..w {
            let kx = 2.0 * PI * signed_freq(x, w) as f64;
            let i = y * w + x;
            out.data_mut()[i] = -(C64::new(0.0, kx) * z.data()[i] + C64::new(0.0, ky) * z.data()[h * w + i]);
        }
    }
    Ok(out)
}

/// Applies `G` for the weighting of `spec` to `[M, H, W]` k-space.
pub fn apply_weighting(weighting: Weighting, khat: &ComplexTensor) -> Result<ComplexTensor> {
    match weighting {
        Weighting::Identity => Ok(khat.clone()),
        Weighting::Gradient => grad_weight(khat),
    }
}

pub fn apply_weighting_adjoint(weighting: Weighting, z: &ComplexTensor) -> Result<ComplexTensor> {
    match weighting {
        Weighting::Identity => Ok(z.clone()),
        Weighting::Gradient => grad_weight_adjoint(z),
    }
}

/// Storage-order tensor to the centered arrangement (per plane).
pub fn centered(x: &ComplexTensor) -> ComplexTensor {
    x.fftshift2()
}

pub fn uncentered(x: &ComplexTensor) -> ComplexTensor {
    x.ifftshift2()
}

/// The lifted matrix `T(Z)` with its block bookkeeping.
#[derive(Clone, Debug)]
pub struct LiftedMatrix {
    pub matrix: DMatrix<C64>,
    pub positions: usize,
    pub taps: usize,
    pub row_blocks: usize,
    pub col_blocks: usize,
}

/// Offset `(n - m)` in plane storage for row `n` (valid index) and tap `m`.
#[inline]
fn source_index(spec: &LiftingSpec, pos: usize, tap: usize) -> usize {
    let (fy, fx) = spec.window;
    let (_, px) = spec.valid();
    let (ny, nx) = (pos / px + fy - 1, pos % px + fx - 1);
    let (my, mx) = (tap / fx, tap % fx);
    (ny - my) * spec.grid.1 + (nx - mx)
}

/// Band feeding block `(rb, cb)`: vertical stacking uses the row block,
/// horizontal stacking the column block.
#[inline]
fn block_band(spec: &LiftingSpec, rb: usize, cb: usize) -> usize {
    match spec.stacking {
        Stacking::VerticalGradient => rb,
        Stacking::HorizontalMultichannel => cb,
    }
}

pub fn hankel_lift(z: &ComplexTensor, spec: &LiftingSpec) -> Result<LiftedMatrix> {
    spec.check_input(z)?;
    let (p, t) = (spec.positions(), spec.taps());
    let mut m = DMatrix::from_element(spec.rows(), spec.cols(), ZERO);
    for rb in 0..spec.row_blocks() {
        for cb in 0..spec.col_blocks() {
            let plane = z.plane(block_band(spec, rb, cb));
            for pos in 0..p {
                for tap in 0..t {
                    m[(rb * p + pos, cb * t + tap)] = plane[source_index(spec, pos, tap)];
                }
            }
        }
    }
    Ok(LiftedMatrix {
        matrix: m,
        positions: p,
        taps: t,
        row_blocks: spec.row_blocks(),
        col_blocks: spec.col_blocks(),
    })
}

/// Adjoint of [`hankel_lift`] as a linear map: scatters matrix entries back
/// onto the grid, summing duplicates.
pub fn hankel_lift_adjoint(m: &DMatrix<C64>, spec: &LiftingSpec) -> Result<ComplexTensor> {
    spec.validate()?;
    if m.nrows() != spec.rows() || m.ncols() != spec.cols() {
        return shape_err("matrix does not match the lifting spec");
    }
    let (p, t) = (spec.positions(), spec.taps());
    let (h, w) = spec.grid;
    let mut out = ComplexTensor::zeros(&[spec.bands(), h, w]);
    for rb in 0..spec.row_blocks() {
        for cb in 0..spec.col_blocks() {
            let band = block_band(spec, rb, cb);
            let plane = out.plane_mut(band);
            for tap in 0..t {
                for pos in 0..p {
                    plane[source_index(spec, pos, tap)] += m[(rb * p + pos, cb * t + tap)];
                }
            }
        }
    }
    Ok(out)
}

/// `T(Z)^H T(Z)` by explicit matrix product.
pub fn lift_gram_explicit(z: &ComplexTensor, spec: &LiftingSpec) -> Result<DMatrix<C64>> {
    let t = hankel_lift(z, spec)?.matrix;
    Ok(t.adjoint() * t)
}

/// `T(Z)^H T(Z)` via FFT cross-correlations.
///
/// Entry `((c, m), (c', m'))` equals `sum_p conj(Z_c[p]) Y[p + m]` where
/// `Y = 1_valid(n) Z_c'[n - m']`; one zero-padded FFT correlation yields a
/// whole column block for all `m` at once.
pub fn lift_gram(z: &ComplexTensor, spec: &LiftingSpec) -> Result<DMatrix<C64>> {
    spec.check_input(z)?;
    let (h, w) = spec.grid;
    let (fy, fx) = spec.window;
    let (lh, lw) = (h + fy - 1, w + fx - 1);
    let t = spec.taps();
    let bands = spec.bands();
    let pad = |plane: &[C64]| -> ComplexTensor {
        let mut out = ComplexTensor::zeros(&[lh, lw]);
        for y in 0..h {
            out.data_mut()[y * lw..y * lw + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
        }
        out
    };
    let spectra: Vec<ComplexTensor> = (0..bands)
        .map(|b| pad(z.plane(b)).fft2((0, 1)))
        .collect::<Result<_>>()?;
    let n = spec.cols();
    let mut gram = DMatrix::from_element(n, n, ZERO);
    let (py, px) = spec.valid();
    // (row_block_pairs): which (band_left, band_right, col_block_left, col_block_right) contribute
    let pairs: Vec<(usize, usize, usize, usize)> = match spec.stacking {
        Stacking::VerticalGradient => (0..bands).map(|b| (b, b, 0, 0)).collect(),
        Stacking::HorizontalMultichannel => (0..bands)
            .flat_map(|c| (0..bands).map(move |c2| (c, c2, c, c2)))
            .collect(),
    };
    for mp in 0..t {
        let (my, mx) = (mp / fx, mp % fx);
        for &(bl, br, cl, cr) in &pairs {
            let src = z.plane(br);
            let mut y_arr = ComplexTensor::zeros(&[lh, lw]);
            for vy in 0..py {
                let ny = vy + fy - 1;
                for vx in 0..px {
                    let nx = vx + fx - 1;
                    y_arr.data_mut()[ny * lw + nx] = src[(ny - my) * w + (nx - mx)];
                }
            }
            let yf = y_arr.fft2((0, 1))?;
            let prod = spectra[bl].zip_map(&yf, |a, b| a.conj() * b)?;
            let corr = prod.ifft2((0, 1))?;
            for m in 0..t {
                let (ry, rx) = (m / fx, m % fx);
                gram[(cl * t + m, cr * t + mp)] += corr.data()[ry * lw + rx];
            }
        }
    }
    Ok(gram)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NullSpaceOrigin {
    IrlsWeight,
    CalibrationNullspace,
}

/// Null-space filters `Q` (taps x V). For IRLS weights `Q` is the full
/// Hermitian matrix `(Gram + eps I)^(-1/4)`; for calibration it has
/// orthonormal columns.
#[derive(Clone, Debug)]
pub struct NullSpaceBasis {
    pub q: DMatrix<C64>,
    pub eps: f64,
    pub origin: NullSpaceOrigin,
}

impl NullSpaceBasis {
    pub fn empty(taps: usize) -> Self {
        Self {
            q: DMatrix::from_element(taps, 0, ZERO),
            eps: 0.0,
            origin: NullSpaceOrigin::CalibrationNullspace,
        }
    }

    pub fn filters(&self) -> usize {
        self.q.ncols()
    }

    pub fn taps(&self) -> usize {
        self.q.nrows()
    }

    /// `Q Q^H`, the weight in `||T Q||_F^2 = tr(T W T^H)`.
    pub fn weight(&self) -> DMatrix<C64> {
        &self.q * self.q.adjoint()
    }
}

fn hermitian_residual(a: &DMatrix<C64>) -> f64 {
    let scale = a.norm().max(f64::MIN_POSITIVE);
    (a - a.adjoint()).norm() / scale
}

/// `Q = (gram + eps I)^(-1/4)` via a Hermitian eigendecomposition.
pub fn nullspace_weight(gram: &DMatrix<C64>, eps: f64) -> Result<NullSpaceBasis> {
    if !(eps > 0.0) {
        return invalid(format!("eps must be positive, got {eps}"));
    }
    if !gram.is_square() {
        return shape_err("gram must be square");
    }
    if gram.norm() > 0.0 && hermitian_residual(gram) > 1e-8 {
        return invalid("gram is not Hermitian");
    }
    let sym = (gram + gram.adjoint()).scale(0.5);
    let eig = SymmetricEigen::new(sym);
    let n = gram.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..n {
        // clamp roundoff negatives; the Gram is PSD
        let s = (eig.eigenvalues[j].max(0.0) + eps).powf(-0.25);
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    let q = scaled * eig.eigenvectors.adjoint();
    let q = (&q + q.adjoint()).scale(0.5);
    Ok(NullSpaceBasis {
        q,
        eps,
        origin: NullSpaceOrigin::IrlsWeight,
    })
}

/// Largest eigenvalue of a Hermitian PSD matrix.
pub fn spectral_max(gram: &DMatrix<C64>) -> f64 {
    if gram.nrows() == 0 {
        return 0.0;
    }
    let sym = (gram + gram.adjoint()).scale(0.5);
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Centered crop `[bands, ch, cw]` of the calibration block of centered
/// weighted k-space.
fn calibration_crop(zc: &ComplexTensor, extent: (usize, usize)) -> Result<ComplexTensor> {
    let (h, w) = zc.grid()?;
    let (ch, cw) = extent;
    let (y0, x0) = (h / 2 - ch / 2, w / 2 - cw / 2);
    let bands = zc.planes();
    let mut out = ComplexTensor::zeros(&[bands, ch, cw]);
    for b in 0..bands {
        let src = zc.plane(b);
        let dst = out.plane_mut(b);
        for y in 0..ch {
            dst[y * cw..(y + 1) * cw].copy_from_slice(&src[(y0 + y) * w + x0..(y0 + y) * w + x0 + cw]);
        }
    }
    Ok(out)
}

/// Right singular vectors of `T_R` with singular value below
/// `rank_tol * sigma_max`, as orthonormal columns. When `T_R` has fewer rows
/// than columns the unconstrained directions are part of the null space too.
pub fn nullspace_from_lifted(t: &DMatrix<C64>, rank_tol: f64) -> NullSpaceBasis {
    let (r, c) = t.shape();
    let padded = if r < c {
        let mut p = DMatrix::from_element(c, c, ZERO);
        p.view_mut((0, 0), (r, c)).copy_from(t);
        p
    } else {
        t.clone()
    };
    let svd = SVD::new(padded, false, true);
    let v_t = svd.v_t.expect("requested V");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] < rank_tol * smax || smax == 0.0)
        .collect();
    let mut q = DMatrix::from_element(c, keep.len(), ZERO);
    for (j, &i) in keep.iter().enumerate() {
        for k in 0..c {
            q[(k, j)] = v_t[(i, k)].conj();
        }
    }
    NullSpaceBasis {
        q,
        eps: 0.0,
        origin: NullSpaceOrigin::CalibrationNullspace,
    }
}

/// Estimates `Q` from the fully sampled calibration block of `ksp`.
///
/// `spec.grid` is the full k-space grid; the weighting is applied on the full
/// grid before cropping so gradient weights use the true frequencies.
pub fn calibrated_nullspace(ksp: &MultiChannelKSpace, spec: &LiftingSpec, rank_tol: f64) -> Result<NullSpaceBasis> {
    spec.validate()?;
    let extent = ksp
        .mask
        .calibration
        .ok_or_else(|| Error::InvalidArgument("mask has no calibration region".into()))?;
    if extent.0 < spec.window.0 || extent.1 < spec.window.1 {
        return invalid(format!(
            "calibration region {extent:?} too small for window {:?}",
            spec.window
        ));
    }
    let weighted = apply_weighting(spec.weighting(), &ksp.data)?;
    let crop = calibration_crop(&centered(&weighted), extent)?;
    let t = hankel_lift(&crop, &spec.with_grid(extent))?;
    Ok(nullspace_from_lifted(&t.matrix, rank_tol))
}

/// `J(Q)`: the filters `q_i` laid out per stacking. SIMO for vertical stacking
/// (every band passes through every filter), MIMO for horizontal stacking
/// (filter `i` sums per-channel sub-filters `q_{i,c}`).
#[derive(Clone, Debug)]
pub struct FilterBank {
    pub spec: LiftingSpec,
    /// Each filter holds `col_blocks * taps` coefficients, block-major.
    pub filters: Vec<Vec<C64>>,
}

pub fn build_filterbank(q: &DMatrix<C64>, spec: &LiftingSpec) -> Result<FilterBank> {
    spec.validate()?;
    if q.nrows() != spec.cols() {
        return shape_err(format!("Q has {} taps, lifting needs {}", q.nrows(), spec.cols()));
    }
    let filters = (0..q.ncols()).map(|j| q.column(j).iter().cloned().collect()).collect();
    Ok(FilterBank { spec: *spec, filters })
}

impl FilterBank {
    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    /// Output planes: `V * row_blocks`, each over the valid grid.
    pub fn output_planes(&self) -> usize {
        self.len() * self.spec.row_blocks()
    }
}

/// Valid convolution of `plane` with `taps` (window `spec.window`), added into `out`.
fn conv_valid_acc(spec: &LiftingSpec, plane: &[C64], taps: &[C64], out: &mut [C64]) {
    let (fy, fx) = spec.window;
    let (py, px) = spec.valid();
    let w = spec.grid.1;
    for my in 0..fy {
        for mx in 0..fx {
            let q = taps[my * fx + mx];
            if q == ZERO {
                continue;
            }
            for vy in 0..py {
                let row = (vy + fy - 1 - my) * w + (fx - 1 - mx);
                let o = &mut out[vy * px..(vy + 1) * px];
                let src = &plane[row..row + px];
                for (ov, &sv) in o.iter_mut().zip(src) {
                    *ov += sv * q;
                }
            }
        }
    }
}

/// Adjoint of [`conv_valid_acc`]: correlation with the conjugated filter,
/// scattered back onto the full grid.
fn conv_valid_adjoint_acc(spec: &LiftingSpec, y: &[C64], taps: &[C64], out: &mut [C64]) {
    let (fy, fx) = spec.window;
    let (py, px) = spec.valid();
    let w = spec.grid.1;
    for my in 0..fy {
        for mx in 0..fx {
            let q = taps[my * fx + mx].conj();
            if q == ZERO {
                continue;
            }
            for vy in 0..py {
                let row = (vy + fy - 1 - my) * w + (fx - 1 - mx);
                let dst = &mut out[row..row + px];
                for (dv, &yv) in dst.iter_mut().zip(&y[vy * px..(vy + 1) * px]) {
                    *dv += yv * q;
                }
            }
        }
    }
}

/// `J(Q) Z`. Output is `[V * row_blocks, py, px]` ordered filter-major.
pub fn apply_filterbank(bank: &FilterBank, z: &ComplexTensor) -> Result<ComplexTensor> {
    let spec = &bank.spec;
    spec.check_input(z)?;
    let (py, px) = spec.valid();
    let t = spec.taps();
    let rb = spec.row_blocks();
    let mut out = ComplexTensor::zeros(&[bank.output_planes(), py, px]);
    for (i, f) in bank.filters.iter().enumerate() {
        for r in 0..rb {
            let mut acc = vec![ZERO; py * px];
            for cb in 0..spec.col_blocks() {
                let band = block_band(spec, r, cb);
                conv_valid_acc(spec, z.plane(band), &f[cb * t..(cb + 1) * t], &mut acc);
            }
            out.plane_mut(i * rb + r).copy_from_slice(&acc);
        }
    }
    Ok(out)
}

/// `J(Q)^H W`: correlation with the flipped, conjugated filters.
pub fn apply_filterbank_adjoint(bank: &FilterBank, y: &ComplexTensor) -> Result<ComplexTensor> {
    let spec = &bank.spec;
    let (py, px) = spec.valid();
    if y.shape() != [bank.output_planes(), py, px] {
        return shape_err(format!("filterbank output shape mismatch: {:?}", y.shape()));
    }
    let t = spec.taps();
    let rb = spec.row_blocks();
    let (h, w) = spec.grid;
    let mut out = ComplexTensor::zeros(&[spec.bands(), h, w]);
    for (i, f) in bank.filters.iter().enumerate() {
        for r in 0..rb {
            let yp = y.plane(i * rb + r).to_vec();
            for cb in 0..spec.col_blocks() {
                let band = block_band(spec, r, cb);
                conv_valid_adjoint_acc(spec, &yp, &f[cb * t..(cb + 1) * t], out.plane_mut(band));
            }
        }
    }
    Ok(out)
}

/// `L(Z) = Z - ratio * J^H J Z` with `ratio = lambda / beta`.
pub fn residual_projector(bank: &FilterBank, z: &ComplexTensor, ratio: f64) -> Result<ComplexTensor> {
    if bank.is_empty() {
        return Ok(z.clone());
    }
    let jz = apply_filterbank(bank, z)?;
    let jhjz = apply_filterbank_adjoint(bank, &jz)?;
    let mut out = z.clone();
    out.axpy(C64::new(-ratio, 0.0), &jhjz)?;
    Ok(out)
}

/// `Z -> T^*(T(Z) W)` for a Hermitian tap weight `W = Q Q^H`, the gradient of
/// `||T(Z) Q||_F^2 / 2`, together with that penalty.
#[derive(Clone, Debug)]
pub struct WeightedLift {
    pub spec: LiftingSpec,
    pub weight: DMatrix<C64>,
}

impl WeightedLift {
    pub fn new(spec: LiftingSpec, basis: &NullSpaceBasis) -> Result<Self> {
        if basis.taps() != spec.cols() {
            return shape_err("null-space basis does not match lifting");
        }
        Ok(Self {
            spec,
            weight: basis.weight(),
        })
    }

    pub fn apply(&self, z: &ComplexTensor) -> Result<ComplexTensor> {
        let t = hankel_lift(z, &self.spec)?.matrix;
        hankel_lift_adjoint(&(t * &self.weight), &self.spec)
    }

    /// `||T(Z) Q||_F^2`.
    pub fn penalty(&self, z: &ComplexTensor) -> Result<f64> {
        let t = hankel_lift(z, &self.spec)?.matrix;
        let tw = &t * &self.weight;
        Ok(t.iter().zip(tw.iter()).map(|(a, b)| (a.conj() * b).re).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn one_dimensional_convention() {
        // signal [1, 2, 3] with a length-2 filter -> rows [[2, 1], [3, 2]]
        let z = ComplexTensor::from_real(&[1, 1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let spec = LiftingSpec::horizontal((1, 3), (1, 2), 1);
        let t = hankel_lift(&z, &spec).unwrap().matrix;
        assert_eq!(t.shape(), (2, 2));
        assert_eq!(t[(0, 0)], c(2.0, 0.0));
        assert_eq!(t[(0, 1)], c(1.0, 0.0));
        assert_eq!(t[(1, 0)], c(3.0, 0.0));
        assert_eq!(t[(1, 1)], c(2.0, 0.0));
    }

    #[test]
    fn grad_weight_formula() {
        let mut g = ComplexTensor::zeros(&[8, 8]);
        g.data_mut()[0] = c(1.0, 0.0);
        let z = grad_weight(&g).unwrap();
        assert_eq!(z.norm(), 0.0);

        // impulse at k_x = 1, k_y = 2
        let mut g = ComplexTensor::zeros(&[8, 8]);
        g.data_mut()[2 * 8 + 1] = c(1.0, 0.0);
        let z = grad_weight(&g).unwrap();
        assert!((z.plane(0)[17] - c(0.0, 2.0 * PI)).norm() < 1e-14);
        assert!((z.plane(1)[17] - c(0.0, 4.0 * PI)).norm() < 1e-14);
        let back = grad_weight_adjoint(&z).unwrap();
        assert!((back.data()[17] - c(20.0 * PI * PI, 0.0)).norm() < 1e-12);
        assert!((20.0 * PI * PI - 197.392).abs() < 1e-3);

        // G^H G at k = (3, 0)
        let mut g = ComplexTensor::zeros(&[8, 8]);
        g.data_mut()[3] = c(1.0, 0.0);
        let back = grad_weight_adjoint(&grad_weight(&g).unwrap()).unwrap();
        assert!((back.data()[3] - c(36.0 * PI * PI, 0.0)).norm() < 1e-12);

        assert_eq!(grad_weight_adjoint(&ComplexTensor::zeros(&[2, 4, 4])).unwrap().norm(), 0.0);
        assert!(grad_weight(&ComplexTensor::zeros(&[2, 4, 4])).is_err());
        assert!(grad_weight_adjoint(&ComplexTensor::zeros(&[3, 4, 4])).is_err());
    }

    #[test]
    fn horizontal_lift_block_shape() {
        let z = Rng::new(1).complex_normal_tensor(&[3, 8, 8], 1.0);
        let spec3 = LiftingSpec::horizontal((8, 8), (3, 3), 3);
        let one = ComplexTensor::new(vec![1, 8, 8], z.plane(0).to_vec()).unwrap();
        let spec1 = LiftingSpec::horizontal((8, 8), (3, 3), 1);
        let t3 = hankel_lift(&z, &spec3).unwrap().matrix;
        let t1 = hankel_lift(&one, &spec1).unwrap().matrix;
        assert_eq!(t3.ncols(), 3 * t1.ncols());
        assert_eq!(t3.nrows(), t1.nrows());
    }

    #[test]
    fn window_larger_than_grid_is_rejected() {
        let z = ComplexTensor::zeros(&[1, 4, 4]);
        assert!(hankel_lift(&z, &LiftingSpec::horizontal((4, 4), (5, 2), 1)).is_err());
    }

    #[test]
    fn gram_paths_agree_and_zero_input() {
        let mut rng = Rng::new(2);
        for spec in [
            LiftingSpec::vertical_gradient((8, 8), (2, 2)),
            LiftingSpec::horizontal((8, 7), (3, 2), 3),
        ] {
            let z = rng.complex_normal_tensor(&[spec.bands(), spec.grid.0, spec.grid.1], 1.0);
            let a = lift_gram_explicit(&z, &spec).unwrap();
            let b = lift_gram(&z, &spec).unwrap();
            assert!((&a - &b).norm() <= 1e-9 * a.norm());
            let zero = ComplexTensor::zeros(z.shape());
            assert_eq!(lift_gram(&zero, &spec).unwrap().norm(), 0.0);
            let eig = SymmetricEigen::new(a.clone()).eigenvalues;
            assert!(eig.iter().all(|&e| e >= -1e-12 * a.norm()));
        }
    }

    #[test]
    fn nullspace_weight_analytic_cases() {
        let id = DMatrix::<C64>::identity(4, 4);
        let q = nullspace_weight(&id, 1e-12).unwrap().q;
        assert!((&q - &id).norm() < 1e-3);

        let mut g = DMatrix::from_element(2, 2, ZERO);
        g[(0, 0)] = c(16.0, 0.0);
        let q = nullspace_weight(&g, 1.0).unwrap().q;
        assert!((q[(0, 0)].re - 17f64.powf(-0.25)).abs() < 1e-12);
        assert!((q[(0, 0)].re - 0.49247).abs() < 1e-5);
        assert!((q[(1, 1)].re - 1.0).abs() < 1e-12);
        assert!(q[(0, 1)].norm() < 1e-12);
    }

    #[test]
    fn nullspace_weight_rejects_bad_input() {
        let mut g = DMatrix::<C64>::identity(3, 3);
        assert!(nullspace_weight(&g, 0.0).is_err());
        g[(0, 1)] = c(1.0, 0.0);
        assert!(matches!(nullspace_weight(&g, 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn delta_filter_is_cropped_identity() {
        let spec = LiftingSpec::horizontal((6, 6), (3, 3), 1);
        let mut q = DMatrix::from_element(9, 1, ZERO);
        q[(0, 0)] = c(1.0, 0.0);
        let bank = build_filterbank(&q, &spec).unwrap();
        let z = Rng::new(3).complex_normal_tensor(&[1, 6, 6], 1.0);
        let y = apply_filterbank(&bank, &z).unwrap();
        for vy in 0..4 {
            for vx in 0..4 {
                assert_eq!(y.data()[vy * 4 + vx], z.data()[(vy + 2) * 6 + vx + 2]);
            }
        }
    }

    #[test]
    fn zero_filter_maps_to_zero() {
        let spec = LiftingSpec::vertical_gradient((6, 6), (2, 2));
        let q = DMatrix::from_element(4, 1, ZERO);
        let bank = build_filterbank(&q, &spec).unwrap();
        let z = Rng::new(4).complex_normal_tensor(&[2, 6, 6], 1.0);
        assert_eq!(apply_filterbank(&bank, &z).unwrap().norm(), 0.0);
        assert!(build_filterbank(&DMatrix::from_element(5, 1, ZERO), &spec).is_err());
    }

    #[test]
    fn empty_bank_projector_is_identity() {
        let spec = LiftingSpec::horizontal((6, 6), (3, 3), 2);
        let bank = build_filterbank(&DMatrix::from_element(18, 0, ZERO), &spec).unwrap();
        let z = Rng::new(5).complex_normal_tensor(&[2, 6, 6], 1.0);
        assert_eq!(residual_projector(&bank, &z, 0.3).unwrap(), z);
    }
}

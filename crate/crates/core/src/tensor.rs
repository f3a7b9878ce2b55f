//! Dense complex tensors and the 2-D Fourier transforms used throughout.
//!
//! Storage is row-major. Transforms are unnormalized in the forward
//! direction; the inverse carries the full `1/(N_x N_y)` factor. k-space is
//! kept in standard DFT order; [`signed_freq`] and the shift helpers give the
//! centered view with frequencies in `{-floor(N/2), ..., ceil(N/2)-1}`.

use std::cell::RefCell;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{shape_err, Error, Result};

pub type C64 = Complex64;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    data: Vec<C64>,
}

impl ComplexTensor {
    pub fn new(shape: Vec<usize>, data: Vec<C64>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![C64::new(0.0, 0.0); n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> C64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn from_real(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| C64::new(v, 0.0)).collect(),
        )
    }

    pub fn scalar(value: C64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Extent of the trailing two axes, `(H, W)`.
    pub fn grid(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            n if n >= 2 => Ok((self.shape[n - 2], self.shape[n - 1])),
            _ => shape_err(format!("expected at least 2 axes, got {:?}", self.shape)),
        }
    }

    /// Number of leading "channel" planes when viewed as `[C, H, W]`.
    pub fn planes(&self) -> usize {
        match self.grid() {
            Ok((h, w)) if h * w > 0 => self.data.len() / (h * w),
            _ => 0,
        }
    }

    pub fn plane(&self, c: usize) -> &[C64] {
        let (h, w) = self.grid().expect("tensor has no 2-D grid");
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [C64] {
        let (h, w) = self.grid().expect("tensor has no 2-D grid");
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    /// Stacks equally shaped 2-D planes into `[C, H, W]`.
    pub fn stack(planes: &[ComplexTensor]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero planes".into()))?;
        let (h, w) = first.grid()?;
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            if p.len() != h * w || p.grid()? != (h, w) {
                return shape_err("planes differ in shape");
            }
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![planes.len(), h, w], data)
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: C64, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Inner product `<self, other> = sum conj(self) * other`.
    pub fn dot(&self, other: &Self) -> Result<C64> {
        self.check_same(other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn abs(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.norm()).collect()
    }

    pub fn check_same(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn fft2(&self, axes: (usize, usize)) -> Result<Self> {
        let mut out = self.clone();
        out.transform_axes(axes, FftDirection::Forward)?;
        Ok(out)
    }

    pub fn ifft2(&self, axes: (usize, usize)) -> Result<Self> {
        let mut out = self.clone();
        out.transform_axes(axes, FftDirection::Inverse)?;
        let n = (out.shape[axes.0] * out.shape[axes.1]) as f64;
        out.data.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }

    /// Forward transform over the trailing two axes.
    pub fn fft2_last(&self) -> Result<Self> {
        let n = self.ndim();
        if n < 2 {
            return Err(Error::Axis { axis: 1, ndim: n });
        }
        self.fft2((n - 2, n - 1))
    }

    pub fn ifft2_last(&self) -> Result<Self> {
        let n = self.ndim();
        if n < 2 {
            return Err(Error::Axis { axis: 1, ndim: n });
        }
        self.ifft2((n - 2, n - 1))
    }

    fn transform_axes(&mut self, axes: (usize, usize), dir: FftDirection) -> Result<()> {
        let nd = self.ndim();
        for axis in [axes.0, axes.1] {
            if axis >= nd {
                return Err(Error::Axis { axis, ndim: nd });
            }
        }
        if axes.0 == axes.1 {
            return Err(Error::InvalidArgument(format!(
                "fft2 needs two distinct axes, got {axes:?}"
            )));
        }
        self.transform_axis(axes.0, dir);
        self.transform_axis(axes.1, dir);
        Ok(())
    }

    fn transform_axis(&mut self, axis: usize, dir: FftDirection) {
        let n = self.shape[axis];
        if n <= 1 || self.data.is_empty() {
            return;
        }
        let stride: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let fft = PLANNER.with(|p| p.borrow_mut().plan_fft(n, dir));
        let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        if stride == 1 {
            // contiguous lanes
            fft.process_with_scratch(&mut self.data, &mut scratch);
            return;
        }
        let mut lane = vec![C64::new(0.0, 0.0); n];
        for o in 0..outer {
            let base = o * n * stride;
            for s in 0..stride {
                for (i, v) in lane.iter_mut().enumerate() {
                    *v = self.data[base + i * stride + s];
                }
                fft.process_with_scratch(&mut lane, &mut scratch);
                for (i, v) in lane.iter().enumerate() {
                    self.data[base + i * stride + s] = *v;
                }
            }
        }
    }

    /// Moves the zero frequency of each trailing 2-D plane to the center.
    pub fn fftshift2(&self) -> Self {
        self.roll_planes(true)
    }

    /// Inverse of [`ComplexTensor::fftshift2`].
    pub fn ifftshift2(&self) -> Self {
        self.roll_planes(false)
    }

    fn roll_planes(&self, forward: bool) -> Self {
        let (h, w) = self.grid().expect("shift needs a 2-D grid");
        let mut out = self.clone();
        for c in 0..self.planes() {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            shift_plane(src, dst, h, w, forward);
        }
        out
    }
}

impl Add for &ComplexTensor {
    type Output = ComplexTensor;
    fn add(self, rhs: &ComplexTensor) -> ComplexTensor {
        self.zip_map(rhs, |a, b| a + b).expect("shape mismatch in add")
    }
}

impl Sub for &ComplexTensor {
    type Output = ComplexTensor;
    fn sub(self, rhs: &ComplexTensor) -> ComplexTensor {
        self.zip_map(rhs, |a, b| a - b).expect("shape mismatch in sub")
    }
}

impl Mul<C64> for &ComplexTensor {
    type Output = ComplexTensor;
    fn mul(self, rhs: C64) -> ComplexTensor {
        self.map(|v| v * rhs)
    }
}

pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::Format(format!("dimension overflow in shape {shape:?}")))
    })
}

/// Signed integer frequency of DFT bin `i` on an axis of length `n`.
pub fn signed_freq(i: usize, n: usize) -> i64 {
    if i < n.div_ceil(2) {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Storage index of signed frequency `k` (inverse of [`signed_freq`]).
pub fn freq_index(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}

/// Centered position (row or column in the shifted plane) of DFT bin `i`.
pub fn centered_pos(i: usize, n: usize) -> usize {
    (signed_freq(i, n) + (n / 2) as i64) as usize
}

pub(crate) fn shift_plane(src: &[C64], dst: &mut [C64], h: usize, w: usize, forward: bool) {
    let (sy, sx) = if forward { (h / 2, w / 2) } else { (h.div_ceil(2), w.div_ceil(2)) };
    for y in 0..h {
        let ty = (y + sy) % h;
        for x in 0..w {
            let tx = (x + sx) % w;
            dst[ty * w + tx] = src[y * w + x];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn impulse_transforms_to_ones() {
        let mut x = ComplexTensor::zeros(&[4, 4]);
        x.data_mut()[0] = c(1.0, 0.0);
        let y = x.fft2((0, 1)).unwrap();
        assert!(y.data().iter().all(|v| (*v - c(1.0, 0.0)).norm() < 1e-14));
    }

    #[test]
    fn ones_transform_to_scaled_impulse() {
        let x = ComplexTensor::from_fn(&[4, 4], |_| c(1.0, 0.0));
        let y = x.fft2((0, 1)).unwrap();
        assert!((y.data()[0] - c(16.0, 0.0)).norm() < 1e-12);
        assert!(y.data()[1..].iter().all(|v| v.norm() < 1e-12));
        let z = x.ifft2((0, 1)).unwrap();
        assert!((z.data()[0] - c(1.0, 0.0)).norm() < 1e-14);
        assert!(z.data()[1..].iter().all(|v| v.norm() < 1e-14));
    }

    #[test]
    fn axis_errors() {
        let x = ComplexTensor::zeros(&[4, 4]);
        assert!(matches!(x.fft2((0, 2)), Err(Error::Axis { axis: 2, .. })));
        assert!(x.fft2((1, 1)).is_err());
    }

    #[test]
    fn transforms_over_leading_axes_of_3d() {
        // axes (0, 2) with a middle axis untouched
        let x = ComplexTensor::from_fn(&[3, 2, 5], |i| c(i as f64, (i * i % 7) as f64));
        let y = x.fft2((0, 2)).unwrap().ifft2((0, 2)).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn signed_frequency_convention() {
        let f4: Vec<i64> = (0..4).map(|i| signed_freq(i, 4)).collect();
        assert_eq!(f4, vec![0, 1, -2, -1]);
        let f5: Vec<i64> = (0..5).map(|i| signed_freq(i, 5)).collect();
        assert_eq!(f5, vec![0, 1, 2, -2, -1]);
        for n in 1..9 {
            for i in 0..n {
                assert_eq!(freq_index(signed_freq(i, n), n), i);
            }
        }
    }

    #[test]
    fn shift_places_dc_at_center_and_inverts() {
        for (h, w) in [(4, 4), (5, 3), (1, 6)] {
            let x = ComplexTensor::from_fn(&[h, w], |i| c(i as f64, 0.0));
            let s = x.fftshift2();
            assert_eq!(s.data()[(h / 2) * w + w / 2], x.data()[0]);
            assert_eq!(s.ifftshift2(), x);
            for y in 0..h {
                for xx in 0..w {
                    let v = x.data()[y * w + xx];
                    assert_eq!(s.data()[centered_pos(y, h) * w + centered_pos(xx, w)], v);
                }
            }
        }
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(ComplexTensor::new(vec![2, 3], vec![c(0.0, 0.0); 5]).is_err());
        assert!(ComplexTensor::new(vec![usize::MAX, 4], vec![]).is_err());
    }
}

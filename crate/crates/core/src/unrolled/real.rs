//! Real `[C, H, W]` activations and the convolution kernels of the CNNs.

use nalgebra::DMatrix;

use crate::error::{shape_err, Result};
use crate::tensor::{ComplexTensor, C64};

#[derive(Clone, Debug, PartialEq)]
pub struct RealTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {:?} needs {} values, got {}", shape, n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

/// `[C, H, W]` complex to `[2C, H, W]` real, channel `2c` holding the real
/// part of channel `c` and `2c + 1` the imaginary part.
pub fn pack(x: &ComplexTensor) -> Result<RealTensor> {
    let (h, w) = x.grid()?;
    let c = x.planes();
    let mut out = RealTensor::zeros(&[2 * c, h, w]);
    let hw = h * w;
    for ch in 0..c {
        let src = x.plane(ch);
        for i in 0..hw {
            out.data[2 * ch * hw + i] = src[i].re;
            out.data[(2 * ch + 1) * hw + i] = src[i].im;
        }
    }
    Ok(out)
}

pub fn unpack(x: &RealTensor) -> Result<ComplexTensor> {
    if x.shape.len() != 3 || x.shape[0] % 2 != 0 {
        return shape_err(format!("unpack expects [2C, H, W], got {:?}", x.shape));
    }
    let (c, h, w) = (x.shape[0] / 2, x.shape[1], x.shape[2]);
    let hw = h * w;
    let mut out = ComplexTensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let dst = out.plane_mut(ch);
        for i in 0..hw {
            dst[i] = C64::new(x.data[2 * ch * hw + i], x.data[(2 * ch + 1) * hw + i]);
        }
    }
    Ok(out)
}

/// Shape of a convolution: input channels, output filters, odd kernel extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvShape {
    pub fn weights(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
}

/// Zero-padded patch matrix, `(H W) x (C k k)` column-major: column
/// `(c, i, j)` is channel `c` shifted by `(i - k/2, j - k/2)`.
fn im2col(x: &RealTensor, k: usize) -> DMatrix<f64> {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let hw = h * w;
    let p = (k / 2) as isize;
    let mut cols = vec![0.0; hw * c * k * k];
    for ch in 0..c {
        let plane = &x.data[ch * hw..(ch + 1) * hw];
        for i in 0..k {
            for j in 0..k {
                let r = (ch * k + i) * k + j;
                let dst = &mut cols[r * hw..(r + 1) * hw];
                let (dy, dx) = (i as isize - p, j as isize - p);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                    let srow = sy as usize * w;
                    for xx in x0..x1 {
                        dst[y * w + xx] = plane[srow + (xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    DMatrix::from_vec(hw, c * k * k, cols)
}

/// Scatter-add of a patch-matrix gradient back onto the input grid.
fn col2im(g: &DMatrix<f64>, c: usize, h: usize, w: usize, k: usize) -> RealTensor {
    let hw = h * w;
    let p = (k / 2) as isize;
    let mut out = RealTensor::zeros(&[c, h, w]);
    let src = g.as_slice();
    for ch in 0..c {
        for i in 0..k {
            for j in 0..k {
                let r = (ch * k + i) * k + j;
                let col = &src[r * hw..(r + 1) * hw];
                let (dy, dx) = (i as isize - p, j as isize - p);
                let plane = &mut out.data[ch * hw..(ch + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                    let srow = sy as usize * w;
                    for xx in x0..x1 {
                        plane[srow + (xx as isize + dx) as usize] += col[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

fn check_conv(x: &RealTensor, s: &ConvShape, weights: &[f64], bias: &[f64]) -> Result<()> {
    if s.k % 2 == 0 {
        return shape_err(format!("kernel extent must be odd, got {}", s.k));
    }
    if x.shape.len() != 3 || x.shape[0] != s.cin {
        return shape_err(format!("conv expects {} input channels, got {:?}", s.cin, x.shape));
    }
    if weights.len() != s.weights() || bias.len() != s.cout {
        return shape_err("conv parameter sizes do not match the layer shape");
    }
    Ok(())
}

/// Same-size cross-correlation with zero padding:
/// `y[f, y, x] = b[f] + sum_{c,i,j} w[f, c, i, j] x[c, y + i - k/2, x + j - k/2]`.
pub fn conv2d(x: &RealTensor, s: &ConvShape, weights: &[f64], bias: &[f64]) -> Result<RealTensor> {
    check_conv(x, s, weights, bias)?;
    let (h, w) = (x.shape[1], x.shape[2]);
    let hw = h * w;
    let cols = im2col(x, s.k);
    let wt = DMatrix::from_column_slice(s.cin * s.k * s.k, s.cout, weights);
    let out = cols * wt;
    let mut data = out.data.as_vec().clone();
    for f in 0..s.cout {
        for v in &mut data[f * hw..(f + 1) * hw] {
            *v += bias[f];
        }
    }
    RealTensor::new(vec![s.cout, h, w], data)
}

/// Gradients of [`conv2d`] for output gradient `g`: `(dx, dw, db)`.
pub fn conv2d_backward(
    x: &RealTensor,
    s: &ConvShape,
    weights: &[f64],
    g: &RealTensor,
) -> Result<(RealTensor, Vec<f64>, Vec<f64>)> {
    let (h, w) = (x.shape[1], x.shape[2]);
    let hw = h * w;
    if g.shape != [s.cout, h, w] {
        return shape_err("conv output gradient has the wrong shape");
    }
    let cols = im2col(x, s.k);
    let gm = DMatrix::from_column_slice(hw, s.cout, &g.data);
    let dw = cols.transpose() * &gm;
    let wt = DMatrix::from_column_slice(s.cin * s.k * s.k, s.cout, weights);
    let dcols = gm * wt.transpose();
    let dx = col2im(&dcols, s.cin, h, w, s.k);
    let db = (0..s.cout).map(|f| g.data[f * hw..(f + 1) * hw].iter().sum()).collect();
    Ok((dx, dw.data.as_vec().clone(), db))
}

pub fn relu(x: &RealTensor) -> RealTensor {
    RealTensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn relu_backward(x: &RealTensor, g: &RealTensor) -> RealTensor {
    RealTensor {
        shape: x.shape.clone(),
        data: x.data.iter().zip(&g.data).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect(),
    }
}

//! Reverse-mode differentiation over the fixed op set of the unrolled
//! networks.
//!
//! Complex nodes carry gradients in the form `dL/d(re) + j dL/d(im)`, so a
//! complex-linear op `y = A x` back-propagates as `g_x = A^H g_y`.

use std::sync::Arc;

use crate::acquisition::MultiChannelKSpace;
use crate::error::{invalid, shape_err, Error, Result};
use crate::lifting::{grad_weight, grad_weight_adjoint, Weighting};
use crate::tensor::{ComplexTensor, C64};

use super::real::{conv2d, conv2d_backward, pack, relu, relu_backward, unpack, ConvShape, RealTensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Real(RealTensor),
    Complex(ComplexTensor),
    Scalar(f64),
}

impl Value {
    pub fn real(&self) -> Result<&RealTensor> {
        match self {
            Value::Real(r) => Ok(r),
            _ => Err(Error::InvalidArgument("expected a real tensor".into())),
        }
    }

    pub fn complex(&self) -> Result<&ComplexTensor> {
        match self {
            Value::Complex(c) => Ok(c),
            _ => Err(Error::InvalidArgument("expected a complex tensor".into())),
        }
    }

    pub fn scalar(&self) -> Result<f64> {
        match self {
            Value::Scalar(s) => Ok(*s),
            _ => Err(Error::InvalidArgument("expected a scalar".into())),
        }
    }

    fn zeros_like(&self) -> Value {
        match self {
            Value::Real(r) => Value::Real(RealTensor::zeros(r.shape())),
            Value::Complex(c) => Value::Complex(ComplexTensor::zeros(c.shape())),
            Value::Scalar(_) => Value::Scalar(0.0),
        }
    }

    fn accumulate(&mut self, other: Value) -> Result<()> {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => a.add_assign(&b),
            (Value::Complex(a), Value::Complex(b)) => a.axpy(C64::new(1.0, 0.0), &b)?,
            (Value::Scalar(a), Value::Scalar(b)) => *a += b,
            _ => return Err(Error::InvalidArgument("gradient kind mismatch".into())),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Constant parts of the data-consistency solve.
#[derive(Clone, Debug)]
pub struct DcSpec {
    /// `S B`, `[M, H, W]`.
    pub rhs: ComplexTensor,
    /// Pointwise denominator `mask + lambda1 w_G + lambda2`, per grid point.
    pub den: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub weighting: Weighting,
}

impl DcSpec {
    pub fn new(b: &MultiChannelKSpace, lambda1: f64, lambda2: f64, weighting: Weighting) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
            return invalid("regularization weights must be non-negative");
        }
        if weighting == Weighting::Gradient && b.channels() != 1 {
            return invalid("gradient weighting needs single-channel data");
        }
        let (h, w) = b.mask.shape();
        let mut den = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                den[i] = b.mask.weight(i) + lambda1 * weighting.gram_weight(y, x, h, w) + lambda2;
                if den[i] <= 0.0 {
                    return invalid(format!(
                        "data-consistency denominator vanishes at ({y}, {x}); sample that location or use positive weights"
                    ));
                }
            }
        }
        let mut rhs = b.data.clone();
        crate::acquisition::apply_mask(&mut rhs, &b.mask);
        Ok(Self {
            rhs,
            den,
            lambda1,
            lambda2,
            weighting,
        })
    }

    fn divide(&self, x: &mut ComplexTensor) {
        let hw = self.den.len();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v /= self.den[i % hw];
        }
    }

    fn weight_adjoint(&self, theta: &ComplexTensor) -> Result<ComplexTensor> {
        match self.weighting {
            Weighting::Identity => Ok(theta.clone()),
            Weighting::Gradient => grad_weight_adjoint(theta),
        }
    }

    fn weight(&self, x: &ComplexTensor) -> Result<ComplexTensor> {
        match self.weighting {
            Weighting::Identity => Ok(x.clone()),
            Weighting::Gradient => grad_weight(x),
        }
    }

    /// `(S B + lambda1 G^H theta + lambda2 phi) / den`.
    pub fn solve(&self, theta: Option<&ComplexTensor>, phi: Option<&ComplexTensor>) -> Result<ComplexTensor> {
        let mut num = self.rhs.clone();
        if let Some(t) = theta {
            num.axpy(C64::new(self.lambda1, 0.0), &self.weight_adjoint(t)?)?;
        }
        if let Some(p) = phi {
            num.axpy(C64::new(self.lambda2, 0.0), p)?;
        }
        self.divide(&mut num);
        Ok(num)
    }
}

/// Analytic data-consistency solve
/// `(S + lambda1 G^H G + lambda2 I)^{-1} (S B + lambda1 G^H theta + lambda2 phi)`,
/// pointwise in k-space and independent per channel.
pub fn dc_solve(
    b: &MultiChannelKSpace,
    theta: Option<&ComplexTensor>,
    phi: Option<&ComplexTensor>,
    lambda1: f64,
    lambda2: f64,
    weighting: Weighting,
) -> Result<ComplexTensor> {
    DcSpec::new(b, lambda1, lambda2, weighting)?.solve(theta, phi)
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, shape: ConvShape },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Fft2(Var),
    Ifft2(Var),
    Shift { x: Var, forward: bool },
    GradWeight(Var),
    GradWeightAdjoint(Var),
    Pack(Var),
    Unpack(Var),
    DcSolve { theta: Option<Var>, phi: Option<Var>, spec: Arc<DcSpec> },
    Mse { x: Var, target: Arc<ComplexTensor> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Value,
    op: Op,
}

/// Records a forward computation for a single backward sweep.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the leaves, indexed by [`Var`]. Interior nodes are released
/// during the sweep and read back as `None`.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Value>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Value> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Value) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    fn real(&self, v: Var) -> Result<&RealTensor> {
        self.value(v).real()
    }

    fn complex(&self, v: Var) -> Result<&ComplexTensor> {
        self.value(v).complex()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, shape: ConvShape) -> Result<Var> {
        let y = conv2d(self.real(x)?, &shape, self.real(w)?.data(), self.real(b)?.data())?;
        Ok(self.push(Value::Real(y), Op::Conv2d { x, w, b, shape }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = relu(self.real(x)?);
        Ok(self.push(Value::Real(y), Op::Relu(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = match (self.value(a), self.value(b)) {
            (Value::Complex(x), Value::Complex(y)) => {
                x.check_same(y)?;
                Value::Complex(x + y)
            }
            (Value::Real(x), Value::Real(y)) if x.shape() == y.shape() => {
                let mut s = x.clone();
                s.add_assign(y);
                Value::Real(s)
            }
            _ => return shape_err("add operands differ"),
        };
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = match (self.value(a), self.value(b)) {
            (Value::Complex(x), Value::Complex(y)) => {
                x.check_same(y)?;
                Value::Complex(x - y)
            }
            (Value::Real(x), Value::Real(y)) if x.shape() == y.shape() => {
                let mut s = x.clone();
                s.add_assign(&y.scaled(-1.0));
                Value::Real(s)
            }
            _ => return shape_err("sub operands differ"),
        };
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = match self.value(x) {
            Value::Complex(c) => Value::Complex(c.scale(s)),
            Value::Real(r) => Value::Real(r.scaled(s)),
            Value::Scalar(v) => Value::Scalar(v * s),
        };
        Ok(self.push(v, Op::Scale(x, s)))
    }

    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        let y = self.complex(x)?.fft2_last()?;
        Ok(self.push(Value::Complex(y), Op::Fft2(x)))
    }

    pub fn ifft2(&mut self, x: Var) -> Result<Var> {
        let y = self.complex(x)?.ifft2_last()?;
        Ok(self.push(Value::Complex(y), Op::Ifft2(x)))
    }

    /// Storage order to centered (`forward`) or back.
    pub fn shift(&mut self, x: Var, forward: bool) -> Result<Var> {
        let c = self.complex(x)?;
        let y = if forward { c.fftshift2() } else { c.ifftshift2() };
        Ok(self.push(Value::Complex(y), Op::Shift { x, forward }))
    }

    pub fn grad_weight(&mut self, x: Var) -> Result<Var> {
        let y = grad_weight(self.complex(x)?)?;
        Ok(self.push(Value::Complex(y), Op::GradWeight(x)))
    }

    pub fn grad_weight_adjoint(&mut self, x: Var) -> Result<Var> {
        let y = grad_weight_adjoint(self.complex(x)?)?;
        Ok(self.push(Value::Complex(y), Op::GradWeightAdjoint(x)))
    }

    pub fn pack(&mut self, x: Var) -> Result<Var> {
        let y = pack(self.complex(x)?)?;
        Ok(self.push(Value::Real(y), Op::Pack(x)))
    }

    pub fn unpack(&mut self, x: Var) -> Result<Var> {
        let y = unpack(self.real(x)?)?;
        Ok(self.push(Value::Complex(y), Op::Unpack(x)))
    }

    pub fn dc_solve(&mut self, theta: Option<Var>, phi: Option<Var>, spec: Arc<DcSpec>) -> Result<Var> {
        let t = theta.map(|v| self.complex(v)).transpose()?;
        let p = phi.map(|v| self.complex(v)).transpose()?;
        let y = spec.solve(t, p)?;
        Ok(self.push(Value::Complex(y), Op::DcSolve { theta, phi, spec }))
    }

    /// Mean squared error over real and imaginary parts:
    /// `sum |x - t|^2 / (2 n)`.
    pub fn mse(&mut self, x: Var, target: Arc<ComplexTensor>) -> Result<Var> {
        let xv = self.complex(x)?;
        xv.check_same(&target)?;
        let l = (xv - &target).norm_sqr() / (2.0 * xv.len() as f64);
        Ok(self.push(Value::Scalar(l), Op::Mse { x, target }))
    }

    /// Back-propagates from `root`, seeded with ones (a scalar root gets 1).
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Value>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(match &self.nodes[root.0].value {
            Value::Scalar(_) => Value::Scalar(1.0),
            Value::Real(r) => Value::Real(RealTensor::new(r.shape().to_vec(), vec![1.0; r.len()])?),
            Value::Complex(c) => Value::Complex(ComplexTensor::from_fn(c.shape(), |_| C64::new(1.0, 0.0))),
        });
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut send = |v: Var, d: Value| -> Result<()> {
                match &mut grads[v.0] {
                    Some(acc) => acc.accumulate(d),
                    slot @ None => {
                        *slot = Some(d);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, shape } => {
                    let (dx, dw, db) =
                        conv2d_backward(self.real(*x)?, shape, self.real(*w)?.data(), g.real()?)?;
                    send(*x, Value::Real(dx))?;
                    send(*w, Value::Real(RealTensor::new(vec![dw.len()], dw)?))?;
                    send(*b, Value::Real(RealTensor::new(vec![db.len()], db)?))?;
                }
                Op::Relu(x) => send(*x, Value::Real(relu_backward(self.real(*x)?, g.real()?)))?,
                Op::Add(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g)?;
                }
                Op::Sub(a, b) => {
                    let neg = match &g {
                        Value::Complex(c) => Value::Complex(c.scale(-1.0)),
                        Value::Real(r) => Value::Real(r.scaled(-1.0)),
                        Value::Scalar(s) => Value::Scalar(-s),
                    };
                    send(*a, g)?;
                    send(*b, neg)?;
                }
                Op::Scale(x, s) => send(
                    *x,
                    match &g {
                        Value::Complex(c) => Value::Complex(c.scale(*s)),
                        Value::Real(r) => Value::Real(r.scaled(*s)),
                        Value::Scalar(v) => Value::Scalar(v * s),
                    },
                )?,
                Op::Fft2(x) => {
                    let c = g.complex()?;
                    let n = (c.grid()?.0 * c.grid()?.1) as f64;
                    send(*x, Value::Complex(c.ifft2_last()?.scale(n)))?;
                }
                Op::Ifft2(x) => {
                    let c = g.complex()?;
                    let n = (c.grid()?.0 * c.grid()?.1) as f64;
                    send(*x, Value::Complex(c.fft2_last()?.scale(1.0 / n)))?;
                }
                Op::Shift { x, forward } => {
                    let c = g.complex()?;
                    send(*x, Value::Complex(if *forward { c.ifftshift2() } else { c.fftshift2() }))?;
                }
                Op::GradWeight(x) => {
                    let d = grad_weight_adjoint(g.complex()?)?;
                    let shape = self.complex(*x)?.shape().to_vec();
                    send(*x, Value::Complex(d.reshape(&shape)?))?;
                }
                Op::GradWeightAdjoint(x) => send(*x, Value::Complex(grad_weight(g.complex()?)?))?,
                Op::Pack(x) => send(*x, Value::Complex(unpack(g.real()?)?))?,
                Op::Unpack(x) => send(*x, Value::Real(pack(g.complex()?)?))?,
                Op::DcSolve { theta, phi, spec } => {
                    let mut gd = g.complex()?.clone();
                    spec.divide(&mut gd);
                    if let Some(t) = theta {
                        send(*t, Value::Complex(spec.weight(&gd)?.scale(spec.lambda1)))?;
                    }
                    if let Some(p) = phi {
                        send(*p, Value::Complex(gd.scale(spec.lambda2)))?;
                    }
                }
                Op::Mse { x, target } => {
                    let s = g.scalar()?;
                    let xv = self.complex(*x)?;
                    let d = (xv - target).scale(s / xv.len() as f64);
                    send(*x, Value::Complex(d))?;
                }
            }
        }
        // leaves untouched by the sweep keep `None`; give reachable ones zeros
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) && grads[i].is_none() && i <= root.0 {
                grads[i] = Some(n.value.zeros_like());
            }
        }
        Ok(Gradients(grads))
    }
}

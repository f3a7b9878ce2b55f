use std::sync::Arc;

use slr_core::acquisition::{make_mask, MaskKind, MultiChannelKSpace, SamplingMask};
use slr_core::lifting::Weighting;
use slr_core::unrolled::gradcheck::{check_gradients, check_model_gradients};
use slr_core::unrolled::model::{xavier_init, CnnSpec, UnrolledModel};
use slr_core::unrolled::real::{ConvShape, RealTensor};
use slr_core::unrolled::tape::{DcSpec, Tape, Value, Var};
use slr_core::{ComplexTensor, Result, Rng};

const DIRS: usize = 20;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn real(rng: &mut Rng, shape: &[usize]) -> Value {
    let n = shape.iter().product();
    Value::Real(RealTensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap())
}

fn complex(rng: &mut Rng, shape: &[usize]) -> Value {
    Value::Complex(rng.complex_normal_tensor(shape, 1.0))
}

/// MSE of a complex node against a fixed random target.
fn complex_loss(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).complex()?.shape().to_vec();
    let t = Rng::new(seed).complex_normal_tensor(&shape, 1.0);
    tape.mse(x, Arc::new(t))
}

fn real_loss(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let c = tape.unpack(x)?;
    complex_loss(tape, c, seed)
}

fn assert_check(name: &str, inputs: Vec<Value>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let mut rng = Rng::new(name.len() as u64 * 7919);
    let rep = check_gradients(&inputs, build, DIRS, STEP, &mut rng).unwrap();
    assert!(rep.max_rel_error() < TOL, "{name}: max rel err {:.3e}", rep.max_rel_error());
}

fn measured(rng: &mut Rng, m: usize) -> MultiChannelKSpace {
    let mask = make_mask(rng, (12, 12), MaskKind::VariableDensity2d, 2.0, 4).unwrap();
    let mut data = rng.complex_normal_tensor(&[m, 12, 12], 1.0);
    slr_core::acquisition::apply_mask(&mut data, &mask);
    MultiChannelKSpace::new(data, mask).unwrap()
}

#[test]
fn conv2d_gradients() {
    let mut rng = Rng::new(1);
    let shape = ConvShape { cin: 2, cout: 4, k: 3 };
    let inputs = vec![
        real(&mut rng, &[2, 6, 5]),
        real(&mut rng, &[shape.weights()]),
        real(&mut rng, &[4]),
    ];
    assert_check("conv2d", inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], shape)?;
        real_loss(t, y, 3)
    });
}

#[test]
fn relu_gradients() {
    let mut rng = Rng::new(2);
    assert_check("relu", vec![real(&mut rng, &[2, 5, 5])], |t, v| {
        let y = t.relu(v[0])?;
        real_loss(t, y, 4)
    });
}

#[test]
fn linear_complex_ops() {
    type Op = fn(&mut Tape, Var) -> Result<Var>;
    let ops: [(&str, Op); 7] = [
        ("fft2", |t, x| t.fft2(x)),
        ("ifft2", |t, x| t.ifft2(x)),
        ("shift-forward", |t, x| t.shift(x, true)),
        ("shift-back", |t, x| t.shift(x, false)),
        ("scale", |t, x| t.scale(x, -2.5)),
        ("grad-weight", |t, x| t.grad_weight(x)),
        ("pack-unpack", |t, x| {
            let p = t.pack(x)?;
            let r = t.relu(p)?;
            t.unpack(r)
        }),
    ];
    for (name, op) in ops {
        let mut rng = Rng::new(5);
        assert_check(name, vec![complex(&mut rng, &[1, 6, 7])], move |t, v| {
            let y = op(t, v[0])?;
            complex_loss(t, y, 6)
        });
    }
    let mut rng = Rng::new(6);
    assert_check("grad-weight-adjoint", vec![complex(&mut rng, &[2, 6, 7])], |t, v| {
        let y = t.grad_weight_adjoint(v[0])?;
        complex_loss(t, y, 7)
    });
}

#[test]
fn add_sub_gradients() {
    let mut rng = Rng::new(7);
    let inputs = vec![complex(&mut rng, &[2, 4, 4]), complex(&mut rng, &[2, 4, 4])];
    assert_check("add-sub", inputs, |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let e = t.sub(d, v[1])?;
        complex_loss(t, e, 8)
    });
}

#[test]
fn dc_solve_gradients() {
    for (weighting, m, bands) in [(Weighting::Identity, 3, 3), (Weighting::Gradient, 1, 2)] {
        let mut rng = Rng::new(9);
        let b = measured(&mut rng, m);
        let spec = Arc::new(DcSpec::new(&b, 0.7, 0.3, weighting).unwrap());
        let inputs = vec![complex(&mut rng, &[bands, 12, 12]), complex(&mut rng, &[m, 12, 12])];
        assert_check("dc-solve", inputs, move |t, v| {
            let y = t.dc_solve(Some(v[0]), Some(v[1]), spec.clone())?;
            complex_loss(t, y, 10)
        });
    }
}

#[test]
fn mask_only_dc_needs_sampled_dc_for_gradient_weighting() {
    let mask = SamplingMask::from_bools((4, 4), vec![false; 16]).unwrap();
    let b = MultiChannelKSpace::new(ComplexTensor::zeros(&[1, 4, 4]), mask).unwrap();
    assert!(DcSpec::new(&b, 1.0, 0.0, Weighting::Gradient).is_err());
    assert!(DcSpec::new(&b, 1.0, 0.5, Weighting::Gradient).is_ok());
}

/// Finite differences over every CNN parameter of a K = 2 network.
fn full_graph(weighting: Weighting, m: usize, hybrid: bool) {
    let mut rng = Rng::new(11);
    let b = measured(&mut rng, m);
    let truth = rng.complex_normal_tensor(&[m, 12, 12], 1.0);
    let bands = if weighting == Weighting::Gradient { 2 } else { m };
    let nk = xavier_init(&mut rng, CnnSpec { layers: 3, filters: 4, kernel: 3, channels: 2 * bands });
    let ni = hybrid.then(|| xavier_init(&mut rng, CnnSpec { layers: 2, filters: 4, kernel: 3, channels: 2 * m }));
    let mut model = UnrolledModel {
        nk,
        ni,
        iterations: 2,
        lambda1: 0.8,
        lambda2: if hybrid { 0.5 } else { 0.0 },
        weighting,
        input_scale: 0.6,
    };
    // Zero biases put every activation over zero-filled k-space exactly on
    // the ReLU kink, where central differences are meaningless.
    let jittered: Vec<f64> = model.flatten().iter().map(|v| v + 0.1 * rng.normal()).collect();
    model.assign(&jittered).unwrap();
    let rep = check_model_gradients(&model, &b, &truth, DIRS, STEP, &mut rng).unwrap();
    assert!(rep.max_rel_error() < TOL, "max rel err {:.3e}", rep.max_rel_error());
}

#[test]
fn full_graph_kdslr_identity() {
    full_graph(Weighting::Identity, 2, false);
}

#[test]
fn full_graph_kdslr_gradient() {
    full_graph(Weighting::Gradient, 1, false);
}

#[test]
fn full_graph_hdslr() {
    full_graph(Weighting::Identity, 2, true);
}

use slr_core::acquisition::*;
use slr_core::{ComplexTensor, Rng};

#[test]
fn forward_adjoint_dot_test() {
    let mut rng = Rng::new(1);
    for (h, w) in [(16, 16), (32, 48), (64, 64)] {
        for _ in 0..50 {
            let m = 1 + rng.below(4);
            let mask = make_mask(&mut rng, (h, w), MaskKind::VariableDensity2d, 3.0, 0).unwrap();
            let x = rng.complex_normal_tensor(&[m, h, w], 1.0);
            let y = rng.complex_normal_tensor(&[m, h, w], 1.0);
            let mut yk = y.clone();
            apply_mask(&mut yk, &mask);
            let b = MultiChannelKSpace::new(yk, mask).unwrap();
            let lhs = apply_forward(&x, &b.mask).unwrap().data.dot(&b.data).unwrap();
            let rhs = x.dot(&apply_adjoint_exact(&b).unwrap()).unwrap();
            assert!((lhs - rhs).norm() < 1e-10 * lhs.norm());
        }
    }
}

#[test]
fn adjoint_of_full_sampling_inverts() {
    let mut rng = Rng::new(2);
    let x = rng.complex_normal_tensor(&[3, 12, 10], 1.0);
    let b = apply_forward(&x, &SamplingMask::full((12, 10))).unwrap();
    assert!((&apply_adjoint(&b).unwrap() - &x).norm() < 1e-12 * x.norm());
}

#[test]
fn variable_density_rate_over_seeds() {
    for seed in 0..100 {
        let mut rng = Rng::new(seed);
        let m = make_mask(&mut rng, (64, 64), MaskKind::VariableDensity2d, 4.0, 0).unwrap();
        assert!((0.20..=0.30).contains(&m.fraction()), "seed {seed}: {}", m.fraction());
    }
}

#[test]
fn calibration_block_is_found_on_reload() {
    let mut rng = Rng::new(3);
    let m = make_mask(&mut rng, (32, 32), MaskKind::VariableDensity2d, 3.0, 8).unwrap();
    let back = SamplingMask::from_tensor(&m.to_tensor()).unwrap().detect_calibration();
    let (ch, cw) = back.calibration.expect("calibration block");
    assert!(ch >= 8 && cw >= 8);
    for i in back.calibration_indices().unwrap() {
        assert!(back.as_slice()[i]);
    }
}

#[test]
fn noise_statistics() {
    let mut rng = Rng::new(4);
    let x = rng.complex_normal_tensor(&[4, 64, 64], 1.0);
    let b = apply_forward(&x, &SamplingMask::full((64, 64))).unwrap();
    let noisy = add_noise(&b, &mut rng, 0.05).unwrap();
    let d = &noisy.data - &b.data;
    let n = d.len() as f64;
    let re = (d.data().iter().map(|v| v.re * v.re).sum::<f64>() / n).sqrt();
    let im = (d.data().iter().map(|v| v.im * v.im).sum::<f64>() / n).sqrt();
    assert!((re / 0.05 - 1.0).abs() < 0.05 && (im / 0.05 - 1.0).abs() < 0.05);
}

#[test]
fn dataset_round_trip_and_reproducibility() {
    let cfg = DatasetConfig {
        counts: SplitCounts { train: 3, val: 1, test: 2 },
        shape: [16, 16],
        calib_extent: 4,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = synth_dataset(9, &cfg, a.path()).unwrap();
    let mb = synth_dataset(9, &cfg, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.examples.len(), 6);
    let ds = Dataset::open(&a.path().join(MANIFEST_FILE)).unwrap();
    assert!(ds.verify().unwrap().is_empty());
    for e in &ds.manifest.examples {
        let acq = ds.load(e).unwrap();
        assert_eq!(acq.truth.shape(), &[4, 16, 16]);
        let mut k = acq.truth.fft2_last().unwrap();
        apply_mask(&mut k, &acq.measured.mask);
        assert!((&k - &acq.measured.data).norm() < 1e-12 * k.norm());
        assert!(acq.measured.mask.calibration.is_some());
    }
    std::fs::write(a.path().join(&ma.examples[0].gt_path), b"CTEN").unwrap();
    assert_eq!(ds.verify().unwrap().len(), 1);
}

#[test]
fn shared_draws_are_shared() {
    let cfg = DatasetConfig {
        mask_per_example: false,
        ..Default::default()
    };
    let shared = SharedDraws::for_dataset(1, &cfg).unwrap();
    let a = simulate_with(&mut Rng::derived(1, 0), &cfg, &shared).unwrap();
    let b = simulate_with(&mut Rng::derived(1, 1), &cfg, &shared).unwrap();
    assert_eq!(a.measured.mask, b.measured.mask);
    assert!(a.truth != b.truth);
}

#[test]
fn phantom_extent_confines_the_object() {
    let mut rng = Rng::new(5);
    for _ in 0..20 {
        let ph = make_phantom_within(&mut rng, (32, 32), 5, 0.4).unwrap();
        for (i, &l) in ph.labels.iter().enumerate() {
            let (y, x) = (i / 32, i % 32);
            if !(8..24).contains(&y) || !(8..24).contains(&x) {
                assert_eq!(l, 0);
            }
        }
    }
    assert!(make_phantom_within(&mut rng, (32, 32), 5, 0.0).is_err());
}

#[test]
fn annihilator_vanishes_on_the_cuts() {
    let mut rng = Rng::new(6);
    let (_, cuts) = edge_phantom(&mut rng, (32, 32), 2, 2).unwrap();
    let taps = cuts.annihilator();
    let (fy, fx) = (taps.len(), taps[0].len());
    let mu = |y: f64, x: f64| -> f64 {
        let mut acc = slr_core::C64::new(0.0, 0.0);
        for (a, row) in taps.iter().enumerate() {
            for (b, t) in row.iter().enumerate() {
                let (ky, kx) = (a as f64 - (fy / 2) as f64, b as f64 - (fx / 2) as f64);
                acc += t * slr_core::C64::from_polar(1.0, 2.0 * std::f64::consts::PI * (ky * y + kx * x));
            }
        }
        acc.norm()
    };
    for &r in &cuts.rows {
        assert!(mu(r, 0.37) < 1e-12);
    }
    for &c in &cuts.cols {
        assert!(mu(0.61, c) < 1e-12);
    }
    assert!(mu(0.5 * (cuts.rows[0] + cuts.rows[1]), 0.5 * (cuts.cols[0] + cuts.cols[1])) > 1e-3);
    let _ = ComplexTensor::zeros(&[1]);
}

use csi_core::data::{Dims, PdpKind};
use csi_core::physcon::*;
use csi_core::rng;
use csi_core::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};

fn gaussian(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "test-noise", 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
}

#[test]
fn corr_matrix_is_symmetric_unit_diagonal_psd() {
    let freqs: Vec<f64> = (0..30).map(|k| k as f64 * 312.5e3).collect();
    for kind in [PdpKind::Gaussian, PdpKind::Exponential] {
        for tau in [10e-9, 50e-9, 400e-9] {
            let c: SquareMatrix = freq_corr_matrix(&freqs, tau, kind).unwrap();
            let m = DMatrix::from_fn(30, 30, |i, j| c.at(i, j));
            assert_eq!(m, m.transpose());
            assert!((0..30).all(|i| m[(i, i)] == 1.0));
            let min = m.symmetric_eigen().eigenvalues.min();
            assert!(min >= -1e-10, "{kind} tau {tau}: min eigenvalue {min}");
        }
    }
}

#[test]
fn spatial_shaping_reproduces_target_covariance() {
    let r = SquareMatrix::from_rows(&[
        vec![1.0, 0.5, 0.2],
        vec![0.5, 1.0, 0.3],
        vec![0.2, 0.3, 1.0],
    ])
    .unwrap();
    let dims = Dims::new(3, 8, 250);
    let trials = 100;
    let mut cov = [[0.0; 3]; 3];
    let kt = dims.subcarriers * dims.packets;
    for s in 0..trials {
        let d = spatial_correlate(&gaussian(&dims.shape(), s), dims, &r).unwrap();
        let v = d.data();
        for i in 0..kt {
            for a in 0..3 {
                for b in 0..3 {
                    cov[a][b] += v[a * kt + i] * v[b * kt + i];
                }
            }
        }
    }
    let n = (trials as usize * kt) as f64;
    for a in 0..3 {
        for b in 0..3 {
            let est = cov[a][b] / n;
            assert!((est - r.at(a, b)).abs() <= 0.05, "cov[{a}][{b}] = {est}, want {}", r.at(a, b));
        }
    }
}

fn band_energy(row: &[f64], lo: f64, hi: f64) -> f64 {
    let n = row.len();
    let mut buf: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    (0..n)
        .filter(|&k| {
            let f = k.min(n - k) as f64 / n as f64;
            f >= lo && f < hi
        })
        .map(|k| buf[k].norm_sqr())
        .sum()
}

#[test]
fn temporal_smoothing_is_low_pass() {
    let t = 512;
    let x = gaussian(&[1, 4, t], 7);
    let y = temporal_smooth(&x, 3.0);
    let (mut hi_in, mut hi_out, mut lo_in, mut lo_out) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..4 {
        let (a, b) = (&x.data()[k * t..(k + 1) * t], &y.data()[k * t..(k + 1) * t]);
        hi_in += band_energy(a, 0.25, 0.51);
        hi_out += band_energy(b, 0.25, 0.51);
        lo_in += band_energy(a, 0.0, 0.01);
        lo_out += band_energy(b, 0.0, 0.01);
    }
    assert!(hi_out < 1e-3 * hi_in, "high band kept {}", hi_out / hi_in);
    assert!(lo_out > 0.9 * lo_in, "low band kept {}", lo_out / lo_in);
}

#[test]
fn projection_norm_scan() {
    let dims = Dims::new(2, 6, 20);
    let op = PhysOperator::<f64>::new(
        &PhysConfig {
            rx_cov: RxCov::Matrix(vec![1.0, 0.4, 0.4, 1.0]),
            ..Default::default()
        },
        dims,
        None,
    )
    .unwrap();
    for s in 0..50 {
        let d = gaussian(&dims.shape(), 100 + s);
        for eps in [1e-6, 1e-3, 0.1, 1.0, 37.5] {
            let p = project_phys(&d, eps, &op).unwrap();
            assert!(!p.zero_flag);
            assert!((p.delta.norm_l2() - eps).abs() <= 1e-12 * eps);
        }
    }
    let zero = project_phys(&Tensor::zeros(&dims.shape()), 1.0, &op).unwrap();
    assert!(zero.zero_flag);
    assert_eq!(zero.delta.norm_l2(), 0.0);
}

#[test]
fn mmd_examples() {
    let a = [0.3, -1.2];
    let same: Vec<&[f64]> = vec![&a, &a];
    assert_eq!(mmd_rbf(&same, &same, MmdBandwidth::Fixed(1.0)).unwrap(), 0.0);
    let far = [1e3, 1e3];
    let far_set: Vec<&[f64]> = vec![&far, &far];
    let v = mmd_rbf(&same, &far_set, MmdBandwidth::Fixed(1.0)).unwrap();
    assert_eq!(v, 2.0);
}

#[test]
fn mmd_is_symmetric_and_concentrates() {
    let m = 32;
    let bound = 3.0 / (m as f64).sqrt();
    for trial in 0..100 {
        let x = gaussian(&[m, 5], 1000 + trial);
        let y = gaussian(&[m, 5], 5000 + trial);
        let xs: Vec<&[f64]> = (0..m).map(|i| x.row(i)).collect();
        let ys: Vec<&[f64]> = (0..m).map(|i| y.row(i)).collect();
        let xy = mmd_rbf(&xs, &ys, MmdBandwidth::Median).unwrap();
        let yx = mmd_rbf(&ys, &xs, MmdBandwidth::Median).unwrap();
        assert!((xy - yx).abs() < 1e-12);
        assert!(xy.abs() < bound, "trial {trial}: {xy}");
    }
}

proptest! {
    #[test]
    fn temporal_smoothing_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, seed in 0u64..1000, sigma in 0.0f64..6.0) {
        let x = gaussian(&[2, 3, 40], seed);
        let y = gaussian(&[2, 3, 40], seed + 1);
        let lhs = temporal_smooth(&x.scale(a).add(&y.scale(b)), sigma);
        let rhs = temporal_smooth(&x, sigma).scale(a).add(&temporal_smooth(&y, sigma).scale(b));
        let scale = 1.0 + lhs.max_abs();
        prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-12 * scale);
    }

    #[test]
    fn shaping_is_linear(a in -3.0f64..3.0, seed in 0u64..1000) {
        let dims = Dims::new(2, 5, 16);
        let op = PhysOperator::<f64>::new(&PhysConfig { rx_cov: RxCov::Identity, ..Default::default() }, dims, None).unwrap();
        let x = gaussian(&dims.shape(), seed);
        let mut lhs = x.scale(a).into_data();
        op.shape_sample(&mut lhs);
        let mut rhs = x.into_data();
        op.shape_sample(&mut rhs);
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - a * r).abs() <= 1e-12 * (1.0 + l.abs()));
        }
    }
}

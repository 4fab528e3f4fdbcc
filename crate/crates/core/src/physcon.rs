//! Physically constrained perturbation shaping.
//!
//! The projection multiplies a perturbation by the subcarrier correlation
//! matrix implied by the power delay profile, low-passes it along time with
//! a Gaussian kernel, imposes the receive-antenna covariance through its
//! Cholesky factor, and finally rescales it onto the `eps` sphere. The MMD
//! statistic is exposed separately so attacks can add it to their objective.
//!
//! Operators are generic over the scalar type; amplitudes are real, so
//! transposes stand in for conjugate transposes throughout.

use std::f64::consts::PI;

use csi_grad::{Real, Tensor};

use crate::data::{Dims, PdpKind};
use crate::error::{CsiError, Result};

/// Dense row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix<S: Real = f64> {
    pub n: usize,
    pub data: Vec<S>,
}

impl<S: Real> SquareMatrix<S> {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        Self { n, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(CsiError::invalid("matrix", "rows must form a square matrix"));
        }
        Ok(Self {
            n,
            data: rows.concat(),
        })
    }

    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.n + j]
    }

    pub fn cast<T: Real>(&self) -> SquareMatrix<T> {
        SquareMatrix {
            n: self.n,
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_symmetric(&self, tol: S) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| (self.at(i, j) - self.at(j, i)).abs() <= tol))
    }

    /// `self * self^T`
    pub fn mul_transpose(&self) -> Self {
        let n = self.n;
        let mut out = vec![S::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..n).map(|k| self.at(i, k) * self.at(j, k)).sum();
            }
        }
        Self { n, data: out }
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations,
    /// ascending.
    pub fn symmetric_eigenvalues(&self) -> Vec<S> {
        let n = self.n;
        let mut a = self.data.clone();
        let tiny = S::epsilon() * S::epsilon();
        for _sweep in 0..100 {
            let off: S = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i * n + j] * a[i * n + j])
                .sum();
            if off <= tiny {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() <= tiny {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    let theta = (aqq - app) / (S::lit(2.0) * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                    let c = S::one() / (t * t + S::one()).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<S> = (0..n).map(|i| a[i * n + i]).collect();
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
        ev
    }
}

/// Lower-triangular `L` with `L L^T = m`.
pub fn cholesky<S: Real>(m: &SquareMatrix<S>) -> Result<SquareMatrix<S>> {
    let n = m.n;
    let mut l = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.at(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > S::zero()) {
                    let min = m.symmetric_eigenvalues().first().copied().unwrap_or(S::zero());
                    return Err(CsiError::NotPositiveDefinite {
                        min_eigenvalue: min.as_f64(),
                    });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(SquareMatrix { n, data: l })
}

/// Subcarrier correlation implied by the power delay profile, with unit
/// diagonal. `freqs` must be strictly increasing.
pub fn freq_corr_matrix<S: Real>(
    freqs: &[f64],
    tau_rms: f64,
    kind: PdpKind,
) -> Result<SquareMatrix<S>> {
    if freqs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(CsiError::invalid("freqs", "must be strictly increasing"));
    }
    if !(tau_rms >= 0.0) {
        return Err(CsiError::invalid("tau_rms", "must be non-negative"));
    }
    let k = freqs.len();
    let mut data = vec![0.0f64; k * k];
    for i in 0..k {
        for j in 0..k {
            let x = 2.0 * PI * tau_rms * (freqs[i] - freqs[j]).abs();
            data[i * k + j] = match kind {
                PdpKind::Gaussian => (-(x * x)).exp(),
                PdpKind::Exponential => 1.0 / (1.0 + x * x).sqrt(),
            };
        }
    }
    // unit diagonal: C_ij / sqrt(C_ii C_jj)
    let diag: Vec<f64> = (0..k).map(|i| data[i * k + i]).collect();
    for i in 0..k {
        for j in 0..k {
            data[i * k + j] /= (diag[i] * diag[j]).sqrt();
        }
    }
    Ok(SquareMatrix {
        n: k,
        data: data.into_iter().map(S::lit).collect(),
    })
}

/// Normalized Gaussian taps over `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel<S: Real>(sigma_t: f64) -> Vec<S> {
    if sigma_t <= 0.0 {
        return vec![S::one()];
    }
    let radius = (3.0 * sigma_t).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma_t * sigma_t)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    taps.into_iter().map(|v| S::lit(v / z)).collect()
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn smooth_rows<S: Real>(data: &mut [S], t: usize, kernel: &[S]) {
    if kernel.len() == 1 {
        return;
    }
    let radius = (kernel.len() / 2) as i64;
    let mut buf = vec![S::zero(); t];
    for row in data.chunks_mut(t) {
        for (i, out) in buf.iter_mut().enumerate() {
            *out = kernel
                .iter()
                .enumerate()
                .map(|(j, &w)| w * row[reflect(i as i64 + j as i64 - radius, t)])
                .sum();
        }
        row.copy_from_slice(&buf);
    }
}

/// Gaussian low-pass along the last (time) axis with reflective borders.
/// `sigma_t == 0` is the identity.
pub fn temporal_smooth<S: Real>(delta: &Tensor<S>, sigma_t: f64) -> Tensor<S> {
    let t = *delta.shape().last().expect("non-scalar tensor");
    let mut out = delta.clone();
    smooth_rows(out.data_mut(), t, &gaussian_kernel::<S>(sigma_t));
    out
}

/// `delta[a, k, t] <- sum_j C[k, j] delta[a, j, t]` per sample.
fn apply_freq<S: Real>(sample: &mut [S], dims: Dims, c: &SquareMatrix<S>) {
    let (k, t) = (dims.subcarriers, dims.packets);
    let mut col = vec![S::zero(); k];
    for a in 0..dims.antennas {
        let block = &mut sample[a * k * t..(a + 1) * k * t];
        for ti in 0..t {
            for (ki, v) in col.iter_mut().enumerate() {
                *v = block[ki * t + ti];
            }
            for ki in 0..k {
                block[ki * t + ti] = (0..k).map(|j| c.at(ki, j) * col[j]).sum();
            }
        }
    }
}

/// Per (subcarrier, time) antenna vector `d <- d L^T`.
fn apply_spatial<S: Real>(sample: &mut [S], dims: Dims, l: &SquareMatrix<S>) {
    let (a_n, kt) = (dims.antennas, dims.subcarriers * dims.packets);
    let mut v = vec![S::zero(); a_n];
    for idx in 0..kt {
        for (a, x) in v.iter_mut().enumerate() {
            *x = sample[a * kt + idx];
        }
        for a in 0..a_n {
            sample[a * kt + idx] = (0..=a).map(|b| l.at(a, b) * v[b]).sum();
        }
    }
}

fn per_sample<S: Real>(delta: &Tensor<S>, dims: Dims, f: impl Fn(&mut [S])) -> Result<Tensor<S>> {
    if delta.len() % dims.len() != 0 || delta.row_len() % dims.len() != 0 && delta.shape() != dims.shape() {
        return Err(CsiError::invalid(
            "delta",
            format!("shape {:?} incompatible with {dims:?}", delta.shape()),
        ));
    }
    let mut out = delta.clone();
    for s in out.data_mut().chunks_mut(dims.len()) {
        f(s);
    }
    Ok(out)
}

/// Applies the subcarrier correlation to a sample `(A, K, T)` or batch
/// `(B, A, K, T)`.
pub fn freq_correlate<S: Real>(delta: &Tensor<S>, dims: Dims, c: &SquareMatrix<S>) -> Result<Tensor<S>> {
    per_sample(delta, dims, |s| apply_freq(s, dims, c))
}

/// Right-multiplies every antenna vector by `L^T` where `L L^T = rx_cov`.
pub fn spatial_correlate<S: Real>(delta: &Tensor<S>, dims: Dims, rx_cov: &SquareMatrix<S>) -> Result<Tensor<S>> {
    let l = cholesky(rx_cov)?;
    per_sample(delta, dims, |s| apply_spatial(s, dims, &l))
}

/// Uncentered antenna covariance `E[h h^T]` over every (sample, subcarrier,
/// packet), plus ridge `lambda * trace / A * I`.
pub fn estimate_rx_cov(batch: &Tensor<f64>, dims: Dims, ridge: f64) -> SquareMatrix<f64> {
    let a_n = dims.antennas;
    let kt = dims.subcarriers * dims.packets;
    let mut r = vec![0.0; a_n * a_n];
    let mut count = 0usize;
    for s in batch.data().chunks(dims.len()) {
        for idx in 0..kt {
            for i in 0..a_n {
                for j in 0..a_n {
                    r[i * a_n + j] += s[i * kt + idx] * s[j * kt + idx];
                }
            }
            count += 1;
        }
    }
    let count = count.max(1) as f64;
    r.iter_mut().for_each(|v| *v /= count);
    let trace: f64 = (0..a_n).map(|i| r[i * a_n + i]).sum();
    let add = ridge * trace / a_n as f64;
    for i in 0..a_n {
        r[i * a_n + i] += if add > 0.0 { add } else { ridge };
    }
    SquareMatrix { n: a_n, data: r }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RxCov {
    Identity,
    /// Row-major `A x A` matrix.
    Matrix(Vec<f64>),
    /// Sample covariance of clean training amplitudes plus ridge.
    EstimateFromClean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MmdBandwidth {
    Median,
    Fixed(f64),
}

/// Channel-realism parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysConfig {
    pub pdp_kind: PdpKind,
    pub tau_rms: f64,
    pub subcarrier_spacing: f64,
    pub sigma_t: f64,
    pub rx_cov: RxCov,
    pub ridge: f64,
    pub mmd_weight: f64,
    pub mmd_bandwidth: MmdBandwidth,
}

impl Default for PhysConfig {
    fn default() -> Self {
        Self {
            pdp_kind: PdpKind::Gaussian,
            tau_rms: 50e-9,
            subcarrier_spacing: 312.5e3,
            sigma_t: 3.0,
            rx_cov: RxCov::EstimateFromClean,
            ridge: 1e-3,
            mmd_weight: 0.25,
            mmd_bandwidth: MmdBandwidth::Median,
        }
    }
}

impl PhysConfig {
    pub fn freqs(&self, k: usize) -> Vec<f64> {
        (0..k).map(|i| i as f64 * self.subcarrier_spacing).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_rms > 0.0) {
            return Err(CsiError::invalid("tau_rms", "must be > 0"));
        }
        if !(self.subcarrier_spacing > 0.0) {
            return Err(CsiError::invalid("subcarrier_spacing", "must be > 0"));
        }
        if !(self.sigma_t >= 0.0) {
            return Err(CsiError::invalid("sigma_t", "must be >= 0"));
        }
        if !(self.ridge >= 0.0) || !(self.mmd_weight >= 0.0) {
            return Err(CsiError::invalid("ridge/mmd_weight", "must be >= 0"));
        }
        if let MmdBandwidth::Fixed(s) = self.mmd_bandwidth {
            if !(s > 0.0) {
                return Err(CsiError::invalid("mmd_bandwidth", "must be > 0"));
            }
        }
        Ok(())
    }
}

/// Precomputed `C`, `L` and temporal kernel for one input shape.
#[derive(Clone, Debug)]
pub struct PhysOperator<S: Real = f64> {
    pub dims: Dims,
    pub freq_corr: SquareMatrix<S>,
    pub chol: SquareMatrix<S>,
    pub kernel: Vec<S>,
    pub mmd_weight: f64,
    pub mmd_bandwidth: MmdBandwidth,
}

impl<S: Real> PhysOperator<S> {
    /// `clean` supplies training amplitudes when the covariance is estimated.
    pub fn new(cfg: &PhysConfig, dims: Dims, clean: Option<&Tensor<f64>>) -> Result<Self> {
        cfg.validate()?;
        let freq_corr = freq_corr_matrix(&cfg.freqs(dims.subcarriers), cfg.tau_rms, cfg.pdp_kind)?;
        let cov = match &cfg.rx_cov {
            RxCov::Identity => SquareMatrix::identity(dims.antennas),
            RxCov::Matrix(m) => {
                if m.len() != dims.antennas * dims.antennas {
                    return Err(CsiError::invalid(
                        "rx_cov",
                        format!("expected {}x{} entries", dims.antennas, dims.antennas),
                    ));
                }
                let m = SquareMatrix {
                    n: dims.antennas,
                    data: m.clone(),
                };
                if !m.is_symmetric(1e-12) {
                    return Err(CsiError::invalid("rx_cov", "must be symmetric"));
                }
                m
            }
            RxCov::EstimateFromClean => {
                let clean = clean.ok_or_else(|| {
                    CsiError::invalid("rx_cov", "estimation requested without clean data")
                })?;
                estimate_rx_cov(clean, dims, cfg.ridge)
            }
        };
        let chol = cholesky(&cov.cast::<S>())?;
        Ok(Self {
            dims,
            freq_corr,
            chol,
            kernel: gaussian_kernel(cfg.sigma_t),
            mmd_weight: cfg.mmd_weight,
            mmd_bandwidth: cfg.mmd_bandwidth,
        })
    }

    /// Frequency, temporal, then spatial shaping of one sample in place.
    pub fn shape_sample(&self, sample: &mut [S]) {
        apply_freq(sample, self.dims, &self.freq_corr);
        smooth_rows(sample, self.dims.packets, &self.kernel);
        apply_spatial(sample, self.dims, &self.chol);
    }

    /// Shapes one sample and rescales it to norm exactly `eps`. Returns
    /// `false` (and a zero perturbation) when shaping annihilates it.
    pub fn project_sample(&self, sample: &mut [S], eps: S) -> bool {
        self.shape_sample(sample);
        let n = csi_grad::norm_l2(sample);
        if !(n > S::zero()) {
            sample.iter_mut().for_each(|v| *v = S::zero());
            return false;
        }
        let k = eps / n;
        sample.iter_mut().for_each(|v| *v *= k);
        true
    }
}

/// Projection result with the zero-perturbation flag.
#[derive(Clone, Debug)]
pub struct Projected<S: Real = f64> {
    pub delta: Tensor<S>,
    pub zero_flag: bool,
}

/// Shapes `delta` `(A, K, T)` and rescales it to norm `eps`.
pub fn project_phys<S: Real>(delta: &Tensor<S>, eps: S, op: &PhysOperator<S>) -> Result<Projected<S>> {
    if delta.shape() != op.dims.shape() {
        return Err(CsiError::invalid(
            "delta",
            format!("shape {:?} does not match {:?}", delta.shape(), op.dims),
        ));
    }
    let mut out = delta.clone();
    let ok = op.project_sample(out.data_mut(), eps);
    Ok(Projected {
        delta: out,
        zero_flag: !ok,
    })
}

fn sq_dist<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Kernel width for a batch pair: median pairwise distance over the pooled
/// points, or the fixed value. Falls back to 1 when the median vanishes.
pub fn mmd_sigma<S: Real>(x: &[&[S]], y: &[&[S]], bw: MmdBandwidth) -> S {
    match bw {
        MmdBandwidth::Fixed(s) => S::lit(s),
        MmdBandwidth::Median => {
            let pooled: Vec<&[S]> = x.iter().chain(y).copied().collect();
            let mut d: Vec<S> = Vec::new();
            for i in 0..pooled.len() {
                for j in i + 1..pooled.len() {
                    d.push(sq_dist(pooled[i], pooled[j]).sqrt());
                }
            }
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = if d.is_empty() {
                S::zero()
            } else if d.len() % 2 == 1 {
                d[d.len() / 2]
            } else {
                (d[d.len() / 2 - 1] + d[d.len() / 2]) / S::lit(2.0)
            };
            if med > S::zero() {
                med
            } else {
                S::one()
            }
        }
    }
}

/// Mini-batch MMD² with unbiased within-set and biased cross terms, and its
/// gradient with respect to every point of `y` (sigma held fixed).
pub fn mmd_rbf_with_grad<S: Real>(x: &[&[S]], y: &[&[S]], sigma: S) -> Result<(S, Vec<Vec<S>>)> {
    let m = x.len();
    if m < 2 || y.len() != m {
        return Err(CsiError::invalid("mmd", format!("need |X| = |Y| >= 2, got {m} and {}", y.len())));
    }
    let gamma = S::one() / (S::lit(2.0) * sigma * sigma);
    let k = |a: &[S], b: &[S]| (-gamma * sq_dist(a, b)).exp();
    let mf = S::from_usize(m).unwrap();
    let within = S::one() / (mf * (mf - S::one()));
    let cross = S::lit(2.0) / (mf * mf);
    let two = S::lit(2.0);
    let mut kxx = S::zero();
    let mut kyy = S::zero();
    let mut kxy = S::zero();
    let dim = y[0].len();
    let mut grad = vec![vec![S::zero(); dim]; m];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += k(x[i], x[j]);
                let v = k(y[i], y[j]);
                kyy += v;
                // d/dy_i of k(y_i, y_j) appears twice (as (i,j) and (j,i))
                let coef = within * two * (-two * gamma * v);
                for (g, (&a, &b)) in grad[i].iter_mut().zip(y[i].iter().zip(y[j])) {
                    *g += coef * (a - b);
                }
            }
            let v = k(x[i], y[j]);
            kxy += v;
            let coef = -cross * (-two * gamma * v);
            for (g, (&b, &a)) in grad[j].iter_mut().zip(y[j].iter().zip(x[i])) {
                *g += coef * (b - a);
            }
        }
    }
    Ok((within * (kxx + kyy) - cross * kxy, grad))
}

/// Mini-batch MMD² between two equally sized point sets.
pub fn mmd_rbf<S: Real>(x: &[&[S]], y: &[&[S]], bw: MmdBandwidth) -> Result<S> {
    let sigma = mmd_sigma(x, y, bw);
    mmd_rbf_with_grad(x, y, sigma).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn correlation_hand_values() {
        let c: SquareMatrix = freq_corr_matrix(&[0.0, 1.0], 1.0 / (2.0 * PI), PdpKind::Gaussian).unwrap();
        assert_eq!(c.at(0, 0), 1.0);
        assert_relative_eq!(c.at(0, 1), (-1.0f64).exp(), epsilon = 1e-15);
        let e: SquareMatrix = freq_corr_matrix(&[0.0, 1.0], 1.0 / (2.0 * PI), PdpKind::Exponential).unwrap();
        assert_relative_eq!(e.at(1, 0), 0.5f64.sqrt(), epsilon = 1e-15);
        let ones: SquareMatrix = freq_corr_matrix(&[0.0, 1e6, 2e6], 0.0, PdpKind::Gaussian).unwrap();
        assert!(ones.data.iter().all(|&v| v == 1.0));
        assert!(freq_corr_matrix::<f64>(&[0.0, 0.0], 1e-9, PdpKind::Gaussian).is_err());
    }

    #[test]
    fn impulse_center_weight() {
        let mut x = vec![0.0; 21];
        x[10] = 1.0;
        let t = Tensor::new(vec![21], x).unwrap();
        let y = temporal_smooth(&t, 1.0);
        let expected =
            1.0 / (1.0 + 2.0 * (-0.5f64).exp() + 2.0 * (-2.0f64).exp() + 2.0 * (-4.5f64).exp());
        assert_relative_eq!(y.data()[10], expected, epsilon = 1e-15);
    }

    #[test]
    fn smoothing_identity_and_dc() {
        let t = Tensor::new(vec![2, 5], vec![1.0, -2.0, 3.0, 0.5, 4.0, 7.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        assert_eq!(temporal_smooth(&t, 0.0), t);
        let y = temporal_smooth(&t, 2.0);
        for v in &y.data()[5..] {
            assert_relative_eq!(*v, 7.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-7, 3), 1);
        assert_eq!(reflect(4, 1), 0);
    }

    #[test]
    fn cholesky_contract_and_failure() {
        let r: SquareMatrix = SquareMatrix::from_rows(&[vec![4.0, 2.0, 0.4], vec![2.0, 3.0, 0.5], vec![0.4, 0.5, 2.0]]).unwrap();
        let l = cholesky(&r).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                assert_eq!(l.at(i, j), 0.0);
            }
        }
        let back = l.mul_transpose();
        for (a, b) in back.data.iter().zip(&r.data) {
            assert!((*a - *b as f64).abs() < 1e-10);
        }
        let bad: SquareMatrix = SquareMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        match cholesky(&bad) {
            Err(CsiError::NotPositiveDefinite { min_eigenvalue }) => {
                assert_relative_eq!(min_eigenvalue, -1.0, epsilon = 1e-12)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mmd_hand_values() {
        let a = [0.5, -1.0, 2.0];
        let x: Vec<&[f64]> = vec![&a, &a];
        let v = mmd_rbf(&x, &x, MmdBandwidth::Median).unwrap();
        assert_eq!(v, 0.0);
        let far = [1e3, 1e3, 1e3];
        let y: Vec<&[f64]> = vec![&far, &far];
        let v = mmd_rbf(&x, &y, MmdBandwidth::Fixed(1.0)).unwrap();
        assert_eq!(v, 2.0);
        assert!(mmd_rbf(&x[..1], &y[..1], MmdBandwidth::Median).is_err());
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        let pts: Vec<Vec<f64>> = (0..8).map(|i| (0..3).map(|j| ((i * 3 + j) as f64 * 0.7).sin()).collect()).collect();
        let x: Vec<&[f64]> = pts[..4].iter().map(|v| v.as_slice()).collect();
        let mut yv: Vec<Vec<f64>> = pts[4..].to_vec();
        let sigma = 0.9;
        let (_, g) = {
            let y: Vec<&[f64]> = yv.iter().map(|v| v.as_slice()).collect();
            mmd_rbf_with_grad(&x, &y, sigma).unwrap()
        };
        let h = 1e-6;
        for i in 0..4 {
            for d in 0..3 {
                yv[i][d] += h;
                let up = mmd_rbf_with_grad(&x, &yv.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), sigma).unwrap().0;
                yv[i][d] -= 2.0 * h;
                let dn = mmd_rbf_with_grad(&x, &yv.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), sigma).unwrap().0;
                yv[i][d] += h;
                let num = (up - dn) / (2.0 * h);
                assert!((num - g[i][d]).abs() < 1e-8 * (1.0 + num.abs()), "{num} vs {}", g[i][d]);
            }
        }
    }

    #[test]
    fn identity_constraints_reduce_to_rescale() {
        let cfg = PhysConfig {
            tau_rms: 1e-15,
            sigma_t: 0.0,
            rx_cov: RxCov::Identity,
            ..Default::default()
        };
        let dims = Dims::new(1, 1, 4);
        let op = PhysOperator::<f64>::new(&cfg, dims, None).unwrap();
        let d = Tensor::new(vec![1, 1, 4], vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        let p = project_phys(&d, 10.0, &op).unwrap();
        assert!(!p.zero_flag);
        assert_eq!(p.delta.data(), &[6.0, 0.0, 8.0, 0.0]);
        let z = project_phys(&Tensor::zeros(&[1, 1, 4]), 1.0, &op).unwrap();
        assert!(z.zero_flag);
    }
}

//! Synthetic CSI amplitudes from a multipath WSSUS channel.
//!
//! A dataset shares one static multipath environment whose path delays are
//! drawn from the configured power delay profile, so subcarrier correlation
//! follows the PDP. Every sample adds one moving reflector whose Doppler
//! frequency follows a class-specific linear chirp bounded by `doppler_max`.
//! Per-sample variation is a small phase and gain jitter plus additive
//! Gaussian amplitude noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};

use super::{CsiSample, Dataset, Dims};
use crate::error::{CsiError, Result};
use crate::rng;
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PdpKind {
    Gaussian,
    Exponential,
}

impl std::str::FromStr for PdpKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "exponential" => Ok(Self::Exponential),
            other => Err(format!("unknown PDP kind `{other}` (gaussian|exponential)")),
        }
    }
}

impl std::fmt::Display for PdpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::Exponential => "exponential",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelParams {
    pub pdp_kind: PdpKind,
    /// RMS delay spread, seconds.
    pub tau_rms: f64,
    /// Hz.
    pub subcarrier_spacing: f64,
    /// Largest Doppler shift of any path, Hz.
    pub doppler_max: f64,
    /// Packets per second.
    pub packet_rate: f64,
    /// Additive amplitude noise standard deviation.
    pub noise_std: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            pdp_kind: PdpKind::Gaussian,
            tau_rms: 50e-9,
            subcarrier_spacing: 312.5e3,
            doppler_max: 30.0,
            packet_rate: 100.0,
            noise_std: 0.05,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_rms > 0.0) {
            return Err(CsiError::invalid("tau_rms", "must be > 0"));
        }
        if !(self.subcarrier_spacing > 0.0) {
            return Err(CsiError::invalid("subcarrier_spacing", "must be > 0"));
        }
        if !(self.doppler_max >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(CsiError::invalid("doppler_max/noise_std", "must be >= 0"));
        }
        if !(self.packet_rate > 2.0 * self.doppler_max) {
            return Err(CsiError::invalid(
                "packet_rate",
                format!(
                    "{} Hz violates Nyquist for doppler_max {} Hz",
                    self.packet_rate, self.doppler_max
                ),
            ));
        }
        Ok(())
    }
}

const BACKGROUND_PATHS: usize = 6;
const BACKGROUND_DOPPLER_FRACTION: f64 = 0.05;
const MOVER_GAIN: f64 = 0.8;
const PHASE_JITTER: f64 = PI / 8.0;
const GAIN_JITTER: f64 = 0.1;

/// Doppler trajectory of class `c` as a fraction of `doppler_max` at
/// normalized time `u in [0, 1]`: start frequencies are spread evenly over
/// the band and chirp rates are distinct per class.
pub(crate) fn class_doppler_fraction(c: usize, n_classes: usize, u: f64) -> f64 {
    let pos = c as f64 / (n_classes - 1) as f64;
    let start = 0.2 + 0.6 * pos;
    let chirp = 0.15 * (1.0 - 2.0 * pos);
    start + chirp * u
}

struct Path {
    delay: f64,
    gain_re: f64,
    gain_im: f64,
    sin_aoa: f64,
    doppler: f64,
}

fn draw_delay(kind: PdpKind, tau_rms: f64, rng: &mut rng::Rng) -> f64 {
    match kind {
        PdpKind::Gaussian => {
            let n: f64 = StandardNormal.sample(rng);
            n.abs() * tau_rms
        }
        PdpKind::Exponential => Exp::new(1.0 / tau_rms).expect("positive rate").sample(rng),
    }
}

/// Generates `n_classes * n_per_class` samples, class-major.
pub fn synth_generate(
    params: &ChannelParams,
    n_classes: usize,
    n_per_class: usize,
    dims: Dims,
    seed: u64,
) -> Result<Dataset> {
    params.validate()?;
    dims.validate()?;
    if n_classes < 2 {
        return Err(CsiError::invalid("n_classes", "need at least 2 classes"));
    }
    let Dims {
        antennas,
        subcarriers,
        packets,
    } = dims;

    let mut env = rng::stream(seed, "synth-env", 0);
    let scale = (1.0 / BACKGROUND_PATHS as f64).sqrt();
    let background: Vec<Path> = (0..BACKGROUND_PATHS)
        .map(|_| {
            let re: f64 = StandardNormal.sample(&mut env);
            let im: f64 = StandardNormal.sample(&mut env);
            Path {
                delay: draw_delay(params.pdp_kind, params.tau_rms, &mut env),
                gain_re: re * scale * std::f64::consts::FRAC_1_SQRT_2,
                gain_im: im * scale * std::f64::consts::FRAC_1_SQRT_2,
                sin_aoa: env.gen_range(-1.0..1.0),
                doppler: params.doppler_max * BACKGROUND_DOPPLER_FRACTION * env.gen_range(-1.0..1.0),
            }
        })
        .collect();
    let mover_delay = params.tau_rms * env.gen_range(0.5..1.5);
    let mover_sin_aoa: f64 = env.gen_range(-1.0..1.0);
    let noise = Normal::new(0.0, params.noise_std.max(0.0)).expect("valid std");

    let freqs: Vec<f64> = (0..subcarriers)
        .map(|k| k as f64 * params.subcarrier_spacing)
        .collect();
    let dt = 1.0 / params.packet_rate;

    let mut samples = Vec::with_capacity(n_classes * n_per_class);
    for c in 0..n_classes {
        // accumulated Doppler phase of the class trajectory
        let mut phase = vec![0.0; packets];
        for t in 1..packets {
            let u = (t - 1) as f64 / (packets.max(2) - 1) as f64;
            let f = params.doppler_max * class_doppler_fraction(c, n_classes, u);
            phase[t] = phase[t - 1] + 2.0 * PI * f * dt;
        }
        for i in 0..n_per_class {
            let index = (c * n_per_class + i) as u64;
            let mut r = rng::stream(seed, "synth-sample", index);
            let phi0 = r.gen_range(-PHASE_JITTER..PHASE_JITTER);
            let gain = MOVER_GAIN * (1.0 + r.gen_range(-GAIN_JITTER..GAIN_JITTER));
            let bg_phase: Vec<f64> = (0..BACKGROUND_PATHS)
                .map(|_| r.gen_range(-PHASE_JITTER..PHASE_JITTER))
                .collect();
            let mut data = Vec::with_capacity(dims.len());
            for a in 0..antennas {
                for &fk in &freqs {
                    for t in 0..packets {
                        let time = t as f64 * dt;
                        let (mut re, mut im) = (0.0, 0.0);
                        for (p, bp) in background.iter().zip(&bg_phase) {
                            let th = -2.0 * PI * fk * p.delay
                                + PI * a as f64 * p.sin_aoa
                                + 2.0 * PI * p.doppler * time
                                + bp;
                            let (s, co) = th.sin_cos();
                            re += p.gain_re * co - p.gain_im * s;
                            im += p.gain_re * s + p.gain_im * co;
                        }
                        let th = -2.0 * PI * fk * mover_delay
                            + PI * a as f64 * mover_sin_aoa
                            + phase[t]
                            + phi0;
                        let (s, co) = th.sin_cos();
                        re += gain * co;
                        im += gain * s;
                        let amp = (re * re + im * im).sqrt() + noise.sample(&mut r);
                        // f32-representable so the binary format round-trips exactly
                        data.push(amp.max(0.0) as f32 as f64);
                    }
                }
            }
            samples.push(CsiSample {
                amplitudes: Tensor::new(vec![antennas, subcarriers, packets], data)?,
                label: c,
            });
        }
    }
    Dataset::new(dims, n_classes, samples)
}

/// Centered moving average of `width` packets along time, truncated at the
/// edges.
pub fn moving_average_time(data: &Dataset, width: usize) -> Dataset {
    let t = data.dims.packets;
    let half = width / 2;
    let samples = data
        .samples
        .iter()
        .map(|s| {
            let mut out = Vec::with_capacity(s.amplitudes.len());
            for row in s.amplitudes.data().chunks(t) {
                for i in 0..t {
                    let lo = i.saturating_sub(half);
                    let hi = (i + width - half).min(t);
                    let m = row[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
                    out.push(m as f32 as f64);
                }
            }
            CsiSample {
                amplitudes: Tensor::new(s.amplitudes.shape().to_vec(), out).expect("finite"),
                label: s.label,
            }
        })
        .collect();
    Dataset {
        dims: data.dims,
        n_classes: data.n_classes,
        samples,
    }
}

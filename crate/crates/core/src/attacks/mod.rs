//! Evasion attacks and budget accounting.
//!
//! Budgets are per-sample l2 bounds derived from an SNR in dB relative to
//! the sample's own energy. All attacks work on `(B, A, K, T)` batches and
//! return one [`Perturbation`] per row; per-sample randomness comes from
//! streams keyed by the caller-supplied sample ids, so results do not
//! depend on how a dataset is chunked.

mod deepfool;
mod pgd;
mod transfer;
mod uap;

pub use deepfool::{deepfool, DeepFoolConfig};
pub use pgd::pgd;
pub use transfer::{craft, transfer_eval, AttackMethod, TransferResult};
pub use uap::{fooling_rate, uap, UapConfig, UapResult};

use std::fmt;
use std::str::FromStr;

use crate::error::{CsiError, Result};
use crate::Tensor;

/// PSR reported for an all-zero perturbation (log of zero).
pub const ZERO_PSR_DB: f64 = -999.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Untargeted,
    /// Fixed target class, or `None` for the pairwise mapping
    /// `target = (label + 1) mod C`.
    Targeted(Option<usize>),
}

impl Mode {
    pub fn is_targeted(self) -> bool {
        matches!(self, Mode::Targeted(_))
    }

    /// Target class for a sample labelled `y`, if any.
    pub fn target_for(self, y: usize, n_classes: usize) -> Option<usize> {
        match self {
            Mode::Untargeted => None,
            Mode::Targeted(Some(t)) => Some(t),
            Mode::Targeted(None) => Some((y + 1) % n_classes),
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "untargeted" => Ok(Mode::Untargeted),
            "targeted" => Ok(Mode::Targeted(None)),
            other => match other.strip_prefix("targeted:") {
                Some(c) => c
                    .parse()
                    .map(|c| Mode::Targeted(Some(c)))
                    .map_err(|_| format!("bad target class in `{other}`")),
                None => Err(format!("unknown mode `{other}` (untargeted|targeted|targeted:<class>)")),
            },
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Untargeted => f.write_str("untargeted"),
            Mode::Targeted(None) => f.write_str("targeted"),
            Mode::Targeted(Some(c)) => write!(f, "targeted:{c}"),
        }
    }
}

/// Direction of a PGD step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    /// `alpha * g / ||g||`
    Normalized,
    /// `alpha * sign(g)`
    Sign,
}

impl FromStr for StepKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "sign" => Ok(Self::Sign),
            _ => Err(format!("unknown step `{s}` (normalized|sign)")),
        }
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Normalized => "normalized",
            Self::Sign => "sign",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackBudget {
    pub snr_db: f64,
    pub steps: usize,
    /// Step size as a multiple of `eps / 10`.
    pub alpha_fraction: f64,
    pub restarts: usize,
    pub mode: Mode,
    pub step_kind: StepKind,
}

impl AttackBudget {
    pub fn new(snr_db: f64) -> Self {
        Self {
            snr_db,
            steps: 100,
            alpha_fraction: 1.0,
            restarts: 5,
            mode: Mode::Untargeted,
            step_kind: StepKind::Normalized,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=80.0).contains(&self.snr_db) {
            return Err(CsiError::invalid(
                "snr_db",
                format!("{} outside [0, 80]", self.snr_db),
            ));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(CsiError::invalid("steps/restarts", "must be >= 1"));
        }
        if !(self.alpha_fraction > 0.0) {
            return Err(CsiError::invalid("alpha_fraction", "must be > 0"));
        }
        Ok(())
    }
}

/// One crafted perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    /// `(A, K, T)`
    pub delta: Tensor,
    pub eps: f64,
    pub achieved_psr_db: f64,
    pub success: bool,
    pub iterations_used: usize,
    /// Set when the physical projection annihilated the perturbation.
    pub zero_flag: bool,
}

/// `10^(-snr/20) * ||x||`.
pub fn snr_to_eps(snr_db: f64, x: &[f64]) -> Result<f64> {
    let n = csi_grad::norm_l2(x);
    if !(n > 0.0) {
        return Err(CsiError::invalid("x", "zero-norm sample has no relative budget"));
    }
    Ok(10f64.powf(-snr_db / 20.0) * n)
}

/// `10 log10(||delta||^2 / ||x||^2)`; [`ZERO_PSR_DB`] for a zero delta.
pub fn measure_psr(x: &[f64], delta: &[f64]) -> Result<f64> {
    let xn = csi_grad::norm_l2(x);
    if !(xn > 0.0) {
        return Err(CsiError::invalid("x", "zero-norm sample"));
    }
    let dn = csi_grad::norm_l2(delta);
    if dn == 0.0 {
        return Ok(ZERO_PSR_DB);
    }
    Ok(20.0 * (dn / xn).log10())
}

/// Scales `v` into the ball of radius `eps`.
pub(crate) fn clip_to_ball(v: &mut [f64], eps: f64) {
    let n = csi_grad::norm_l2(v);
    if n > eps && n > 0.0 {
        let k = eps / n;
        v.iter_mut().for_each(|x| *x *= k);
    }
}

/// Stacks per-sample deltas onto `x`.
pub fn apply(x: &Tensor, perts: &[Perturbation]) -> Tensor {
    let mut out = x.clone();
    for (i, p) in perts.iter().enumerate() {
        for (o, d) in out.row_mut(i).iter_mut().zip(p.delta.data()) {
            *o += d;
        }
    }
    out
}

pub(crate) fn make_perturbation(
    x: &[f64],
    delta: Vec<f64>,
    shape: &[usize],
    eps: f64,
    success: bool,
    iterations_used: usize,
    zero_flag: bool,
) -> Result<Perturbation> {
    let achieved_psr_db = measure_psr(x, &delta)?;
    Ok(Perturbation {
        delta: Tensor::new(shape.to_vec(), delta)?,
        eps,
        achieved_psr_db,
        success,
        iterations_used,
        zero_flag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_conversion() {
        assert!((snr_to_eps(20.0, &[1.0]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(snr_to_eps(0.0, &[3.0, 4.0]).unwrap(), 5.0);
        assert!((snr_to_eps(40.0, &[30.0, 40.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(snr_to_eps(10.0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn psr_values() {
        assert!((measure_psr(&[1.0, 0.0], &[0.1, 0.0]).unwrap() + 20.0).abs() < 1e-12);
        assert_eq!(measure_psr(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let p = measure_psr(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert!((p - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((p - 6.0206).abs() < 1e-4);
        assert_eq!(measure_psr(&[1.0], &[0.0]).unwrap(), ZERO_PSR_DB);
    }

    #[test]
    fn mode_parsing_and_mapping() {
        assert_eq!("targeted:3".parse::<Mode>().unwrap(), Mode::Targeted(Some(3)));
        assert_eq!(Mode::Targeted(None).target_for(3, 4), Some(0));
        assert_eq!(Mode::Untargeted.target_for(1, 4), None);
        for m in [Mode::Untargeted, Mode::Targeted(None), Mode::Targeted(Some(2))] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
    }

    #[test]
    fn budget_range() {
        assert!(AttackBudget::new(99.0).validate().is_err());
        assert!(AttackBudget::new(80.0).validate().is_ok());
    }
}

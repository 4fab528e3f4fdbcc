use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{clip_to_ball, deepfool, DeepFoolConfig};
use crate::error::{CsiError, Result};
use crate::models::Model;
use crate::physcon::PhysOperator;
use crate::rng;
use crate::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct UapConfig {
    pub snr_db: f64,
    pub passes: usize,
    pub fooling_target: f64,
    /// Average the per-sample updates of a batch and apply them once.
    pub aggregate: bool,
    /// Shape every update with the frequency, temporal and spatial operators.
    pub preserve_corr: bool,
    /// Mini-batches drawn to estimate the mean sample norm.
    pub norm_batches: usize,
    pub batch_size: usize,
    /// DeepFool iterations per incremental update.
    pub deepfool_iter: usize,
    pub overshoot: f64,
}

impl Default for UapConfig {
    fn default() -> Self {
        Self {
            snr_db: 10.0,
            passes: 5,
            fooling_target: 0.9,
            aggregate: false,
            preserve_corr: false,
            norm_batches: 50,
            batch_size: 32,
            deepfool_iter: 10,
            overshoot: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UapResult {
    /// `(A, K, T)`
    pub v: Tensor,
    pub xi: f64,
    pub fooling_rate: f64,
    pub passes_used: usize,
    /// `||v||` after every update.
    pub audit_norms: Vec<f64>,
}

/// Fraction of rows whose prediction changes when `v` is added.
pub fn fooling_rate(model: &Model, x: &Tensor, v: &Tensor) -> Result<f64> {
    if x.batch() == 0 {
        return Err(CsiError::invalid("uap", "empty dataset"));
    }
    let clean = model.predict(x)?;
    let adv = model.predict(&add_to_rows(x, v.data()))?;
    let flipped = clean.iter().zip(&adv).filter(|(a, b)| a != b).count();
    Ok(flipped as f64 / x.batch() as f64)
}

fn add_to_rows(x: &Tensor, v: &[f64]) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.batch() {
        out.row_mut(i).iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    out
}

/// Mean sample norm over `batches` mini-batches drawn with replacement.
fn mean_norm(x: &Tensor, batches: usize, batch_size: usize, r: &mut rng::Rng) -> f64 {
    let n = x.batch();
    let draws = batches.max(1) * batch_size.max(1);
    let total: f64 = (0..draws)
        .map(|_| csi_grad::norm_l2(x.row(r.gen_range(0..n))))
        .sum();
    total / draws as f64
}

/// Universal perturbation by incremental DeepFool updates.
///
/// The radius is `10^(-snr/20)` times the mean sample norm. Samples whose
/// prediction `v` does not yet change contribute a minimal update; updates
/// are optionally shaped and averaged per batch, and `v` is clipped back
/// into the ball after every update.
pub fn uap(
    model: &Model,
    x: &Tensor,
    phys: Option<&PhysOperator>,
    cfg: &UapConfig,
    seed: u64,
) -> Result<UapResult> {
    let n = x.batch();
    if n == 0 {
        return Err(CsiError::invalid("uap", "empty dataset"));
    }
    if cfg.preserve_corr && phys.is_none() {
        return Err(CsiError::invalid("uap", "correlation preservation needs physical constraints"));
    }
    if cfg.batch_size == 0 {
        return Err(CsiError::invalid("uap", "batch_size must be >= 1"));
    }
    let d = x.row_len();
    let xi = 10f64.powf(-cfg.snr_db / 20.0)
        * mean_norm(x, cfg.norm_batches, cfg.batch_size, &mut rng::stream(seed, "uap-norm", 0));
    let mut v = Tensor::zeros(&x.shape()[1..]);
    let clean = model.predict(x)?;
    let df = DeepFoolConfig {
        max_iter: cfg.deepfool_iter,
        overshoot: cfg.overshoot,
        snr_db: None,
    };
    let mut audit = Vec::new();
    let mut passes_used = 0;
    let mut order: Vec<usize> = (0..n).collect();

    let shape = |dv: &mut [f64]| {
        if cfg.preserve_corr {
            if let Some(op) = phys {
                op.shape_sample(dv);
            }
        }
    };
    let mut fool = fooling_rate(model, x, &v)?;
    while passes_used < cfg.passes && fool < cfg.fooling_target {
        order.shuffle(&mut rng::stream(seed, "uap-order", passes_used as u64));
        for batch in order.chunks(cfg.batch_size) {
            if cfg.aggregate {
                let xb = add_to_rows(&x.select_batch(batch), v.data());
                let pred = model.predict(&xb)?;
                let live: Vec<usize> = (0..batch.len())
                    .filter(|&j| pred[j] == clean[batch[j]])
                    .collect();
                if live.is_empty() {
                    continue;
                }
                let perts = deepfool(model, &xb.select_batch(&live), &df)?;
                let mut acc = vec![0.0; d];
                for p in &perts {
                    let mut dv = p.delta.data().to_vec();
                    shape(&mut dv);
                    acc.iter_mut().zip(&dv).for_each(|(a, b)| *a += b);
                }
                let k = 1.0 / perts.len() as f64;
                v.data_mut().iter_mut().zip(&acc).for_each(|(a, b)| *a += k * b);
                clip_to_ball(v.data_mut(), xi);
                audit.push(v.norm_l2());
            } else {
                for &i in batch {
                    let xi_row = add_to_rows(&x.select_batch(&[i]), v.data());
                    if model.predict(&xi_row)?[0] != clean[i] {
                        continue;
                    }
                    let p = deepfool(model, &xi_row, &df)?.remove(0);
                    let mut dv = p.delta.into_data();
                    shape(&mut dv);
                    v.data_mut().iter_mut().zip(&dv).for_each(|(a, b)| *a += b);
                    clip_to_ball(v.data_mut(), xi);
                    audit.push(v.norm_l2());
                }
            }
        }
        passes_used += 1;
        fool = fooling_rate(model, x, &v)?;
    }
    Ok(UapResult {
        v,
        xi,
        fooling_rate: fool,
        passes_used,
        audit_norms: audit,
    })
}

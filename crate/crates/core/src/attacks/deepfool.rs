use super::{clip_to_ball, make_perturbation, snr_to_eps, Perturbation};
use crate::error::Result;
use crate::models::Model;
use crate::Tensor;

/// Added to every logit gap so that exact ties still produce a step that
/// crosses the boundary.
const GAP_NUDGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct DeepFoolConfig {
    pub max_iter: usize,
    pub overshoot: f64,
    /// When set, the final perturbation is clipped to this budget.
    pub snr_db: Option<f64>,
}

impl Default for DeepFoolConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            overshoot: 0.02,
            snr_db: None,
        }
    }
}

/// Minimal linearized steps toward the nearest rival class.
///
/// Each iteration linearizes every rival boundary around the current point
/// `x + (1 + overshoot) r`, steps onto the closest one and accumulates `r`,
/// until the prediction changes. Success means the final prediction differs
/// from the clean one.
pub fn deepfool(model: &Model, x: &Tensor, cfg: &DeepFoolConfig) -> Result<Vec<Perturbation>> {
    let b = x.batch();
    let d = x.row_len();
    let c = model.n_classes();
    let scale = 1.0 + cfg.overshoot;
    let k0 = model.predict(x)?;
    let mut r_tot = vec![vec![0.0; d]; b];
    let mut iters = vec![0usize; b];
    let mut active: Vec<usize> = (0..b).collect();
    for _ in 0..cfg.max_iter {
        if active.is_empty() {
            break;
        }
        let mut xa = x.select_batch(&active);
        for (j, &i) in active.iter().enumerate() {
            xa.row_mut(j)
                .iter_mut()
                .zip(&r_tot[i])
                .for_each(|(v, r)| *v += scale * r);
        }
        let (logits, jac) = model.logit_jacobian(&xa)?;
        let mut still = Vec::with_capacity(active.len());
        for (j, &i) in active.iter().enumerate() {
            let l = logits.row(j);
            if csi_grad::argmax(l) != k0[i] {
                continue;
            }
            let g0 = jac[k0[i]].row(j);
            let mut best: Option<(f64, f64, Vec<f64>)> = None;
            for (k, jk) in jac.iter().enumerate().take(c) {
                if k == k0[i] {
                    continue;
                }
                let w: Vec<f64> = jk.row(j).iter().zip(g0).map(|(a, b)| a - b).collect();
                let wn2: f64 = w.iter().map(|v| v * v).sum();
                if !(wn2 > 0.0) {
                    continue;
                }
                let gap = (l[k] - l[k0[i]]).abs() + GAP_NUDGE;
                let dist = gap / wn2.sqrt();
                if best.as_ref().map_or(true, |(bd, _, _)| dist < *bd) {
                    best = Some((dist, gap / wn2, w));
                }
            }
            // every rival degenerate: give up on this sample
            let Some((_, k, w)) = best else { continue };
            r_tot[i].iter_mut().zip(&w).for_each(|(r, wv)| *r += k * wv);
            iters[i] += 1;
            still.push(i);
        }
        active = still;
    }

    let mut deltas: Vec<Vec<f64>> = r_tot
        .into_iter()
        .map(|r| r.into_iter().map(|v| v * scale).collect())
        .collect();
    let mut eps = vec![f64::INFINITY; b];
    if let Some(snr) = cfg.snr_db {
        for i in 0..b {
            eps[i] = snr_to_eps(snr, x.row(i))?;
            clip_to_ball(&mut deltas[i], eps[i]);
        }
    }
    let mut adv = x.clone();
    for (i, dl) in deltas.iter().enumerate() {
        adv.row_mut(i).iter_mut().zip(dl).for_each(|(a, v)| *a += v);
    }
    let pred = model.predict(&adv)?;
    deltas
        .into_iter()
        .enumerate()
        .map(|(i, dl)| {
            make_perturbation(x.row(i), dl, &x.shape()[1..], eps[i], pred[i] != k0[i], iters[i], false)
        })
        .collect()
}

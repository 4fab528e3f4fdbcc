use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{clip_to_ball, make_perturbation, snr_to_eps, AttackBudget, Perturbation, StepKind};
use crate::error::{CsiError, Result};
use crate::models::{one_hot, Model};
use crate::physcon::{mmd_rbf_with_grad, mmd_sigma, PhysOperator};
use crate::rng;
use crate::Tensor;

/// Uniform draw from the l2 ball of radius `eps` in `v.len()` dimensions.
fn ball_start(v: &mut [f64], eps: f64, r: &mut rng::Rng) {
    for x in v.iter_mut() {
        *x = r.sample(StandardNormal);
    }
    let n = csi_grad::norm_l2(v);
    let radius = eps * r.gen::<f64>().powf(1.0 / v.len() as f64);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x *= radius / n);
    }
}

/// Adds `-weight * d MMD^2(X, X + delta) / d(X + delta)` to `grad`.
fn add_mmd_term(x: &Tensor, adv: &Tensor, grad: &mut Tensor, op: &PhysOperator) -> Result<()> {
    let b = x.batch();
    if b < 2 || op.mmd_weight == 0.0 {
        return Ok(());
    }
    let xs: Vec<&[f64]> = (0..b).map(|i| x.row(i)).collect();
    let ys: Vec<&[f64]> = (0..b).map(|i| adv.row(i)).collect();
    let sigma = mmd_sigma(&xs, &ys, op.mmd_bandwidth);
    let (_, g) = mmd_rbf_with_grad(&xs, &ys, sigma)?;
    for (i, gi) in g.iter().enumerate() {
        for (o, v) in grad.row_mut(i).iter_mut().zip(gi) {
            *o -= op.mmd_weight * v;
        }
    }
    Ok(())
}

/// Projected gradient attack on a batch.
///
/// Untargeted runs ascend the cross-entropy of the true label, targeted runs
/// descend that of the target. Without `phys` every iterate is clipped into
/// the l2 ball; with it every iterate is shaped by the physical operator and
/// rescaled onto the sphere, and the MMD penalty is subtracted from the
/// ascent objective. The restart with the largest final attack loss wins.
pub fn pgd(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    ids: &[u64],
    budget: &AttackBudget,
    phys: Option<&PhysOperator>,
    seed: u64,
) -> Result<Vec<Perturbation>> {
    budget.validate()?;
    let b = x.batch();
    if y.len() != b || ids.len() != b {
        return Err(CsiError::invalid("pgd", "labels and ids must match the batch"));
    }
    if b == 0 {
        return Ok(Vec::new());
    }
    let c = model.n_classes();
    let sample_shape = &x.shape()[1..];
    let eps: Vec<f64> = (0..b)
        .map(|i| snr_to_eps(budget.snr_db, x.row(i)))
        .collect::<Result<_>>()?;
    let targets: Vec<Option<usize>> = y.iter().map(|&v| budget.mode.target_for(v, c)).collect();
    // samples already of the requested target class are left untouched
    let skip: Vec<bool> = targets.iter().zip(y).map(|(t, &v)| *t == Some(v)).collect();
    let goal: Vec<usize> = targets.iter().zip(y).map(|(t, &v)| t.unwrap_or(v)).collect();
    let goal_hot = one_hot(&goal, c);
    let sign = if budget.mode.is_targeted() { -1.0 } else { 1.0 };

    let d = x.row_len();
    let mut best_loss = vec![f64::NEG_INFINITY; b];
    let mut best_delta = vec![vec![0.0; d]; b];
    let mut best_zero = vec![false; b];
    for restart in 0..budget.restarts {
        let mut delta = Tensor::zeros(x.shape());
        let mut zero = vec![false; b];
        for i in 0..b {
            if skip[i] {
                continue;
            }
            let mut r = rng::stream(rng::derive_seed(seed, "pgd", ids[i]), "restart", restart as u64);
            let row = delta.row_mut(i);
            ball_start(row, eps[i], &mut r);
            if let Some(op) = phys {
                zero[i] = !op.project_sample(row, eps[i]);
            }
        }
        for _ in 0..budget.steps {
            let adv = x.add(&delta);
            let mut grad = model.ce_input_grad(&adv, &goal_hot)?.grad;
            if sign < 0.0 {
                grad = grad.scale(-1.0);
            }
            if let Some(op) = phys {
                add_mmd_term(x, &adv, &mut grad, op)?;
            }
            for i in 0..b {
                if skip[i] {
                    continue;
                }
                let alpha = budget.alpha_fraction * eps[i] / 10.0;
                let g = grad.row(i).to_vec();
                let row = delta.row_mut(i);
                match budget.step_kind {
                    StepKind::Normalized => {
                        let n = csi_grad::norm_l2(&g);
                        if n > 0.0 {
                            row.iter_mut().zip(&g).for_each(|(v, gv)| *v += alpha * gv / n);
                        }
                    }
                    StepKind::Sign => {
                        row.iter_mut()
                            .zip(&g)
                            .for_each(|(v, gv)| *v += alpha * if *gv > 0.0 { 1.0 } else if *gv < 0.0 { -1.0 } else { 0.0 });
                    }
                }
                match phys {
                    Some(op) => zero[i] = !op.project_sample(row, eps[i]),
                    None => clip_to_ball(row, eps[i]),
                }
            }
        }
        let final_loss = model.ce_input_grad(&x.add(&delta), &goal_hot)?.loss_rows;
        for i in 0..b {
            let crit = sign * final_loss[i];
            if crit > best_loss[i] {
                best_loss[i] = crit;
                best_delta[i] = delta.row(i).to_vec();
                best_zero[i] = zero[i];
            }
        }
    }

    let mut adv = x.clone();
    for i in 0..b {
        if skip[i] {
            best_delta[i].iter_mut().for_each(|v| *v = 0.0);
        }
        adv.row_mut(i).iter_mut().zip(&best_delta[i]).for_each(|(a, v)| *a += v);
    }
    let pred = model.predict(&adv)?;
    (0..b)
        .map(|i| {
            let success = !skip[i]
                && match targets[i] {
                    Some(t) => pred[i] == t,
                    None => pred[i] != y[i],
                };
            make_perturbation(
                x.row(i),
                std::mem::take(&mut best_delta[i]),
                sample_shape,
                eps[i],
                success,
                budget.steps,
                best_zero[i],
            )
        })
        .collect()
}

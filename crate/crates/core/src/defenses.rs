//! Adversarial training: PGD-AT and TRADES.
//!
//! Both continue from the model's current weights, with every slot
//! unfrozen, and stop early on robust validation accuracy measured with a
//! short PGD probe at the training budget.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use crate::attacks::{apply, pgd, snr_to_eps, AttackBudget};
use crate::data::{Dataset, DatasetSplit};
use crate::error::{CsiError, Result};
use crate::models::{
    loss_and_accuracy, loop_config, one_hot, train_epochs, History, Model, StepOut, TrainHyper,
    ValOut, INPUT_TARGET, INPUT_X, INPUT_X2,
};
use crate::rng;
use crate::Tensor;

use rand::Rng as _;
use rand_distr::StandardNormal;

/// KL values below this are treated as rounding noise rather than a bug.
const KL_FLOOR: f64 = -1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefenseKind {
    PgdAt,
    Trades,
}

impl FromStr for DefenseKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pgd-at" => Ok(Self::PgdAt),
            "trades" => Ok(Self::Trades),
            other => Err(format!("unknown defense `{other}` (pgd-at|trades)")),
        }
    }
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PgdAt => "pgd-at",
            Self::Trades => "trades",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    pub train_snr_db: f64,
    pub inner_steps: usize,
    pub inner_restarts: usize,
    pub beta: f64,
    /// PGD steps of the robust validation probe.
    pub val_steps: usize,
    pub hyper: TrainHyper,
}

impl DefenseSpec {
    pub fn new(kind: DefenseKind) -> Self {
        Self {
            kind,
            train_snr_db: 20.0,
            inner_steps: 20,
            inner_restarts: 5,
            beta: 2.0,
            val_steps: 10,
            hyper: TrainHyper::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 || self.inner_restarts == 0 || self.val_steps == 0 {
            return Err(CsiError::invalid("inner_steps", "steps and restarts must be >= 1"));
        }
        if self.kind == DefenseKind::Trades && !(self.beta > 0.0) {
            return Err(CsiError::invalid("beta", "must be > 0 for trades"));
        }
        self.inner_budget().validate()?;
        self.hyper.validate()
    }

    fn inner_budget(&self) -> AttackBudget {
        let mut b = AttackBudget::new(self.train_snr_db);
        b.steps = self.inner_steps;
        b.restarts = self.inner_restarts;
        b
    }

    /// `key=value` lines stored next to robust checkpoints.
    pub fn echo(&self) -> String {
        let mut s = format!(
            "kind={}\ntrain_snr_db={}\ninner_steps={}\ninner_restarts={}\n",
            self.kind, self.train_snr_db, self.inner_steps, self.inner_restarts
        );
        if self.kind == DefenseKind::Trades {
            s += &format!("beta={}\n", self.beta);
        }
        s += &format!(
            "val_steps={}\nlr={}\nmax_epochs={}\npatience={}\nmin_epochs={}\nbatch_size={}\n",
            self.val_steps,
            self.hyper.lr,
            self.hyper.max_epochs,
            self.hyper.patience,
            self.hyper.min_epochs,
            self.hyper.batch_size
        );
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DefenseReport {
    pub history: History,
    /// Largest `||delta|| / eps` over all inner perturbations.
    pub max_delta_ratio: f64,
    /// Smallest per-sample KL seen by the TRADES objective.
    pub min_kl: Option<f64>,
}

/// Accuracy under a short PGD probe at the training budget.
pub fn robust_accuracy_probe(model: &Model, data: &Dataset, spec: &DefenseSpec) -> Result<f64> {
    let mut b = AttackBudget::new(spec.train_snr_db);
    b.steps = spec.val_steps;
    b.restarts = 1;
    let x = data.as_batch();
    let y = data.labels();
    let ids: Vec<u64> = (0..y.len() as u64).collect();
    let perts = pgd(model, &x, &y, &ids, &b, None, rng::derive_seed(spec.hyper.seed, "robust-val", 0))?;
    let pred = model.predict(&apply(&x, &perts))?;
    Ok(pred.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / y.len().max(1) as f64)
}

fn robust_validation<'a>(
    val: &'a Dataset,
    spec: &'a DefenseSpec,
) -> impl FnMut(&Model) -> Result<ValOut> + 'a {
    move |m| {
        let (loss, acc) = loss_and_accuracy(m, val)?;
        let racc = robust_accuracy_probe(m, val, spec)?;
        Ok(ValOut {
            loss,
            acc,
            criterion: 1.0 - racc,
        })
    }
}

fn batch_ids(step: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|j| step * n as u64 + j).collect()
}

fn unfreeze(model: &mut Model) {
    model.params.trainable.iter_mut().for_each(|t| *t = true);
}

/// PGD adversarial training: cross-entropy on inner-max perturbed batches.
pub fn pgd_at(model: &mut Model, split: &DatasetSplit, spec: &DefenseSpec) -> Result<DefenseReport> {
    spec.validate()?;
    unfreeze(model);
    let cfg = loop_config(model, &spec.hyper, "pgd-at");
    let budget = spec.inner_budget();
    let seed = rng::derive_seed(spec.hyper.seed, "pgd-at-inner", 0);
    let max_ratio = Cell::new(0.0f64);
    let mut step = |m: &Model, x: &Tensor, y: &[usize], s: u64| {
        let perts = pgd(m, x, y, &batch_ids(s, y.len()), &budget, None, seed)?;
        for p in &perts {
            max_ratio.set(max_ratio.get().max(p.delta.norm_l2() / p.eps));
        }
        let adv = apply(x, &perts);
        let t = one_hot(y, m.n_classes());
        let (loss, grads, logits) =
            m.loss_and_param_grads(m.nodes.ce_mean, &[(INPUT_X, &adv), (INPUT_TARGET, &t)])?;
        Ok(StepOut {
            loss,
            grads,
            correct: correct(logits.as_ref(), y),
        })
    };
    let mut val = robust_validation(&split.val, spec);
    let history = train_epochs(model, &split.train, &cfg, &mut step, &mut val)?;
    Ok(DefenseReport {
        history,
        max_delta_ratio: max_ratio.get(),
        min_kl: None,
    })
}

fn correct(logits: Option<&Tensor>, y: &[usize]) -> usize {
    logits
        .map(|l| l.argmax_rows().iter().zip(y).filter(|(p, t)| p == t).count())
        .unwrap_or(0)
}

/// Inner maximization of `KL(f(x) || f(x + delta))` over the l2 ball.
///
/// Starts from a small Gaussian offset (the KL gradient vanishes at
/// `delta = 0`) and keeps the restart with the largest final KL. Returns
/// the perturbed batch and its per-row KL.
pub fn kl_inner_max(
    model: &Model,
    x: &Tensor,
    ids: &[u64],
    snr_db: f64,
    steps: usize,
    restarts: usize,
    seed: u64,
) -> Result<(Tensor, Vec<f64>)> {
    let b = x.batch();
    let eps: Vec<f64> = (0..b)
        .map(|i| snr_to_eps(snr_db, x.row(i)))
        .collect::<Result<_>>()?;
    let mut best = x.clone();
    let mut best_kl = vec![f64::NEG_INFINITY; b];
    for r in 0..restarts {
        let mut delta = Tensor::zeros(x.shape());
        for i in 0..b {
            let mut g = rng::stream(rng::derive_seed(seed, "kl-inner", ids[i]), "restart", r as u64);
            let row = delta.row_mut(i);
            row.iter_mut().for_each(|v| *v = 1e-3 * eps[i] * g.sample::<f64, _>(StandardNormal));
        }
        for _ in 0..steps {
            let grad = model.kl_input_grad(x, &x.add(&delta))?.grad;
            for i in 0..b {
                let g = grad.row(i);
                let n = csi_grad::norm_l2(g);
                let alpha = eps[i] / 10.0;
                let row = delta.row_mut(i);
                if n > 0.0 {
                    row.iter_mut().zip(g).for_each(|(v, gv)| *v += alpha * gv / n);
                }
                let dn = csi_grad::norm_l2(row);
                if dn > eps[i] {
                    row.iter_mut().for_each(|v| *v *= eps[i] / dn);
                }
            }
        }
        let adv = x.add(&delta);
        let kl = model.kl_input_grad(x, &adv)?.loss_rows;
        for i in 0..b {
            if kl[i] > best_kl[i] {
                best_kl[i] = kl[i];
                best.row_mut(i).copy_from_slice(adv.row(i));
            }
        }
    }
    Ok((best, best_kl))
}

/// TRADES: clean cross-entropy plus `beta` times the KL between clean and
/// inner-max perturbed predictions.
pub fn trades(model: &mut Model, split: &DatasetSplit, spec: &DefenseSpec) -> Result<DefenseReport> {
    spec.validate()?;
    let mut m = model.with_trades(spec.beta)?;
    unfreeze(&mut m);
    let node = m.nodes.trades.expect("built with a trades objective");
    let cfg = loop_config(&m, &spec.hyper, "trades");
    let seed = rng::derive_seed(spec.hyper.seed, "trades-inner", 0);
    let max_ratio = Cell::new(0.0f64);
    let min_kl = Cell::new(f64::INFINITY);
    let mut step = |m: &Model, x: &Tensor, y: &[usize], s: u64| {
        let ids = batch_ids(s, y.len());
        let (adv, kl) = kl_inner_max(m, x, &ids, spec.train_snr_db, spec.inner_steps, spec.inner_restarts, seed)?;
        for i in 0..y.len() {
            let d: Vec<f64> = adv.row(i).iter().zip(x.row(i)).map(|(a, b)| a - b).collect();
            max_ratio.set(max_ratio.get().max(csi_grad::norm_l2(&d) / snr_to_eps(spec.train_snr_db, x.row(i))?));
        }
        let lowest = kl.iter().copied().fold(f64::INFINITY, f64::min);
        if lowest < KL_FLOOR {
            return Err(CsiError::Diverged {
                epoch: 0,
                detail: format!("negative KL term {lowest}"),
            });
        }
        min_kl.set(min_kl.get().min(lowest));
        let t = one_hot(y, m.n_classes());
        let (loss, grads, logits) =
            m.loss_and_param_grads(node, &[(INPUT_X, x), (INPUT_X2, &adv), (INPUT_TARGET, &t)])?;
        Ok(StepOut {
            loss,
            grads,
            correct: correct(logits.as_ref(), y),
        })
    };
    let mut val = robust_validation(&split.val, spec);
    let history = train_epochs(&mut m, &split.train, &cfg, &mut step, &mut val)?;
    model.params = m.params;
    Ok(DefenseReport {
        history,
        max_delta_ratio: max_ratio.get(),
        min_kl: Some(min_kl.get()),
    })
}

/// Dispatches on `spec.kind`.
pub fn defend(model: &mut Model, split: &DatasetSplit, spec: &DefenseSpec) -> Result<DefenseReport> {
    match spec.kind {
        DefenseKind::PgdAt => pgd_at(model, split, spec),
        DefenseKind::Trades => trades(model, split, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_round_trip_and_validation() {
        for k in [DefenseKind::PgdAt, DefenseKind::Trades] {
            assert_eq!(k.to_string().parse::<DefenseKind>().unwrap(), k);
        }
        let mut s = DefenseSpec::new(DefenseKind::Trades);
        assert!(s.validate().is_ok());
        s.beta = 0.0;
        assert!(s.validate().is_err());
        s.kind = DefenseKind::PgdAt;
        assert!(s.validate().is_ok());
        s.inner_steps = 0;
        assert!(s.validate().is_err());
        assert!(DefenseSpec::new(DefenseKind::Trades).echo().contains("beta=2\n"));
    }
}

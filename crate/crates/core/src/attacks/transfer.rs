use super::{apply, deepfool, pgd, AttackBudget, DeepFoolConfig, Perturbation};
use crate::error::{CsiError, Result};
use crate::models::Model;
use crate::physcon::PhysOperator;
use crate::Tensor;

/// Per-sample attack recipe.
#[derive(Clone, Debug, PartialEq)]
pub enum AttackMethod {
    Pgd(AttackBudget),
    /// PGD under physical constraints; needs an operator.
    PgdCorr(AttackBudget),
    DeepFool(DeepFoolConfig),
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Pgd(_) => "pgd",
            Self::PgdCorr(_) => "pgd-corr",
            Self::DeepFool(_) => "deepfool",
        }
    }
}

/// Runs `method` against `model` on a batch.
pub fn craft(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    ids: &[u64],
    method: &AttackMethod,
    phys: Option<&PhysOperator>,
    seed: u64,
) -> Result<Vec<Perturbation>> {
    match method {
        AttackMethod::Pgd(b) => pgd(model, x, y, ids, b, None, seed),
        AttackMethod::PgdCorr(b) => {
            let op = phys.ok_or_else(|| CsiError::invalid("pgd-corr", "requires physical constraints"))?;
            pgd(model, x, y, ids, b, Some(op), seed)
        }
        AttackMethod::DeepFool(cfg) => deepfool(model, x, cfg),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferResult {
    /// Fraction of target-correct samples misclassified after transfer.
    pub asr: f64,
    pub n_eval: usize,
    /// `intra` when both models share a family group, otherwise `inter`.
    pub tag: &'static str,
}

/// Crafts on `surrogate`, evaluates on `target`.
///
/// Only samples the target classifies correctly count.
pub fn transfer_eval(
    surrogate: &Model,
    target: &Model,
    x: &Tensor,
    y: &[usize],
    ids: &[u64],
    method: &AttackMethod,
    phys: Option<&PhysOperator>,
    seed: u64,
) -> Result<TransferResult> {
    if surrogate.spec.dims != target.spec.dims || surrogate.n_classes() != target.n_classes() {
        return Err(CsiError::invalid(
            "transfer",
            format!("`{}` and `{}` disagree on input dims or classes", surrogate.spec.name, target.spec.name),
        ));
    }
    let clean = target.predict(x)?;
    let keep: Vec<usize> = (0..x.batch()).filter(|&i| clean[i] == y[i]).collect();
    let tag = if surrogate.spec.family.group() == target.spec.family.group() {
        "intra"
    } else {
        "inter"
    };
    if keep.is_empty() {
        return Ok(TransferResult { asr: 0.0, n_eval: 0, tag });
    }
    let xs = x.select_batch(&keep);
    let ys: Vec<usize> = keep.iter().map(|&i| y[i]).collect();
    let is: Vec<u64> = keep.iter().map(|&i| ids[i]).collect();
    let perts = craft(surrogate, &xs, &ys, &is, method, phys, seed)?;
    let adv = target.predict(&apply(&xs, &perts))?;
    let fooled = adv.iter().zip(&ys).filter(|(a, b)| a != b).count();
    Ok(TransferResult {
        asr: fooled as f64 / keep.len() as f64,
        n_eval: keep.len(),
        tag,
    })
}

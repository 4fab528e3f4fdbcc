use log::debug;
use rand::seq::SliceRandom;

use super::{one_hot, Model, INPUT_TARGET, INPUT_X};
use crate::data::{Dataset, DatasetSplit};
use crate::error::{CsiError, Result};
use crate::rng;
use crate::Tensor;

/// Optimization and schedule settings shared by every training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub contractive_lambda: f64,
    /// Fraction of pretraining over which the masked-region weight decays
    /// linearly from 1 to 0.
    pub mask_focus_fraction: f64,
    pub pretrain_epochs: usize,
    pub phase_a_epochs: usize,
    pub phase_b_epochs: usize,
    pub head_lr: f64,
    pub encoder_lr: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-4,
            max_epochs: 100,
            patience: 25,
            min_epochs: 40,
            batch_size: 32,
            seed: 0,
            contractive_lambda: 2e-4,
            mask_focus_fraction: 0.4,
            pretrain_epochs: 50,
            phase_a_epochs: 10,
            phase_b_epochs: 30,
            head_lr: 2e-3,
            encoder_lr: 2e-4,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("lr", self.lr),
            ("head_lr", self.head_lr),
            ("encoder_lr", self.encoder_lr),
        ];
        for (k, v) in pos {
            if !(v > 0.0) {
                return Err(CsiError::invalid(k, "must be > 0"));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.contractive_lambda >= 0.0) {
            return Err(CsiError::invalid("weight_decay/contractive_lambda", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.mask_focus_fraction) {
            return Err(CsiError::invalid("mask_focus_fraction", "must be in [0, 1]"));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(CsiError::invalid("max_epochs/batch_size/patience", "must be >= 1"));
        }
        if self.patience > self.max_epochs {
            return Err(CsiError::invalid("patience", "must not exceed max_epochs"));
        }
        Ok(())
    }
}

/// Adam with coupled L2 weight decay and per-slot step counters, so slots
/// that start training late get fresh bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<i32>,
}

impl Adam {
    pub fn new(params: &csi_grad::Params, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = params.tensors.iter().map(|t| t.len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; sizes.len()],
        }
    }

    /// Updates every slot that has a gradient, with learning rate `lr[slot]`.
    pub fn step(&mut self, params: &mut csi_grad::Params, grads: &[Option<Tensor>], lr: &[f64]) {
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !params.trainable[i] {
                continue;
            }
            self.t[i] += 1;
            let bc1 = 1.0 - self.beta1.powi(self.t[i]);
            let bc2 = 1.0 - self.beta2.powi(self.t[i]);
            let p = params.tensors[i].data_mut();
            for (j, (&gj, pj)) in g.data().iter().zip(p.iter_mut()).enumerate() {
                let gj = gj + self.weight_decay * *pj;
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                *pj -= lr[i] * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales gradients so their joint l2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Patience counter that only starts after `min_epochs`; lower is better.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_epochs: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_epochs: usize) -> Self {
        Self {
            patience,
            min_epochs,
            best: f64::INFINITY,
            best_epoch: 0,
            bad: 0,
        }
    }

    /// Records the criterion of 1-based `epoch`; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        let improved = value < self.best;
        if improved {
            self.best = value;
            self.best_epoch = epoch;
            self.bad = 0;
        } else if epoch > self.min_epochs {
            self.bad += 1;
        }
        (improved, self.bad >= self.patience)
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement.
#[derive(Clone, Debug)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad: usize,
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Returns the multiplier to apply this epoch (1 or `factor`).
    pub fn update(&mut self, value: f64) -> f64 {
        if value < self.best {
            self.best = value;
            self.bad = 0;
            return 1.0;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            self.factor
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Early-stopping criterion, lower is better.
    pub criterion: f64,
    /// Learning-rate multiplier in effect.
    pub lr_scale: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl History {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Loss, gradients and correct-count of one mini-batch.
pub struct StepOut {
    pub loss: f64,
    pub grads: Vec<Option<Tensor>>,
    pub correct: usize,
}

/// Computes one mini-batch update direction from `(model, x, labels, step)`.
pub type StepFn<'a> = dyn FnMut(&Model, &Tensor, &[usize], u64) -> Result<StepOut> + 'a;

/// Validation summary; `criterion` drives early stopping (lower is better).
pub struct ValOut {
    pub loss: f64,
    pub acc: f64,
    pub criterion: f64,
}

pub type ValFn<'a> = dyn FnMut(&Model) -> Result<ValOut> + 'a;

/// Epoch loop settings.
#[derive(Clone, Debug)]
pub struct LoopConfig {
    pub max_epochs: usize,
    pub min_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub stage: String,
    /// Learning rate per parameter slot.
    pub lr: Vec<f64>,
    pub weight_decay: f64,
    pub plateau: Option<ReduceOnPlateau>,
    pub restore_best: bool,
}

pub(crate) fn diverged(epoch: usize, e: CsiError) -> CsiError {
    match e {
        CsiError::Grad(csi_grad::GradError::NonFinite { node, op }) => CsiError::Diverged {
            epoch,
            detail: format!("non-finite value at node {node} ({op})"),
        },
        other => other,
    }
}

/// Mean cross-entropy and accuracy over a dataset.
pub fn loss_and_accuracy(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let c = model.n_classes();
    let (mut loss, mut hits) = (0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(128) {
        let x = data.batch(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label).collect();
        let t = one_hot(&labels, c);
        let ev = model.graph.evaluate(
            &model.params,
            &[(INPUT_X, &x), (INPUT_TARGET, &t)],
            model.nodes.ce_rows,
        )?;
        loss += ev.output().sum();
        let pred = ev.get(model.nodes.logits)?.argmax_rows();
        hits += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok((loss / data.len() as f64, hits as f64 / data.len() as f64))
}

/// Shuffled mini-batch epochs with early stopping and best-state restore.
pub fn train_epochs(
    model: &mut Model,
    train: &Dataset,
    cfg: &LoopConfig,
    step: &mut StepFn,
    validate: &mut ValFn,
) -> Result<History> {
    if train.is_empty() {
        return Err(CsiError::invalid("train", "empty training set"));
    }
    let mut adam = Adam::new(&model.params, cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_epochs);
    let mut plateau = cfg.plateau.clone();
    let mut lr_scale = 1.0;
    let mut best = model.params.clone();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step_index = 0u64;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &cfg.stage, epoch as u64));
        let lr: Vec<f64> = cfg.lr.iter().map(|l| l * lr_scale).collect();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.samples[i].label).collect();
            let out = step(model, &x, &labels, step_index).map_err(|e| diverged(epoch, e))?;
            step_index += 1;
            if !out.loss.is_finite() {
                return Err(CsiError::Diverged {
                    epoch,
                    detail: "loss is not finite".into(),
                });
            }
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
            adam.step(&mut model.params, &out.grads, &lr);
        }
        let v = validate(model).map_err(|e| diverged(epoch, e))?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss: v.loss,
            val_acc: v.acc,
            criterion: v.criterion,
            lr_scale,
        };
        debug!(
            "{} epoch {epoch}: train {:.4} acc {:.3} | val {:.4} acc {:.3}",
            cfg.stage, stats.train_loss, stats.train_acc, stats.val_loss, stats.val_acc
        );
        history.epochs.push(stats);
        let (improved, stop) = stopper.update(epoch, v.criterion);
        if improved {
            best = model.params.clone();
            history.best_epoch = epoch;
        }
        if let Some(p) = plateau.as_mut() {
            lr_scale *= p.update(v.criterion);
        }
        if stop {
            break;
        }
    }
    if cfg.restore_best {
        // keep freeze flags of the live model
        let trainable = model.params.trainable.clone();
        model.params = best;
        model.params.trainable = trainable;
    }
    Ok(history)
}

/// Cross-entropy step on clean inputs.
pub fn clean_step(model: &Model, x: &Tensor, labels: &[usize]) -> Result<StepOut> {
    let t = one_hot(labels, model.n_classes());
    let (loss, grads, logits) =
        model.loss_and_param_grads(model.nodes.ce_mean, &[(INPUT_X, x), (INPUT_TARGET, &t)])?;
    let correct = logits
        .map(|l| l.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count())
        .unwrap_or(0);
    Ok(StepOut {
        loss,
        grads,
        correct,
    })
}

/// Validation on clean loss.
pub fn clean_validation(val: &Dataset) -> impl FnMut(&Model) -> Result<ValOut> + '_ {
    move |m| {
        let (loss, acc) = loss_and_accuracy(m, val)?;
        Ok(ValOut {
            loss,
            acc,
            criterion: loss,
        })
    }
}

/// Loop settings for plain training of every slot at `hyper.lr`.
pub fn loop_config(model: &Model, hyper: &TrainHyper, stage: &str) -> LoopConfig {
    LoopConfig {
        max_epochs: hyper.max_epochs,
        min_epochs: hyper.min_epochs,
        patience: hyper.patience,
        batch_size: hyper.batch_size,
        seed: hyper.seed,
        stage: stage.to_string(),
        lr: vec![hyper.lr; model.params.len()],
        weight_decay: hyper.weight_decay,
        plateau: None,
        restore_best: true,
    }
}

/// Trains on clean data with early stopping on validation loss and restores
/// the best-validation parameters.
pub fn train_clean(model: &mut Model, split: &DatasetSplit, hyper: &TrainHyper) -> Result<History> {
    hyper.validate()?;
    let cfg = loop_config(model, hyper, "train-clean");
    let mut step = |m: &Model, x: &Tensor, y: &[usize], _: u64| clean_step(m, x, y);
    let mut val = clean_validation(&split.val);
    train_epochs(model, &split.train, &cfg, &mut step, &mut val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_criterion_stops_after_min_plus_patience() {
        let mut s = EarlyStopping::new(25, 40);
        let mut stopped = None;
        for epoch in 1..=200 {
            if s.update(epoch, 1.0).1 {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(65));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn plateau_halves_after_five_flat_epochs() {
        let mut p = ReduceOnPlateau::new(0.5, 5);
        assert_eq!(p.update(1.0), 1.0);
        let scales: Vec<f64> = (0..5).map(|_| p.update(1.0)).collect();
        assert_eq!(scales, vec![1.0, 1.0, 1.0, 1.0, 0.5]);
        assert_eq!(p.update(0.5), 1.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()), None];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }
}

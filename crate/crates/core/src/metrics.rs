//! Scoring over predicted labels.
//!
//! Everything here is a pure function of predictions and labels; model
//! evaluation lives with the models so these stay trivially testable.

use crate::error::{CsiError, Result};

/// Fraction of masked samples whose adversarial prediction differs from the
/// label.
pub fn asr(adv_pred: &[usize], labels: &[usize], mask: &[bool]) -> Result<f64> {
    if adv_pred.len() != labels.len() || mask.len() != labels.len() {
        return Err(CsiError::invalid("asr", "predictions, labels and mask must align"));
    }
    let (mut n, mut wrong) = (0usize, 0usize);
    for ((&p, &y), &m) in adv_pred.iter().zip(labels).zip(mask) {
        if m {
            n += 1;
            wrong += (p != y) as usize;
        }
    }
    if n == 0 {
        return Err(CsiError::invalid("asr", "empty mask"));
    }
    Ok(wrong as f64 / n as f64)
}

/// Top-1 accuracy. An empty set scores 0.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Top-1 accuracy on the masked subset of adversarial predictions.
pub fn robust_accuracy(adv_pred: &[usize], labels: &[usize], mask: &[bool]) -> Result<f64> {
    asr(adv_pred, labels, mask).map(|a| 1.0 - a)
}

/// Clean-correct mask: prediction equals label.
pub fn correct_mask(pred: &[usize], labels: &[usize]) -> Vec<bool> {
    pred.iter().zip(labels).map(|(p, y)| p == y).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct F1Report {
    /// Unweighted mean over every class, absent classes scoring 0.
    pub macro_f1: f64,
    /// Mean over classes that occur in the labels or predictions.
    pub macro_f1_present: f64,
    pub per_class: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Classes with neither labels nor predictions.
    pub empty_classes: Vec<usize>,
}

pub fn macro_f1(pred: &[usize], labels: &[usize], n_classes: usize) -> F1Report {
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &y) in pred.iter().zip(labels) {
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut per_class = Vec::with_capacity(n_classes);
    let mut precision = Vec::with_capacity(n_classes);
    let mut recall = Vec::with_capacity(n_classes);
    let mut empty_classes = Vec::new();
    for c in 0..n_classes {
        precision.push(ratio(tp[c], tp[c] + fp[c]));
        recall.push(ratio(tp[c], tp[c] + fn_[c]));
        per_class.push(ratio(2 * tp[c], 2 * tp[c] + fp[c] + fn_[c]));
        if tp[c] + fp[c] + fn_[c] == 0 {
            empty_classes.push(c);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let present: Vec<f64> = (0..n_classes)
        .filter(|c| !empty_classes.contains(c))
        .map(|c| per_class[c])
        .collect();
    F1Report {
        macro_f1: mean(&per_class),
        macro_f1_present: mean(&present),
        per_class,
        precision,
        recall,
        empty_classes,
    }
}

/// Sample mean and (n-1) standard deviation; std is 0 for fewer than two
/// values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Attack outcome on one evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub n_total: usize,
    pub n_clean_correct: usize,
    pub n_adv_wrong_given_clean_correct: usize,
    pub n_adv_wrong: usize,
    pub clean_f1: F1Report,
    pub adv_f1: F1Report,
    pub mean_psr_db: f64,
    pub std_psr_db: f64,
    pub capacity: usize,
}

impl EvalResult {
    pub fn new(
        clean_pred: &[usize],
        adv_pred: &[usize],
        labels: &[usize],
        n_classes: usize,
        psr_db: &[f64],
        capacity: usize,
    ) -> Self {
        let mut n_clean_correct = 0;
        let mut wrong_cc = 0;
        let mut wrong = 0;
        for ((&c, &a), &y) in clean_pred.iter().zip(adv_pred).zip(labels) {
            wrong += (a != y) as usize;
            if c == y {
                n_clean_correct += 1;
                wrong_cc += (a != y) as usize;
            }
        }
        let (mean_psr_db, std_psr_db) = mean_std(psr_db);
        Self {
            n_total: labels.len(),
            n_clean_correct,
            n_adv_wrong_given_clean_correct: wrong_cc,
            n_adv_wrong: wrong,
            clean_f1: macro_f1(clean_pred, labels, n_classes),
            adv_f1: macro_f1(adv_pred, labels, n_classes),
            mean_psr_db,
            std_psr_db,
            capacity,
        }
    }

    pub fn clean_accuracy(&self) -> f64 {
        self.n_clean_correct as f64 / self.n_total.max(1) as f64
    }

    /// Over clean-correct samples; NaN when there are none.
    pub fn asr(&self) -> f64 {
        if self.n_clean_correct == 0 {
            return f64::NAN;
        }
        self.n_adv_wrong_given_clean_correct as f64 / self.n_clean_correct as f64
    }

    pub fn racc(&self) -> f64 {
        1.0 - self.asr()
    }

    pub fn asr_all(&self) -> f64 {
        self.n_adv_wrong as f64 / self.n_total.max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asr_counts() {
        let y = [0, 1, 0, 1, 0, 1, 0, 1];
        let all = [true; 8];
        assert_eq!(asr(&y, &y, &all).unwrap(), 0.0);
        let flipped: Vec<usize> = y.iter().map(|v| 1 - v).collect();
        assert_eq!(asr(&flipped, &y, &all).unwrap(), 1.0);
        let mut three = y.to_vec();
        for i in [1, 4, 6] {
            three[i] = 1 - three[i];
        }
        assert_eq!(asr(&three, &y, &all).unwrap(), 0.375);
        assert!(asr(&y, &y, &[false; 8]).is_err());
    }

    #[test]
    fn racc_complements_asr() {
        let y = [0, 1, 2, 0];
        let adv = [0, 2, 2, 1];
        let mask = [true, true, false, true];
        let a = asr(&adv, &y, &mask).unwrap();
        assert_eq!(robust_accuracy(&adv, &y, &mask).unwrap(), 1.0 - a);
    }

    #[test]
    fn constant_classifier_accuracy() {
        let y = [0, 1, 1, 0, 0];
        assert_eq!(accuracy(&[0; 5], &y), 0.6);
        assert_eq!(accuracy(&y, &y), 1.0);
    }

    #[test]
    fn hand_confusion_f1() {
        // confusion [[1,1],[0,2]]: rows are labels
        let y = [0, 0, 1, 1];
        let p = [0, 1, 1, 1];
        let r = macro_f1(&p, &y, 2);
        assert!((r.per_class[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class[1] - 0.8).abs() < 1e-15);
        assert!((r.macro_f1 - 0.733_333_333_333_333_3).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_flagged() {
        let y = [0, 1, 0];
        let r = macro_f1(&y, &y, 3);
        assert_eq!(r.empty_classes, vec![2]);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.macro_f1_present, 1.0);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }
}

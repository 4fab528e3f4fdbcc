use csi_core::data::{normalize, split, synth_generate, ChannelParams, DatasetSplit, Dims};
use csi_core::defenses::*;
use csi_core::models::*;

fn toy_split(seed: u64) -> DatasetSplit {
    let d = synth_generate(&ChannelParams::default(), 3, 16, Dims::new(1, 4, 32), seed).unwrap();
    normalize(&split(&d, [0.5, 0.25, 0.25], seed).unwrap()).unwrap().0
}

fn hyper(seed: u64, epochs: usize) -> TrainHyper {
    TrainHyper {
        max_epochs: epochs,
        min_epochs: epochs,
        patience: epochs,
        batch_size: 8,
        lr: 5e-3,
        seed,
        ..Default::default()
    }
}

fn spec(kind: DefenseKind, seed: u64) -> DefenseSpec {
    DefenseSpec {
        inner_steps: 3,
        inner_restarts: 2,
        val_steps: 2,
        hyper: hyper(seed, 3),
        ..DefenseSpec::new(kind)
    }
}

fn model(dims: Dims, seed: u64) -> Model {
    let mut s = ModelSpec::new("m", Family::LargeGru, dims, 3).with_seed(seed);
    s.hidden = 8;
    build_model(&s).unwrap()
}

#[test]
fn kl_vanishes_without_perturbation() {
    let s = toy_split(1);
    let m = model(s.train.dims, 1).with_trades(2.0).unwrap();
    let x = s.train.as_batch();
    let y = s.train.labels();
    let kl = m.kl_input_grad(&x, &x).unwrap().loss_rows;
    assert!(kl.iter().all(|&v| v == 0.0));

    let t = one_hot(&y, 3);
    let inputs = [(INPUT_X, &x), (INPUT_X2, &x), (INPUT_TARGET, &t)];
    let (trades, _, _) = m.loss_and_param_grads(m.nodes.trades.unwrap(), &inputs).unwrap();
    let (ce, _, _) = m.loss_and_param_grads(m.nodes.ce_mean, &inputs).unwrap();
    assert!((trades - ce).abs() <= 1e-12);
}

#[test]
fn inner_perturbations_stay_in_the_ball() {
    let s = toy_split(2);
    for kind in [DefenseKind::PgdAt, DefenseKind::Trades] {
        let mut m = model(s.train.dims, 2);
        let r = defend(&mut m, &s, &spec(kind, 2)).unwrap();
        assert!(r.max_delta_ratio > 0.0);
        assert!(r.max_delta_ratio <= 1.0 + 1e-12, "{kind}: {}", r.max_delta_ratio);
        if kind == DefenseKind::Trades {
            assert!(r.min_kl.unwrap() >= 0.0);
        }
    }
}

#[test]
fn kl_inner_max_increases_divergence() {
    let s = toy_split(3);
    let mut m = model(s.train.dims, 3);
    train_clean(&mut m, &s, &hyper(3, 10)).unwrap();
    let x = s.train.as_batch();
    let ids: Vec<u64> = (0..x.batch() as u64).collect();
    let (_, short) = kl_inner_max(&m, &x, &ids, 10.0, 1, 1, 0).unwrap();
    let (_, long) = kl_inner_max(&m, &x, &ids, 10.0, 10, 1, 0).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&long) > mean(&short));
    assert!(long.iter().all(|&v| v >= 0.0));
}

#[test]
fn defense_training_is_deterministic() {
    let s = toy_split(4);
    for kind in [DefenseKind::PgdAt, DefenseKind::Trades] {
        let run = || {
            let mut m = model(s.train.dims, 4);
            defend(&mut m, &s, &spec(kind, 5)).unwrap();
            m.params
        };
        assert_eq!(run(), run(), "{kind}");
    }
}

#[test]
fn negligible_budget_reduces_to_clean_training() {
    let d = synth_generate(&ChannelParams::default(), 3, 40, Dims::new(1, 4, 32), 5).unwrap();
    let s = normalize(&split(&d, [0.6, 0.2, 0.2], 5).unwrap()).unwrap().0;
    let fresh = || build_model(&ModelSpec::new("lin", Family::Linear, s.train.dims, 3).with_seed(6)).unwrap();
    let mut clean = fresh();
    train_clean(&mut clean, &s, &hyper(7, 30)).unwrap();
    let (_, clean_acc) = loss_and_accuracy(&clean, &s.test).unwrap();

    let mut robust = fresh();
    let spec = DefenseSpec {
        train_snr_db: 80.0,
        hyper: hyper(7, 30),
        ..spec(DefenseKind::PgdAt, 7)
    };
    pgd_at(&mut robust, &s, &spec).unwrap();
    let (_, robust_acc) = loss_and_accuracy(&robust, &s.test).unwrap();
    assert!(clean_acc > 0.9, "{clean_acc}");
    assert!((robust_acc - clean_acc).abs() <= 0.02, "{clean_acc} vs {robust_acc}");
}

use csi_core::data::{normalize, split, synth_generate, ChannelParams, DatasetSplit, Dims};
use csi_core::models::*;
use csi_core::rng;
use csi_core::Tensor;
use rand::Rng;

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k + cout
}

fn dense(fin: usize, fout: usize) -> usize {
    fin * fout + fout
}

fn gru(input: usize, hidden: usize) -> usize {
    3 * hidden * (input + hidden) + 6 * hidden
}

#[test]
fn capacity_matches_layer_arithmetic() {
    let dims = Dims::new(3, 30, 250);
    let ch = 90;
    let c = 7;

    let s = ModelSpec::new("cnn", Family::LargeCnn, dims, c);
    let w = s.width;
    let widths = [w, w, 2 * w, 2 * w, 2 * w];
    let mut cin = ch;
    let mut want = 0;
    for &cout in &widths {
        want += conv(cin, cout, 3);
        cin = cout;
    }
    want += dense(2 * w * (250 >> 5), s.hidden) + dense(s.hidden, c);
    assert_eq!(build_model(&s).unwrap().capacity(), want);

    let s = ModelSpec::new("gru", Family::LargeGru, dims, c);
    let want = gru(ch, s.hidden) + dense(s.hidden, c);
    assert_eq!(build_model(&s).unwrap().capacity(), want);

    let s = ModelSpec::new("tcn", Family::TinyTcnHead, dims, c);
    let enc = conv(ch, s.width, 3) + conv(s.width, s.width, 3) + conv(s.width, s.latent_dim, 1);
    let want = enc + conv(s.latent_dim, s.hidden, 3) + conv(s.hidden, s.hidden, 3) + dense(s.hidden, c);
    assert_eq!(build_model(&s).unwrap().capacity(), want);

    let s = ModelSpec::new("tgru", Family::TinyGruHead, dims, c);
    let want = enc + gru(s.latent_dim, s.hidden) + dense(s.hidden, c);
    assert_eq!(build_model(&s).unwrap().capacity(), want);

    let s = ModelSpec::new("lin", Family::Linear, dims, c);
    assert_eq!(build_model(&s).unwrap().capacity(), dense(3 * 30 * 250, c));
}

fn toy_split(seed: u64) -> DatasetSplit {
    let d = synth_generate(&ChannelParams::default(), 3, 12, Dims::new(1, 4, 32), seed).unwrap();
    normalize(&split(&d, [0.5, 0.25, 0.25], seed).unwrap()).unwrap().0
}

fn quick_hyper(seed: u64) -> TrainHyper {
    TrainHyper {
        max_epochs: 60,
        min_epochs: 60,
        patience: 60,
        batch_size: 6,
        lr: 5e-3,
        weight_decay: 0.0,
        seed,
        ..Default::default()
    }
}

#[test]
fn small_models_overfit_a_toy_set() {
    let s = toy_split(1);
    for family in [Family::LargeGru, Family::Linear, Family::LargeCnn] {
        let mut spec = ModelSpec::new("m", family, s.train.dims, 3).with_seed(2);
        spec.width = 8;
        spec.hidden = 16;
        let mut m = build_model(&spec).unwrap();
        let mut h = quick_hyper(3);
        h.min_epochs = 1;
        h.patience = h.max_epochs;
        // validate on the training set so restore-best keeps the fitted weights
        let fit = DatasetSplit {
            val: s.train.clone(),
            ..s.clone()
        };
        train_clean(&mut m, &fit, &h).unwrap();
        let (_, acc) = loss_and_accuracy(&m, &s.train).unwrap();
        assert_eq!(acc, 1.0, "{family}");
    }
}

#[test]
fn frozen_slots_stay_bit_identical() {
    let s = toy_split(2);
    let mut spec = ModelSpec::new("m", Family::TinyTcnHead, s.train.dims, 3).with_seed(1);
    spec.width = 4;
    spec.hidden = 4;
    spec.latent_dim = 2;
    let mut m = build_model(&spec).unwrap();
    let frozen: Vec<usize> = (0..m.params.len())
        .filter(|&i| m.graph.param_decls()[i].name.starts_with("enc."))
        .collect();
    assert!(!frozen.is_empty());
    for &i in &frozen {
        m.params.trainable[i] = false;
    }
    let before = m.params.clone();
    let mut h = quick_hyper(4);
    h.max_epochs = 5;
    h.min_epochs = 5;
    h.patience = 5;
    train_clean(&mut m, &s, &h).unwrap();
    for i in 0..m.params.len() {
        let same = m.params.tensors[i].data() == before.tensors[i].data();
        assert_eq!(same, frozen.contains(&i), "slot {}", m.graph.param_decls()[i].name);
    }
}

#[test]
fn training_is_deterministic() {
    let s = toy_split(3);
    let spec = ModelSpec::new("m", Family::LargeGru, s.train.dims, 3).with_seed(5);
    let run = || {
        let mut m = build_model(&spec).unwrap();
        let mut h = quick_hyper(6);
        h.max_epochs = 4;
        h.min_epochs = 4;
        h.patience = 4;
        train_clean(&mut m, &s, &h).unwrap();
        m.params
    };
    assert_eq!(run(), run());
}

/// Squared Frobenius norm of the encoder Jacobian at `x` by central
/// differences, one input coordinate at a time.
fn jacobian_frobenius(ae: &Autoencoder, x: &Tensor) -> f64 {
    let h = 1e-5;
    let mut total = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let dz = ae.encode(&plus).unwrap().sub(&ae.encode(&minus).unwrap());
        total += dz.data().iter().map(|v| (v / (2.0 * h)).powi(2)).sum::<f64>();
    }
    total
}

#[test]
fn contractive_probe_estimates_jacobian_norm() {
    let dims = Dims::new(1, 3, 16);
    let mut spec = ModelSpec::new("ae", Family::TinyTcnHead, dims, 2).with_seed(8);
    spec.width = 4;
    spec.latent_dim = 2;
    let ae = Autoencoder::build(&spec, 0.0).unwrap();
    let mut r = rng::stream(3, "contractive-test", 0);
    let x = Tensor::new(vec![1, 1, 3, 16], (0..48).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let want = jacobian_frobenius(&ae, &x);

    let n = 4000;
    let xs = Tensor::stack(&vec![&x.index_batch(0); n]).unwrap();
    let v: Vec<f64> = (0..n * 48)
        .map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let v = Tensor::new(vec![n, 1, 3, 16], v).unwrap();
    let got = ae.probe_norm(&xs, &v).unwrap();
    assert!((got - want).abs() <= 0.05 * want, "probe {got} vs jacobian {want}");
}

#[test]
fn pretraining_reduces_reconstruction_error() {
    let s = toy_split(4);
    let mut spec = ModelSpec::new("m", Family::TinyGruHead, s.train.dims, 3).with_seed(2);
    spec.width = 8;
    spec.latent_dim = 2;
    let mut ae = Autoencoder::build(&spec, 2e-4).unwrap();
    let before = ae.mse(&s.val).unwrap();
    let mut h = quick_hyper(1);
    h.pretrain_epochs = 30;
    let rep = pretrain_autoencoder(&mut ae, &s, &h).unwrap();
    let after = ae.mse(&s.val).unwrap();
    assert!(after < 0.8 * before, "{before} -> {after}");
    assert!(rep.best_epoch >= 1);
}

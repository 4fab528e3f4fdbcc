use csi_core::attacks::*;
use csi_core::data::Dims;
use csi_core::models::{build_model, one_hot, Family, Model, ModelSpec};
use csi_core::physcon::{PhysConfig, PhysOperator, RxCov};
use csi_core::rng;
use csi_core::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const DIMS: Dims = Dims {
    antennas: 1,
    subcarriers: 2,
    packets: 4,
};

fn linear(w: &[Vec<f64>], b: &[f64]) -> Model {
    let c = b.len();
    let mut m = build_model(&ModelSpec::new("lin", Family::Linear, DIMS, c)).unwrap();
    let d = DIMS.len();
    // weights are stored (in, out)
    let mut wt = vec![0.0; d * c];
    for (k, row) in w.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            wt[i * c + k] = *v;
        }
    }
    let wi = m.param_id("linear.w").unwrap().0;
    let bi = m.param_id("linear.b").unwrap().0;
    m.params.tensors[wi] = Tensor::new(vec![d, c], wt).unwrap();
    m.params.tensors[bi] = Tensor::new(vec![c], b.to_vec()).unwrap();
    m
}

fn normal_vec(n: usize, r: &mut rng::Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

/// Distance from `x` to the closest boundary where another class ties the
/// predicted one.
fn margin_distance(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> (usize, f64) {
    let logit = |k: usize| w[k].iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b[k];
    let y = (0..b.len())
        .max_by(|&i, &j| logit(i).partial_cmp(&logit(j)).unwrap())
        .unwrap();
    let dist = (0..b.len())
        .filter(|&k| k != y)
        .map(|k| {
            let diff: f64 = w[k]
                .iter()
                .zip(&w[y])
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            (logit(y) - logit(k)) / diff
        })
        .fold(f64::INFINITY, f64::min);
    (y, dist)
}

struct Instance {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    x: Vec<f64>,
    y: usize,
    snr: f64,
    expect_success: bool,
}

/// Random linear problems whose budget sits clearly on one side of the
/// margin.
fn instances(classes: usize, n: usize, seed: u64) -> Vec<Instance> {
    let mut r = rng::stream(seed, "linear-oracle", 0);
    let d = DIMS.len();
    let mut out = Vec::new();
    while out.len() < n {
        let w: Vec<Vec<f64>> = (0..classes).map(|_| normal_vec(d, &mut r)).collect();
        let b = normal_vec(classes, &mut r);
        let x: Vec<f64> = normal_vec(d, &mut r).iter().map(|v| 3.0 * v).collect();
        let (y, dist) = margin_distance(&w, &b, &x);
        let ratio = if out.len() % 2 == 0 {
            r.gen_range(0.3..0.9)
        } else {
            r.gen_range(1.1..3.0)
        };
        let eps = ratio * dist;
        let xn = csi_grad::norm_l2(&x);
        let snr = 20.0 * (xn / eps).log10();
        if !(0.0..=80.0).contains(&snr) {
            continue;
        }
        out.push(Instance {
            w,
            b,
            x,
            y,
            snr,
            expect_success: ratio > 1.0,
        });
    }
    out
}

fn batch(x: &[f64]) -> Tensor {
    Tensor::new(vec![1, DIMS.antennas, DIMS.subcarriers, DIMS.packets], x.to_vec()).unwrap()
}

#[test]
fn pgd_matches_binary_margin_oracle() {
    for (i, inst) in instances(2, 50, 1).iter().enumerate() {
        let m = linear(&inst.w, &inst.b);
        let mut budget = AttackBudget::new(inst.snr);
        budget.restarts = 1;
        let p = pgd(&m, &batch(&inst.x), &[inst.y], &[i as u64], &budget, None, 9).unwrap();
        assert_eq!(p[0].success, inst.expect_success, "instance {i}");
        assert!(p[0].delta.norm_l2() <= p[0].eps * (1.0 + 1e-12));
    }
}

#[test]
fn deepfool_matches_multiclass_margin_oracle() {
    for (i, inst) in instances(4, 50, 2).iter().enumerate() {
        let m = linear(&inst.w, &inst.b);
        let cfg = DeepFoolConfig {
            snr_db: Some(inst.snr),
            ..Default::default()
        };
        let p = deepfool(&m, &batch(&inst.x), &cfg).unwrap();
        assert_eq!(p[0].success, inst.expect_success, "instance {i}");
    }
}

#[test]
fn deepfool_binary_step_is_analytic() {
    let w = vec![vec![0.0; 8], vec![1.0, -2.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0]];
    let b = vec![0.0, -1.0];
    let x = vec![0.2; 8];
    let m = linear(&w, &b);
    let p = deepfool(&m, &batch(&x), &DeepFoolConfig::default()).unwrap();
    let f: f64 = w[1].iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() - 1.0;
    let wn2: f64 = w[1].iter().map(|v| v * v).sum();
    assert!(f < 0.0);
    for (j, d) in p[0].delta.data().iter().enumerate() {
        let want = 1.02 * (-f + 1e-8) / wn2 * w[1][j];
        assert!((d - want).abs() < 1e-12, "{d} vs {want}");
    }
    assert!(p[0].success);
    assert_eq!(p[0].iterations_used, 1);
}

#[test]
fn deepfool_crosses_exact_tie() {
    let w = vec![vec![1.0; 8], vec![-1.0; 8]];
    let b = vec![0.0, 0.0];
    let x: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 0.5 } else { -0.5 }).collect();
    let m = linear(&w, &b);
    // equal logits: argmax picks class 0, the nudge must still move it
    assert_eq!(m.predict(&batch(&x)).unwrap(), vec![0]);
    let p = deepfool(&m, &batch(&x), &DeepFoolConfig::default()).unwrap();
    assert!(p[0].success);
    assert!(p[0].delta.norm_l2() > 0.0);
}

#[test]
fn deepfool_norm_tracks_margin() {
    let w = vec![vec![0.0; 8], vec![1.0; 8]];
    let mut last = 0.0;
    for k in 1..=10 {
        let bias = -(k as f64);
        let m = linear(&w, &[0.0, bias]);
        let x: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 0.5 } else { -0.5 }).collect();
        let p = deepfool(&m, &batch(&x), &DeepFoolConfig::default()).unwrap();
        let want = 1.02 * (k as f64 + 1e-8) / 8f64.sqrt();
        let n = p[0].delta.norm_l2();
        assert!((n - want).abs() < 1e-12);
        assert!(n > last);
        last = n;
    }
}

fn small_model(family: Family, seed: u64) -> Model {
    let mut spec = ModelSpec::new("m", family, Dims::new(2, 3, 32), 3).with_seed(seed);
    spec.width = 4;
    spec.hidden = 8;
    if family.is_tiny() {
        spec.latent_dim = 2;
    }
    build_model(&spec).unwrap()
}

fn random_batch(n: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "batch", 0);
    let shape = [n, 2, 3, 32];
    Tensor::new(shape.to_vec(), normal_vec(shape.iter().product(), &mut r)).unwrap()
}

#[test]
fn budget_scan_respects_ball_and_psr() {
    let m = small_model(Family::TinyTcnHead, 3);
    let x = random_batch(6, 4);
    let y = vec![0, 1, 2, 0, 1, 2];
    let ids: Vec<u64> = (0..6).collect();
    let phys = PhysOperator::new(
        &PhysConfig {
            rx_cov: RxCov::Identity,
            ..Default::default()
        },
        Dims::new(2, 3, 32),
        None,
    )
    .unwrap();
    for snr in [0.0, 10.0, 20.0, 40.0, 80.0] {
        let mut b = AttackBudget::new(snr);
        b.steps = 5;
        b.restarts = 2;
        for op in [None, Some(&phys)] {
            for p in pgd(&m, &x, &y, &ids, &b, op, 1).unwrap() {
                assert!(p.delta.norm_l2() <= p.eps * (1.0 + 1e-12));
                assert!(p.achieved_psr_db <= -snr + 1e-9);
                if op.is_some() {
                    assert!((p.achieved_psr_db + snr).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn extra_restarts_never_lower_the_attack_loss() {
    let m = small_model(Family::LargeGru, 5);
    let x = random_batch(8, 6);
    let y = vec![0, 1, 2, 0, 1, 2, 0, 1];
    let ids: Vec<u64> = (10..18).collect();
    let t = one_hot(&y, 3);
    let loss = |restarts: usize| {
        let mut b = AttackBudget::new(15.0);
        b.steps = 4;
        b.restarts = restarts;
        let p = pgd(&m, &x, &y, &ids, &b, None, 2).unwrap();
        m.ce_input_grad(&apply(&x, &p), &t).unwrap().loss_rows
    };
    let one = loss(1);
    let three = loss(3);
    for (a, b) in one.iter().zip(&three) {
        assert!(b >= a, "{b} < {a}");
    }
}

#[test]
fn pgd_is_independent_of_batch_grouping() {
    let m = small_model(Family::TinyGruHead, 7);
    let x = random_batch(4, 8);
    let y = vec![2, 0, 1, 1];
    let ids = vec![3, 1, 4, 1_000];
    let mut b = AttackBudget::new(10.0);
    b.steps = 3;
    b.restarts = 2;
    let all = pgd(&m, &x, &y, &ids, &b, None, 5).unwrap();
    for i in 0..4 {
        let one = pgd(&m, &x.select_batch(&[i]), &y[i..=i], &ids[i..=i], &b, None, 5).unwrap();
        assert_eq!(one[0].delta, all[i].delta);
    }
}

#[test]
fn targeted_skips_samples_already_on_target() {
    let m = small_model(Family::LargeCnn, 1);
    let x = random_batch(3, 2);
    let mut b = AttackBudget::new(10.0);
    b.steps = 2;
    b.restarts = 1;
    b.mode = Mode::Targeted(Some(1));
    let p = pgd(&m, &x, &[0, 1, 2], &[0, 1, 2], &b, None, 0).unwrap();
    assert_eq!(p[1].delta.norm_l2(), 0.0);
    assert_eq!(p[1].achieved_psr_db, ZERO_PSR_DB);
    assert!(!p[1].success);
    assert!(p[0].delta.norm_l2() > 0.0);
}

#[test]
fn uap_respects_radius_and_zero_target() {
    let m = small_model(Family::TinyTcnHead, 2);
    let x = random_batch(12, 3);
    let cfg = UapConfig {
        snr_db: 10.0,
        passes: 2,
        batch_size: 4,
        norm_batches: 5,
        ..Default::default()
    };
    let r = uap(&m, &x, None, &cfg, 1).unwrap();
    assert!(r.audit_norms.iter().all(|&n| n <= r.xi * (1.0 + 1e-12)));
    assert!((0.0..=1.0).contains(&r.fooling_rate));
    assert_eq!(r.fooling_rate, fooling_rate(&m, &x, &r.v).unwrap());

    let none = uap(&m, &x, None, &UapConfig { fooling_target: 0.0, ..cfg.clone() }, 1).unwrap();
    assert_eq!(none.v.norm_l2(), 0.0);
    assert_eq!(none.passes_used, 0);

    let corr = UapConfig {
        preserve_corr: true,
        ..cfg
    };
    assert!(uap(&m, &x, None, &corr, 1).is_err());
}

#[test]
fn transfer_rejects_mismatched_models() {
    let a = small_model(Family::TinyTcnHead, 1);
    let b = build_model(&ModelSpec::new("z", Family::Linear, DIMS, 3)).unwrap();
    let x = random_batch(2, 1);
    let method = AttackMethod::Pgd(AttackBudget::new(10.0));
    assert!(transfer_eval(&a, &b, &x, &[0, 1], &[0, 1], &method, None, 0).is_err());
    let c = small_model(Family::TinyGruHead, 2);
    let r = transfer_eval(&a, &c, &x, &[0, 1], &[0, 1], &method, None, 0).unwrap();
    assert_eq!(r.tag, "intra");
}

use approx::assert_relative_eq;
use csi_grad::{
    finite_diff_check, GradError, Graph32, GraphBuilder, Op, Padding, Params, Probe, Tensor,
    Tensor32, Wrt,
};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn identity_graph_returns_input() {
    let mut g = GraphBuilder::<f64>::new();
    let x = g.input("x");
    let graph = g.finish();
    let p = Params::zeros_for(&graph);
    let xv = t(&[3], &[1.0, 2.0, 3.0]);
    let e = graph.evaluate(&p, &[("x", &xv)], x).unwrap();
    assert_eq!(e.output(), &xv);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = GraphBuilder::<f64>::new();
    let x = g.input("x");
    let s = g.softmax(x);
    let graph = g.finish();
    let p = Params::zeros_for(&graph);
    let xv = t(&[1, 3], &[0.0, 0.0, 0.0]);
    let out = graph.evaluate(&p, &[("x", &xv)], s).unwrap().into_output();
    for v in out.data() {
        assert_relative_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
    }
}

#[test]
fn matmul_hand_value() {
    let mut g = GraphBuilder::<f64>::new();
    let a = g.input("a");
    let b = g.input("b");
    let m = g.matmul(a, b);
    let graph = g.finish();
    let p = Params::zeros_for(&graph);
    let av = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let bv = t(&[2, 1], &[1.0, 1.0]);
    let out = graph.evaluate(&p, &[("a", &av), ("b", &bv)], m).unwrap().into_output();
    assert_eq!(out.shape(), &[2, 1]);
    assert_eq!(out.data(), &[3.0, 7.0]);
}

#[test]
fn gradient_of_sum_of_squares() {
    let mut g = GraphBuilder::<f64>::new();
    let x = g.input("x");
    let sq = g.mul(x, x);
    let s = g.sum(sq);
    let graph = g.finish();
    let p = Params::zeros_for(&graph);
    let xv = t(&[2], &[1.0, -2.0]);
    let e = graph.evaluate(&p, &[("x", &xv)], s).unwrap();
    let gr = e.backward(&Wrt::input("x"), None).unwrap();
    assert_eq!(gr.input("x").unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut g = GraphBuilder::<f64>::new();
    let l = g.input("l");
    let y = g.input("y");
    let ce = g.op(Op::CrossEntropy { logits: l, target: y });
    let s = g.sum(ce);
    let graph = g.finish();
    let p = Params::zeros_for(&graph);
    let lv = t(&[1, 4], &[0.3, -1.2, 2.0, 0.5]);
    let yv = Tensor::one_hot(&[2], 4);
    let e = graph.evaluate(&p, &[("l", &lv), ("y", &yv)], s).unwrap();
    let grad = e.backward(&Wrt::input("l"), None).unwrap().inputs["l"].clone();

    // analytic oracle
    let m: f64 = lv.data().iter().map(|v| v.exp()).sum();
    for (j, gj) in grad.data().iter().enumerate() {
        let expected = lv.data()[j].exp() / m - if j == 2 { 1.0 } else { 0.0 };
        assert_relative_eq!(*gj, expected, epsilon = 1e-14);
    }
    // finite-difference oracle
    let err = finite_diff_check(
        &graph,
        &p,
        &[("l", &lv), ("y", &yv)],
        s,
        &Probe::Input("l".into()),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn constant_graph_has_zero_gradient() {
    let mut g = GraphBuilder::<f64>::new();
    let x = g.input("x");
    let c = g.constant(t(&[2], &[4.0, 5.0]));
    let s = g.sum(c);
    let graph = g.finish();
    let _ = x;
    let p = Params::zeros_for(&graph);
    let xv = t(&[2], &[1.0, 1.0]);
    let e = graph.evaluate(&p, &[("x", &xv)], s).unwrap();
    assert_eq!(e.output().data(), &[9.0]);
    let gr = e.backward(&Wrt::input("x"), None).unwrap();
    assert_eq!(gr.input("x").unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn finite_diff_check_tolerances() {
    // quadratic
    let mut g = GraphBuilder::<f64>::new();
    let x = g.input("x");
    let sq = g.mul(x, x);
    let q = g.sum(sq);
    let graph = g.finish();
    let p = Params::zeros_for(&graph);
    let xv = t(&[4], &[0.5, -1.5, 2.0, 0.25]);
    let err = finite_diff_check(&graph, &p, &[("x", &xv)], q, &Probe::Input("x".into()), 1e-4)
        .unwrap();
    assert!(err <= 1e-5, "quadratic {err}");

    // relu with all |activations| > 0.1
    let mut g = GraphBuilder::<f64>::new();
    let x = g.input("x");
    let r = g.relu(x);
    let r2 = g.mul(r, r);
    let s = g.sum(r2);
    let graph = g.finish();
    let xv = t(&[4], &[0.5, -1.5, 2.0, -0.25]);
    let err = finite_diff_check(&graph, &p, &[("x", &xv)], s, &Probe::Input("x".into()), 1e-4)
        .unwrap();
    assert!(err <= 1e-4, "relu {err}");

    // linear
    let mut g = GraphBuilder::<f64>::new();
    let x = g.input("x");
    let l = g.scale(x, 3.0);
    let s = g.sum(l);
    let graph = g.finish();
    let err = finite_diff_check(&graph, &p, &[("x", &xv)], s, &Probe::Input("x".into()), 1e-4)
        .unwrap();
    assert!(err <= 1e-7, "linear {err}");
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = GraphBuilder::<f64>::new();
    let x = g.input("x");
    let r = g.relu(x);
    let s = g.sum(r);
    let graph = g.finish();
    let p = Params::zeros_for(&graph);
    let xv = t(&[3], &[0.0, 1.0, -1.0]);
    let e = graph.evaluate(&p, &[("x", &xv)], s).unwrap();
    let gr = e.backward(&Wrt::input("x"), None).unwrap();
    assert_eq!(gr.input("x").unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn shape_mismatch_names_node() {
    let mut g = GraphBuilder::<f64>::new();
    let a = g.input("a");
    let b = g.input("b");
    let m = g.matmul(a, b);
    let graph = g.finish();
    let p = Params::zeros_for(&graph);
    let av = t(&[2, 3], &[1.0; 6]);
    let bv = t(&[2, 1], &[1.0; 2]);
    match graph.evaluate(&p, &[("a", &av), ("b", &bv)], m) {
        Err(GradError::ShapeMismatch { node, op, .. }) => {
            assert_eq!(node, m.0);
            assert_eq!(op, "matmul");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_finite_intermediate_is_rejected() {
    let mut g = GraphBuilder::<f64>::new();
    let a = g.input("a");
    let l = g.log(a);
    let graph = g.finish();
    let p = Params::zeros_for(&graph);
    let av = t(&[2], &[1.0, -1.0]);
    assert!(matches!(
        graph.evaluate(&p, &[("a", &av)], l),
        Err(GradError::NonFinite { op: "log", .. })
    ));
}

#[test]
fn unbound_input_and_non_scalar_seed_are_rejected() {
    let mut g = GraphBuilder::<f64>::new();
    let a = g.input("a");
    let b = g.input("b");
    let s = g.add(a, b);
    let graph = g.finish();
    let p = Params::zeros_for(&graph);
    let av = t(&[2], &[1.0, 2.0]);
    assert!(matches!(
        graph.evaluate(&p, &[("a", &av)], s),
        Err(GradError::UnboundInput(_))
    ));
    let e = graph.evaluate(&p, &[("a", &av), ("b", &av)], s).unwrap();
    assert!(matches!(
        e.backward(&Wrt::input("a"), None),
        Err(GradError::NonScalarOutput { .. })
    ));
    let seed = t(&[2], &[1.0, -1.0]);
    let gr = e.backward(&Wrt::input("a"), Some(&seed)).unwrap();
    assert_eq!(gr.input("a").unwrap().data(), &[1.0, -1.0]);
}

#[test]
fn evaluate_is_pure_and_graph_is_shareable_across_threads() {
    let mut g = GraphBuilder::<f64>::new();
    let x = g.input("x");
    let w = g.param("w", &[4, 2, 3]);
    let c = g.conv1d(x, w, 1, 2, Padding::Same);
    let c = g.tanh(c);
    let out = g.mean(c);
    let graph = g.finish();
    let mut p = Params::zeros_for(&graph);
    p.tensors[0] = Tensor::new(vec![4, 2, 3], (0..24).map(|i| (i as f64 * 0.37).sin()).collect())
        .unwrap();
    let xv = Tensor::new(vec![3, 2, 10], (0..60).map(|i| (i as f64 * 0.11).cos()).collect())
        .unwrap();
    let a = graph.evaluate(&p, &[("x", &xv)], out).unwrap().into_output();
    let b = graph.evaluate(&p, &[("x", &xv)], out).unwrap().into_output();
    assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());

    let results: Vec<f64> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..4)
            .map(|_| s.spawn(|| graph.evaluate(&p, &[("x", &xv)], out).unwrap().output().data()[0]))
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(results.iter().all(|v| v.to_bits() == a.data()[0].to_bits()));
}

#[test]
fn single_precision_graphs_work() {
    let mut g = GraphBuilder::<f32>::new();
    let x = g.input("x");
    let sq = g.mul(x, x);
    let s = g.sum(sq);
    let graph: Graph32 = g.finish();
    let p = Params::zeros_for(&graph);
    let xv = Tensor32::new(vec![2], vec![1.5, -0.5]).unwrap();
    let e = graph.evaluate(&p, &[("x", &xv)], s).unwrap();
    assert_eq!(e.output().data(), &[2.5f32]);
    let gr = e.backward(&Wrt::input("x"), None).unwrap();
    assert_eq!(gr.input("x").unwrap().data(), &[3.0f32, -1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Gradient of a batch-summed loss equals the per-sample gradients.
    #[test]
    fn batch_gradient_is_sum_of_sample_gradients(
        xs in proptest::collection::vec(-2.0f64..2.0, 3 * 2 * 6),
        ws in proptest::collection::vec(-1.0f64..1.0, 3 * 2 * 3),
    ) {
        let mut g = GraphBuilder::<f64>::new();
        let x = g.input("x");
        let w = g.param("w", &[3, 2, 3]);
        let c = g.conv1d(x, w, 1, 1, Padding::Same);
        let c = g.sigmoid(c);
        let out = g.sum(c);
        let graph = g.finish();
        let mut p = Params::zeros_for(&graph);
        p.tensors[0] = Tensor::new(vec![3, 2, 3], ws).unwrap();
        let xb = Tensor::new(vec![3, 2, 6], xs).unwrap();
        let wrt = Wrt::params(graph.all_params());
        let full = graph.evaluate(&p, &[("x", &xb)], out).unwrap().backward(&wrt, None).unwrap();
        let mut acc = Tensor::zeros(&[3, 2, 3]);
        for i in 0..3 {
            let xi = xb.select_batch(&[i]);
            let gi = graph.evaluate(&p, &[("x", &xi)], out).unwrap().backward(&wrt, None).unwrap();
            acc.axpy(1.0, &gi.params[&csi_grad::ParamId(0)]);
        }
        let f = &full.params[&csi_grad::ParamId(0)];
        for (a, b) in f.data().iter().zip(acc.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}

//! Central-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, NodeId, ParamId, Params, Wrt};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Leaf whose gradient is probed.
#[derive(Clone, Debug)]
pub enum Probe {
    Input(String),
    Param(ParamId),
}

/// Compares reverse-mode gradients of a scalar `output` against central
/// differences and returns the largest elementwise relative error, using
/// `max(|a|, |b|, 1e-8)` as the denominator.
pub fn finite_diff_check<S: Real>(
    graph: &Graph<S>,
    params: &Params<S>,
    inputs: &[(&str, &Tensor<S>)],
    output: NodeId,
    probe: &Probe,
    epsilon: S,
) -> Result<S> {
    finite_diff_check_at(graph, params, inputs, output, probe, epsilon, None)
}

/// Like [`finite_diff_check`], restricted to the given flat indices of the
/// probed leaf. Useful when a full sweep over a large tensor is too slow.
pub fn finite_diff_check_at<S: Real>(
    graph: &Graph<S>,
    params: &Params<S>,
    inputs: &[(&str, &Tensor<S>)],
    output: NodeId,
    probe: &Probe,
    epsilon: S,
    indices: Option<&[usize]>,
) -> Result<S> {
    let eval = graph.evaluate(params, inputs, output)?;
    let wrt = match probe {
        Probe::Input(name) => Wrt::input(name),
        Probe::Param(p) => Wrt::params([*p]),
    };
    let grads = eval.backward(&wrt, None)?;
    let analytic = match probe {
        Probe::Input(name) => grads.inputs[name].clone(),
        Probe::Param(p) => grads.params[p].clone(),
    };
    drop(eval);

    let mut params = params.clone();
    let mut owned: Vec<(String, Tensor<S>)> = inputs
        .iter()
        .map(|(n, t)| (n.to_string(), (*t).clone()))
        .collect();

    let floor = S::lit(1e-8);
    let two = S::lit(2.0);
    let mut worst = S::zero();
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..analytic.len()).collect();
            &all
        }
    };
    for &i in indices {
        let mut f_at = |delta: S| -> Result<S> {
            {
                let slot = match probe {
                    Probe::Input(name) => {
                        &mut owned.iter_mut().find(|(n, _)| n == name).expect("probed input bound").1
                    }
                    Probe::Param(p) => &mut params.tensors[p.0],
                };
                slot.data_mut()[i] += delta;
            }
            let bound: Vec<(&str, &Tensor<S>)> =
                owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
            let v = graph.evaluate(&params, &bound, output)?.output().data()[0];
            Ok(v)
        };
        let up = f_at(epsilon)?;
        let down = f_at(-two * epsilon)?;
        f_at(epsilon)?;
        let numeric = (up - down) / (two * epsilon);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let err = (a - numeric).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

//! Static dataflow graphs with per-call activation workspaces.
//!
//! A [`Graph`] is built once through [`GraphBuilder`] and never mutated
//! afterwards. Parameter values live outside the graph in a [`Params`] store,
//! so one graph can be evaluated concurrently against the same parameters
//! while training owns the only mutable handle to the store.
//!
//! Shapes are resolved at evaluation time: every op is polymorphic in the
//! leading (batch) dimension.

use std::collections::HashMap;

use crate::error::{GradError, Result};
use crate::ops;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Zero-padding policy for 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output length `ceil(T / stride)`, padding split left/right.
    Same,
    /// No padding.
    Valid,
    /// All padding on the left; output length `ceil(T / stride)`.
    Causal,
}

#[derive(Clone, Debug)]
pub enum Op<S: Real> {
    Input(String),
    Param(ParamId),
    Const(Tensor<S>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    /// `x (B, C, ..) + b (C)`
    BiasAdd(NodeId, NodeId),
    /// `(M, K) x (K, N)`
    MatMul(NodeId, NodeId),
    /// `x (B, Cin, T)`, `w (Cout, Cin, W)`
    Conv1d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        dilation: usize,
        padding: Padding,
    },
    /// Gated recurrent update; gate blocks ordered reset, update, candidate.
    GruCell {
        x: NodeId,
        h: NodeId,
        w_ih: NodeId,
        w_hh: NodeId,
        b_ih: NodeId,
        b_hh: NodeId,
    },
    AvgPool1d(NodeId, usize),
    MaxPool1d(NodeId, usize),
    /// `(B, C, T) -> (B, C)`
    GlobalAvgPool(NodeId),
    /// Repeats every time step `factor` times.
    Upsample1d(NodeId, usize),
    /// Keeps the leading dimension, reinterprets the rest.
    Reshape(NodeId, Vec<usize>),
    /// `(B, C, T) -> (B, C)` at one time index.
    SliceTime(NodeId, usize),
    /// `n x (B, C) -> (B, C, n)`
    StackTime(Vec<NodeId>),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Softmax over the last axis.
    Softmax(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Elementwise `(a - b)^2`.
    SquaredError(NodeId, NodeId),
    /// Per-row `-sum_c t_c log softmax(l)_c`, output `(B)`.
    CrossEntropy { logits: NodeId, target: NodeId },
    /// Per-row `KL(softmax(p) || softmax(q))`, output `(B)`.
    KlSoftmax { p: NodeId, q: NodeId },
}

impl<S: Real> Op<S> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::BiasAdd(..) => "bias_add",
            Op::MatMul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::GruCell { .. } => "gru_cell",
            Op::AvgPool1d(..) => "avg_pool1d",
            Op::MaxPool1d(..) => "max_pool1d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Upsample1d(..) => "upsample1d",
            Op::Reshape(..) => "reshape",
            Op::SliceTime(..) => "slice_time",
            Op::StackTime(_) => "stack_time",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SquaredError(..) => "squared_error",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlSoftmax { .. } => "kl_softmax",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::BiasAdd(a, b)
            | Op::MatMul(a, b)
            | Op::SquaredError(a, b) => vec![*a, *b],
            Op::Conv1d { x, w, .. } => vec![*x, *w],
            Op::GruCell {
                x,
                h,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
            } => vec![*x, *h, *w_ih, *w_hh, *b_ih, *b_hh],
            Op::Scale(a, _)
            | Op::AvgPool1d(a, _)
            | Op::MaxPool1d(a, _)
            | Op::GlobalAvgPool(a)
            | Op::Upsample1d(a, _)
            | Op::Reshape(a, _)
            | Op::SliceTime(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::StackTime(v) => v.clone(),
            Op::CrossEntropy { logits, target } => vec![*logits, *target],
            Op::KlSoftmax { p, q } => vec![*p, *q],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Immutable, topologically ordered dataflow graph.
#[derive(Clone, Debug)]
pub struct Graph<S: Real = f64> {
    nodes: Vec<Op<S>>,
    params: Vec<ParamDecl>,
    param_nodes: Vec<NodeId>,
    inputs: HashMap<String, NodeId>,
}

/// Appends nodes in topological order; every constructor only accepts
/// already-existing node ids, so the result is acyclic by construction.
#[derive(Debug)]
pub struct GraphBuilder<S: Real = f64> {
    graph: Graph<S>,
}

impl<S: Real> Default for GraphBuilder<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> GraphBuilder<S> {
    pub fn new() -> Self {
        Self {
            graph: Graph {
                nodes: Vec::new(),
                params: Vec::new(),
                param_nodes: Vec::new(),
                inputs: HashMap::new(),
            },
        }
    }

    fn push(&mut self, op: Op<S>) -> NodeId {
        for i in op.inputs() {
            assert!(i.0 < self.graph.nodes.len(), "node {} does not exist", i.0);
        }
        self.graph.nodes.push(op);
        NodeId(self.graph.nodes.len() - 1)
    }

    /// Named free input. Declaring the same name twice returns the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.graph.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.graph.inputs.insert(name.to_string(), id);
        id
    }

    /// Declares a parameter slot and returns its node.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let pid = ParamId(self.graph.params.len());
        self.graph.params.push(ParamDecl {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
        let id = self.push(Op::Param(pid));
        self.graph.param_nodes.push(id);
        id
    }

    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Const(t))
    }

    pub fn op(&mut self, op: Op<S>) -> NodeId {
        assert!(
            !matches!(op, Op::Input(_) | Op::Param(_)),
            "use input()/param() for leaves"
        );
        self.push(op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, k: S) -> NodeId {
        self.op(Op::Scale(a, k))
    }
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> NodeId {
        self.op(Op::BiasAdd(x, b))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::MatMul(a, b))
    }
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> NodeId {
        assert!(stride >= 1 && dilation >= 1);
        self.op(Op::Conv1d {
            x,
            w,
            stride,
            dilation,
            padding,
        })
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.op(Op::Relu(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.op(Op::Sigmoid(a))
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.op(Op::Tanh(a))
    }
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.op(Op::Softmax(a))
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.op(Op::Log(a))
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.op(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.op(Op::Mean(a))
    }
    pub fn reshape(&mut self, a: NodeId, tail: &[usize]) -> NodeId {
        self.op(Op::Reshape(a, tail.to_vec()))
    }

    pub fn finish(self) -> Graph<S> {
        self.graph
    }

    /// Number of nodes appended so far.
    pub fn len(&self) -> usize {
        self.graph.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.nodes.is_empty()
    }
}

/// Parameter values for a graph, with per-slot trainable flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S: Real = f64> {
    pub tensors: Vec<Tensor<S>>,
    pub trainable: Vec<bool>,
}

impl<S: Real> Params<S> {
    pub fn zeros_for(graph: &Graph<S>) -> Self {
        Self {
            tensors: graph
                .param_decls()
                .iter()
                .map(|d| Tensor::zeros(&d.shape))
                .collect(),
            trainable: vec![true; graph.param_decls().len()],
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of scalars in trainable slots.
    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(t, _)| t.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Which leaves a backward pass must produce gradients for.
#[derive(Clone, Debug, Default)]
pub struct Wrt {
    pub inputs: Vec<String>,
    pub params: Vec<ParamId>,
}

impl Wrt {
    pub fn input(name: &str) -> Self {
        Self {
            inputs: vec![name.to_string()],
            params: vec![],
        }
    }

    pub fn params(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Self {
            inputs: vec![],
            params: ids.into_iter().collect(),
        }
    }
}

/// Gradients keyed by input name and parameter slot.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S: Real = f64> {
    pub inputs: HashMap<String, Tensor<S>>,
    pub params: HashMap<ParamId, Tensor<S>>,
}

impl<S: Real> Gradients<S> {
    pub fn input(&self, name: &str) -> Option<&Tensor<S>> {
        self.inputs.get(name)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id)
    }
}

impl<S: Real> Graph<S> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op<S> {
        &self.nodes[id.0]
    }

    pub fn param_decls(&self) -> &[ParamDecl] {
        &self.params
    }

    pub fn param_node(&self, id: ParamId) -> NodeId {
        self.param_nodes[id.0]
    }

    pub fn input_node(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(|s| s.as_str())
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    /// Validates a parameter store against the declared slots.
    pub fn check_params(&self, params: &Params<S>) -> Result<()> {
        if params.tensors.len() != self.params.len() {
            return Err(GradError::ParamCount {
                expected: self.params.len(),
                found: params.tensors.len(),
            });
        }
        for (i, (decl, t)) in self.params.iter().zip(&params.tensors).enumerate() {
            if decl.shape != t.shape() {
                return Err(GradError::ParamShape {
                    index: i,
                    expected: decl.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn ancestors(&self, output: NodeId) -> Vec<bool> {
        let mut live = vec![false; self.nodes.len()];
        live[output.0] = true;
        for i in (0..=output.0).rev() {
            if live[i] {
                for j in self.nodes[i].inputs() {
                    live[j.0] = true;
                }
            }
        }
        live
    }

    /// Forward pass computing `output` and every node it depends on.
    pub fn evaluate<'a>(
        &'a self,
        params: &'a Params<S>,
        inputs: &[(&str, &'a Tensor<S>)],
        output: NodeId,
    ) -> Result<Evaluation<'a, S>> {
        self.check_params(params)?;
        let live = self.ancestors(output);
        let mut bound: Vec<Option<&'a Tensor<S>>> = vec![None; self.nodes.len()];
        for (name, t) in inputs {
            let id = self
                .inputs
                .get(*name)
                .ok_or_else(|| GradError::UnknownInput(name.to_string()))?;
            bound[id.0] = Some(*t);
        }
        let mut eval = Evaluation {
            graph: self,
            params,
            bound,
            values: vec![None; self.nodes.len()],
            output,
        };
        for i in 0..=output.0 {
            if !live[i] {
                continue;
            }
            let op = &self.nodes[i];
            match op {
                Op::Input(name) => {
                    if eval.bound[i].is_none() {
                        return Err(GradError::UnboundInput(name.clone()));
                    }
                }
                Op::Param(_) | Op::Const(_) => {}
                _ => {
                    let args: Vec<&Tensor<S>> =
                        op.inputs().iter().map(|j| eval.value(*j)).collect();
                    let out = ops::forward(op, &args).map_err(|detail| {
                        GradError::ShapeMismatch {
                            node: i,
                            op: op.name(),
                            detail,
                        }
                    })?;
                    if !out.all_finite() {
                        return Err(GradError::NonFinite {
                            node: i,
                            op: op.name(),
                        });
                    }
                    eval.values[i] = Some(out);
                }
            }
        }
        Ok(eval)
    }
}

/// Activations of one forward pass. Owns its workspace; the graph and the
/// parameter store are only borrowed.
#[derive(Debug)]
pub struct Evaluation<'a, S: Real = f64> {
    graph: &'a Graph<S>,
    params: &'a Params<S>,
    bound: Vec<Option<&'a Tensor<S>>>,
    values: Vec<Option<Tensor<S>>>,
    output: NodeId,
}

impl<'a, S: Real> Evaluation<'a, S> {
    fn value(&self, id: NodeId) -> &Tensor<S> {
        match &self.graph.nodes[id.0] {
            Op::Param(p) => &self.params.tensors[p.0],
            Op::Input(_) => self.bound[id.0].expect("input bound"),
            Op::Const(t) => t,
            _ => self.values[id.0].as_ref().expect("node evaluated"),
        }
    }

    /// Value of any node computed during this pass.
    pub fn get(&self, id: NodeId) -> Result<&Tensor<S>> {
        let evaluated = match &self.graph.nodes[id.0] {
            Op::Input(_) => self.bound[id.0].is_some(),
            Op::Param(_) | Op::Const(_) => true,
            _ => self.values[id.0].is_some(),
        };
        if evaluated {
            Ok(self.value(id))
        } else {
            Err(GradError::NotEvaluated { node: id.0 })
        }
    }

    pub fn output(&self) -> &Tensor<S> {
        self.value(self.output)
    }

    pub fn into_output(mut self) -> Tensor<S> {
        let id = self.output;
        match self.values[id.0].take() {
            Some(t) => t,
            None => self.value(id).clone(),
        }
    }

    /// Reverse pass from the designated output.
    ///
    /// `seed` may be omitted only for single-element outputs. Requested leaves
    /// that the output does not depend on receive zero gradients.
    pub fn backward(&self, wrt: &Wrt, seed: Option<&Tensor<S>>) -> Result<Gradients<S>> {
        let graph = self.graph;
        let out_val = self.value(self.output);
        let seed = match seed {
            Some(s) => {
                if s.shape() != out_val.shape() {
                    return Err(GradError::SeedShape {
                        seed: s.shape().to_vec(),
                        output: out_val.shape().to_vec(),
                    });
                }
                s.clone()
            }
            None => {
                if out_val.len() != 1 {
                    return Err(GradError::NonScalarOutput {
                        shape: out_val.shape().to_vec(),
                    });
                }
                Tensor::full(out_val.shape(), S::one())
            }
        };

        let n = self.output.0 + 1;
        let mut needs = vec![false; n];
        for name in &wrt.inputs {
            match graph.inputs.get(name) {
                Some(id) if id.0 < n => needs[id.0] = true,
                Some(_) => {}
                None => return Err(GradError::UnknownInput(name.clone())),
            }
        }
        for p in &wrt.params {
            let id = graph.param_nodes[p.0];
            if id.0 < n {
                needs[id.0] = true;
            }
        }
        for i in 0..n {
            if !needs[i] && graph.nodes[i].inputs().iter().any(|j| needs[j.0]) {
                needs[i] = true;
            }
        }

        let mut grads: Vec<Option<Tensor<S>>> = vec![None; n];
        grads[self.output.0] = Some(seed);
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let op = &graph.nodes[i];
            let ins = op.inputs();
            if ins.is_empty() {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let args: Vec<&Tensor<S>> = ins.iter().map(|j| self.value(*j)).collect();
            let want: Vec<bool> = ins.iter().map(|j| needs[j.0]).collect();
            let y = self.values[i].as_ref().expect("node evaluated");
            let dins = ops::backward(op, &args, y, &dy, &want);
            for ((j, w), g) in ins.iter().zip(&want).zip(dins) {
                if !*w {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[j.0] {
                    Some(acc) => acc.axpy(S::one(), &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut out = Gradients::default();
        for name in &wrt.inputs {
            let id = graph.inputs[name];
            let g = if id.0 < n { grads[id.0].take() } else { None };
            let g = g.unwrap_or_else(|| {
                Tensor::zeros(self.bound[id.0].map(|t| t.shape()).unwrap_or(&[1]))
            });
            out.inputs.insert(name.clone(), g);
        }
        for p in &wrt.params {
            let id = graph.param_nodes[p.0];
            let g = if id.0 < n { grads[id.0].take() } else { None };
            let g = g.unwrap_or_else(|| Tensor::zeros(self.params.tensors[p.0].shape()));
            out.params.insert(*p, g);
        }
        Ok(out)
    }
}

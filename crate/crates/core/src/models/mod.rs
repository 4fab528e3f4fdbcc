//! Classifier zoo and training loops.
//!
//! Every model consumes `(B, A, K, T)` amplitudes, folds antennas and
//! subcarriers into channels and runs a 1-D network over packets. The graph
//! holds two applications of the same network (inputs `x` and `x2`) so one
//! compiled graph serves clean training, adversarial training, TRADES and
//! every attack.

mod checkpoint;
mod train;
mod tiny;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use tiny::{finetune_head, pretrain_autoencoder, Autoencoder, PretrainReport};
pub use train::{
    clean_step, clean_validation, clip_grad_norm, loop_config, loss_and_accuracy, train_clean,
    train_epochs, Adam, EarlyStopping, EpochStats, History, LoopConfig, ReduceOnPlateau, StepFn,
    StepOut, TrainHyper, ValFn, ValOut,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use csi_grad::{Graph, GraphBuilder, NodeId, Op, Padding, ParamId, Params, Wrt};
use rand::Rng as _;

use crate::data::Dims;
use crate::error::{CsiError, Result};
use crate::rng;
use crate::Tensor;

pub const INPUT_X: &str = "x";
pub const INPUT_X2: &str = "x2";
pub const INPUT_TARGET: &str = "target";

/// Rows per forward pass during inference.
const INFER_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    LargeCnn,
    LargeGru,
    TinyTcnHead,
    TinyGruHead,
    /// Single affine layer; used for closed-form checks.
    Linear,
}

impl Family {
    pub fn is_tiny(self) -> bool {
        matches!(self, Self::TinyTcnHead | Self::TinyGruHead)
    }

    /// Capacity class used to tag transfer pairs.
    pub fn group(self) -> &'static str {
        match self {
            Self::LargeCnn | Self::LargeGru => "large",
            Self::TinyTcnHead | Self::TinyGruHead => "tiny",
            Self::Linear => "linear",
        }
    }
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "large-cnn" => Self::LargeCnn,
            "large-gru" => Self::LargeGru,
            "tiny-tcn-head" => Self::TinyTcnHead,
            "tiny-gru-head" => Self::TinyGruHead,
            "linear" => Self::Linear,
            _ => {
                return Err(format!(
                    "unknown family `{s}` (large-cnn|large-gru|tiny-tcn-head|tiny-gru-head|linear)"
                ))
            }
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LargeCnn => "large-cnn",
            Self::LargeGru => "large-gru",
            Self::TinyTcnHead => "tiny-tcn-head",
            Self::TinyGruHead => "tiny-gru-head",
            Self::Linear => "linear",
        })
    }
}

/// Architecture and input description.
///
/// `width` is the base convolution width (large CNN, tiny encoder),
/// `hidden` the dense or recurrent width of the classifier part.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub family: Family,
    pub dims: Dims,
    pub n_classes: usize,
    pub width: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    /// Temporal down-sampling of the tiny encoder; 0 picks the largest of
    /// 4, 2, 1 dividing `T`.
    pub time_pool: usize,
    pub seed: u64,
}

/// Pooling stages of the large CNN.
pub const CNN_BLOCKS: usize = 5;

impl ModelSpec {
    pub fn new(name: &str, family: Family, dims: Dims, n_classes: usize) -> Self {
        let (width, hidden) = match family {
            Family::LargeCnn => (64, 128),
            Family::LargeGru => (0, 128),
            Family::TinyTcnHead | Family::TinyGruHead => (32, 16),
            Family::Linear => (0, 0),
        };
        Self {
            name: name.to_string(),
            family,
            dims,
            n_classes,
            width,
            hidden,
            latent_dim: if family.is_tiny() { 16 } else { 0 },
            time_pool: 0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Resolved temporal pooling of the tiny encoder.
    pub fn pool(&self) -> usize {
        if self.time_pool > 0 {
            return self.time_pool;
        }
        [4, 2, 1]
            .into_iter()
            .find(|p| self.dims.packets % p == 0)
            .unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.n_classes < 2 {
            return Err(CsiError::invalid("n_classes", "need at least 2 classes"));
        }
        let t = self.dims.packets;
        match self.family {
            Family::LargeCnn => {
                if self.width == 0 || self.hidden == 0 {
                    return Err(CsiError::invalid("width/hidden", "must be positive"));
                }
                let min_t = 1 << CNN_BLOCKS;
                if t < min_t {
                    return Err(CsiError::DimsTooSmall(format!(
                        "large-cnn needs at least {min_t} packets ({} pooling stages), got T={t}",
                        CNN_BLOCKS
                    )));
                }
            }
            Family::LargeGru => {
                if self.hidden == 0 {
                    return Err(CsiError::invalid("hidden", "must be positive"));
                }
            }
            Family::TinyTcnHead | Family::TinyGruHead => {
                if self.width == 0 || self.hidden == 0 || self.latent_dim == 0 {
                    return Err(CsiError::invalid("width/hidden/latent_dim", "must be positive"));
                }
                let p = self.pool();
                if t % p != 0 {
                    return Err(CsiError::invalid(
                        "time_pool",
                        format!("{p} does not divide T={t}"),
                    ));
                }
                if t / p < 3 {
                    return Err(CsiError::DimsTooSmall(format!(
                        "tiny encoder needs at least {} packets for pool {p}, got T={t}",
                        3 * p
                    )));
                }
                if self.latent_dim * (t / p) >= self.dims.len() {
                    return Err(CsiError::invalid(
                        "latent_dim",
                        format!(
                            "latent size {}x{} is not smaller than the input {}",
                            self.latent_dim,
                            t / p,
                            self.dims.len()
                        ),
                    ));
                }
            }
            Family::Linear => {}
        }
        Ok(())
    }

    /// `key=value` pairs in a fixed order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("name", self.name.clone()),
            ("family", self.family.to_string()),
            ("antennas", self.dims.antennas.to_string()),
            ("subcarriers", self.dims.subcarriers.to_string()),
            ("packets", self.dims.packets.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("width", self.width.to_string()),
            ("hidden", self.hidden.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("time_pool", self.time_pool.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(kv: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
            kv.get(k)
                .map(|s| s.as_str())
                .ok_or_else(|| CsiError::invalid(k, "missing"))
        }
        fn num<T: FromStr>(kv: &BTreeMap<String, String>, k: &str) -> Result<T> {
            get(kv, k)?
                .parse()
                .map_err(|_| CsiError::invalid(k, "not a number"))
        }
        Ok(Self {
            name: get(kv, "name")?.to_string(),
            family: get(kv, "family")?
                .parse()
                .map_err(|e: String| CsiError::invalid("family", e))?,
            dims: Dims::new(num(kv, "antennas")?, num(kv, "subcarriers")?, num(kv, "packets")?),
            n_classes: num(kv, "n_classes")?,
            width: num(kv, "width")?,
            hidden: num(kv, "hidden")?,
            latent_dim: num(kv, "latent_dim")?,
            time_pool: num(kv, "time_pool")?,
            seed: num(kv, "seed")?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    HeUniform(usize),
    Uniform(f64),
}

/// Graph builder that records how each parameter is initialized.
pub(crate) struct Net {
    pub(crate) b: GraphBuilder,
    inits: Vec<Init>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    w: NodeId,
    b: NodeId,
    dilation: usize,
    padding: Padding,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    w: NodeId,
    b: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Gru {
    w_ih: NodeId,
    w_hh: NodeId,
    b_ih: NodeId,
    b_hh: NodeId,
    input: usize,
    hidden: usize,
}

impl Net {
    pub(crate) fn new() -> Self {
        Self {
            b: GraphBuilder::new(),
            inits: Vec::new(),
        }
    }

    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> NodeId {
        self.inits.push(init);
        self.b.param(name, shape)
    }

    pub(crate) fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        dilation: usize,
        padding: Padding,
    ) -> Conv {
        Conv {
            w: self.param(&format!("{name}.w"), &[cout, cin, k], Init::HeUniform(cin * k)),
            b: self.param(&format!("{name}.b"), &[cout], Init::Uniform(0.0)),
            dilation,
            padding,
        }
    }

    pub(crate) fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Dense {
        Dense {
            w: self.param(&format!("{name}.w"), &[fin, fout], Init::HeUniform(fin)),
            b: self.param(&format!("{name}.b"), &[fout], Init::Uniform(0.0)),
        }
    }

    pub(crate) fn gru(&mut self, name: &str, input: usize, hidden: usize) -> Gru {
        let bound = 1.0 / (hidden as f64).sqrt();
        Gru {
            w_ih: self.param(&format!("{name}.w_ih"), &[input, 3 * hidden], Init::Uniform(bound)),
            w_hh: self.param(&format!("{name}.w_hh"), &[hidden, 3 * hidden], Init::Uniform(bound)),
            b_ih: self.param(&format!("{name}.b_ih"), &[3 * hidden], Init::Uniform(bound)),
            b_hh: self.param(&format!("{name}.b_hh"), &[3 * hidden], Init::Uniform(bound)),
            input,
            hidden,
        }
    }

    pub(crate) fn apply_conv(&mut self, c: &Conv, x: NodeId) -> NodeId {
        let y = self.b.conv1d(x, c.w, 1, c.dilation, c.padding);
        self.b.bias_add(y, c.b)
    }

    pub(crate) fn apply_dense(&mut self, d: &Dense, x: NodeId) -> NodeId {
        let y = self.b.matmul(x, d.w);
        self.b.bias_add(y, d.b)
    }

    /// Runs the cell over `(B, I, T)` and returns the final hidden state.
    pub(crate) fn apply_gru(&mut self, g: &Gru, seq: NodeId, steps: usize) -> NodeId {
        let x0 = self.b.op(Op::SliceTime(seq, 0));
        // zero initial state with the batch size of the input
        let zeros = self.b.constant(Tensor::zeros(&[g.input, g.hidden]));
        let mut h = self.b.matmul(x0, zeros);
        for t in 0..steps {
            let xt = if t == 0 { x0 } else { self.b.op(Op::SliceTime(seq, t)) };
            h = self.b.op(Op::GruCell {
                x: xt,
                h,
                w_ih: g.w_ih,
                w_hh: g.w_hh,
                b_ih: g.b_ih,
                b_hh: g.b_hh,
            });
        }
        h
    }

    /// Deterministic parameter values for `seed`.
    pub(crate) fn init_params(&self, graph: &Graph, seed: u64) -> Params {
        let mut params = Params::zeros_for(graph);
        for (i, (t, init)) in params.tensors.iter_mut().zip(&self.inits).enumerate() {
            let bound = match *init {
                Init::HeUniform(fan_in) => (6.0 / fan_in as f64).sqrt(),
                Init::Uniform(b) => b,
            };
            if bound > 0.0 {
                let mut r = rng::stream(seed, "init", i as u64);
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = r.gen_range(-bound..=bound));
            }
        }
        params
    }
}

/// Causal dilated TCN encoder shared by the tiny classifier and the
/// autoencoder. Parameter names match in both graphs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Encoder {
    c1: Conv,
    c2: Conv,
    proj: Conv,
    pool: usize,
}

impl Encoder {
    pub(crate) fn declare(net: &mut Net, spec: &ModelSpec) -> Self {
        let ch = spec.dims.channels();
        Self {
            c1: net.conv("enc.c1", ch, spec.width, 3, 1, Padding::Causal),
            c2: net.conv("enc.c2", spec.width, spec.width, 3, 2, Padding::Causal),
            proj: net.conv("enc.proj", spec.width, spec.latent_dim, 1, 1, Padding::Same),
            pool: spec.pool(),
        }
    }

    /// `(B, A*K, T) -> (B, latent, T / pool)`
    pub(crate) fn apply(&self, net: &mut Net, x: NodeId) -> NodeId {
        let h = net.apply_conv(&self.c1, x);
        let h = net.b.relu(h);
        let h = net.apply_conv(&self.c2, h);
        let mut h = net.b.relu(h);
        if self.pool > 1 {
            h = net.b.op(Op::AvgPool1d(h, self.pool));
        }
        net.apply_conv(&self.proj, h)
    }
}

enum Body {
    Cnn { convs: Vec<Conv>, fc1: Dense, fc2: Dense, flat: usize },
    Gru { gru: Gru, out: Dense },
    Tiny { enc: Encoder, head: Head },
    Linear { out: Dense },
}

enum Head {
    Tcn { c1: Conv, c2: Conv, out: Dense },
    Gru { gru: Gru, out: Dense, steps: usize },
}

impl Body {
    fn declare(net: &mut Net, spec: &ModelSpec) -> Self {
        let ch = spec.dims.channels();
        let t = spec.dims.packets;
        let c = spec.n_classes;
        match spec.family {
            Family::LargeCnn => {
                let w = spec.width;
                let widths = [w, w, 2 * w, 2 * w, 2 * w];
                let mut cin = ch;
                let convs = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &cout)| {
                        let conv = net.conv(&format!("cnn.c{}", i + 1), cin, cout, 3, 1, Padding::Same);
                        cin = cout;
                        conv
                    })
                    .collect();
                let t_out = (0..CNN_BLOCKS).fold(t, |t, _| t / 2);
                let flat = cin * t_out;
                Body::Cnn {
                    convs,
                    fc1: net.dense("cnn.fc1", flat, spec.hidden),
                    fc2: net.dense("cnn.fc2", spec.hidden, c),
                    flat,
                }
            }
            Family::LargeGru => Body::Gru {
                gru: net.gru("gru", ch, spec.hidden),
                out: net.dense("gru.out", spec.hidden, c),
            },
            Family::TinyTcnHead | Family::TinyGruHead => {
                let enc = Encoder::declare(net, spec);
                let l = spec.latent_dim;
                let head = if spec.family == Family::TinyTcnHead {
                    Head::Tcn {
                        c1: net.conv("head.c1", l, spec.hidden, 3, 1, Padding::Causal),
                        c2: net.conv("head.c2", spec.hidden, spec.hidden, 3, 2, Padding::Causal),
                        out: net.dense("head.out", spec.hidden, c),
                    }
                } else {
                    Head::Gru {
                        gru: net.gru("head.gru", l, spec.hidden),
                        out: net.dense("head.out", spec.hidden, c),
                        steps: t / spec.pool(),
                    }
                };
                Body::Tiny { enc, head }
            }
            Family::Linear => Body::Linear {
                out: net.dense("linear", spec.dims.len(), c),
            },
        }
    }

    /// Logits `(B, C)` from the input node `(B, A, K, T)`.
    fn apply(&self, net: &mut Net, spec: &ModelSpec, x: NodeId) -> NodeId {
        let ch = spec.dims.channels();
        let t = spec.dims.packets;
        match self {
            Body::Cnn { convs, fc1, fc2, flat } => {
                let mut h = net.b.reshape(x, &[ch, t]);
                for c in convs {
                    h = net.apply_conv(c, h);
                    h = net.b.relu(h);
                    h = net.b.op(Op::MaxPool1d(h, 2));
                }
                let h = net.b.reshape(h, &[*flat]);
                let h = net.apply_dense(fc1, h);
                let h = net.b.relu(h);
                net.apply_dense(fc2, h)
            }
            Body::Gru { gru, out } => {
                let seq = net.b.reshape(x, &[ch, t]);
                let h = net.apply_gru(gru, seq, t);
                net.apply_dense(out, h)
            }
            Body::Tiny { enc, head } => {
                let seq = net.b.reshape(x, &[ch, t]);
                let z = enc.apply(net, seq);
                match head {
                    Head::Tcn { c1, c2, out } => {
                        let h = net.apply_conv(c1, z);
                        let h = net.b.relu(h);
                        let h = net.apply_conv(c2, h);
                        let h = net.b.relu(h);
                        let h = net.b.op(Op::GlobalAvgPool(h));
                        net.apply_dense(out, h)
                    }
                    Head::Gru { gru, out, steps } => {
                        let h = net.apply_gru(gru, z, *steps);
                        net.apply_dense(out, h)
                    }
                }
            }
            Body::Linear { out } => {
                let flat = net.b.reshape(x, &[spec.dims.len()]);
                net.apply_dense(out, flat)
            }
        }
    }
}

/// Named nodes of a classifier graph.
#[derive(Clone, Copy, Debug)]
pub struct Nodes {
    pub logits: NodeId,
    pub logits2: NodeId,
    pub ce_rows: NodeId,
    pub ce_mean: NodeId,
    pub ce_sum: NodeId,
    pub kl_rows: NodeId,
    pub kl_mean: NodeId,
    pub kl_sum: NodeId,
    /// `ce_mean + beta * kl_mean` when built for TRADES.
    pub trades: Option<NodeId>,
}

/// A classifier with its graph and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub graph: Graph,
    pub params: Params,
    pub nodes: Nodes,
}

/// Loss value and input gradient of a batch.
#[derive(Clone, Debug)]
pub struct InputGrad {
    pub loss_rows: Vec<f64>,
    pub logits: Tensor,
    pub grad: Tensor,
}

pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    Model::build(spec, None)
}

impl Model {
    /// Builds the graph and draws initial parameters from `spec.seed`.
    /// `trades_beta` adds the combined TRADES objective node.
    pub fn build(spec: &ModelSpec, trades_beta: Option<f64>) -> Result<Self> {
        spec.validate()?;
        let mut net = Net::new();
        let body = Body::declare(&mut net, spec);
        let x = net.b.input(INPUT_X);
        let x2 = net.b.input(INPUT_X2);
        let target = net.b.input(INPUT_TARGET);
        let logits = body.apply(&mut net, spec, x);
        let logits2 = body.apply(&mut net, spec, x2);
        let b = &mut net.b;
        let ce_rows = b.op(Op::CrossEntropy { logits, target });
        let ce_mean = b.mean(ce_rows);
        let ce_sum = b.sum(ce_rows);
        let kl_rows = b.op(Op::KlSoftmax { p: logits, q: logits2 });
        let kl_mean = b.mean(kl_rows);
        let kl_sum = b.sum(kl_rows);
        let trades = trades_beta.map(|beta| {
            let k = b.scale(kl_mean, beta);
            b.add(ce_mean, k)
        });
        let nodes = Nodes {
            logits,
            logits2,
            ce_rows,
            ce_mean,
            ce_sum,
            kl_rows,
            kl_mean,
            kl_sum,
            trades,
        };
        let graph = std::mem::take(&mut net.b).finish();
        let params = net.init_params(&graph, spec.seed);
        Ok(Self {
            spec: spec.clone(),
            graph,
            params,
            nodes,
        })
    }

    /// Same network rebuilt with a TRADES objective, keeping parameters.
    pub fn with_trades(&self, beta: f64) -> Result<Self> {
        let mut m = Self::build(&self.spec, Some(beta))?;
        m.params = self.params.clone();
        Ok(m)
    }

    /// Total parameter count of the classifier.
    pub fn capacity(&self) -> usize {
        self.params.total_count()
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.graph
            .param_decls()
            .iter()
            .position(|d| d.name == name)
            .map(ParamId)
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let d = self.spec.dims;
        if x.shape().len() != 4 || x.shape()[1..] != d.shape() {
            return Err(CsiError::invalid(
                "input",
                format!("expected (B, {}, {}, {}), got {:?}", d.antennas, d.subcarriers, d.packets, x.shape()),
            ));
        }
        Ok(())
    }

    /// Logits for a batch, evaluated in chunks.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let n = x.batch();
        let mut out = Vec::with_capacity(n * self.spec.n_classes);
        let mut start = 0;
        while start < n {
            let end = (start + INFER_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = x.select_batch(&idx);
            let ev = self
                .graph
                .evaluate(&self.params, &[(INPUT_X, &chunk)], self.nodes.logits)?;
            out.extend_from_slice(ev.output().data());
            start = end;
        }
        Ok(Tensor::new(vec![n, self.spec.n_classes], out)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    /// Per-row cross-entropy against `target` `(B, C)` and the gradient of
    /// its sum with respect to `x`.
    pub fn ce_input_grad(&self, x: &Tensor, target: &Tensor) -> Result<InputGrad> {
        self.check_input(x)?;
        let ev = self.graph.evaluate(
            &self.params,
            &[(INPUT_X, x), (INPUT_TARGET, target)],
            self.nodes.ce_sum,
        )?;
        let g = ev.backward(&Wrt::input(INPUT_X), None)?;
        Ok(InputGrad {
            loss_rows: ev.get(self.nodes.ce_rows)?.data().to_vec(),
            logits: ev.get(self.nodes.logits)?.clone(),
            grad: g.inputs[INPUT_X].clone(),
        })
    }

    /// Per-row `KL(f(clean) || f(adv))` and the gradient of its sum with
    /// respect to `adv`.
    pub fn kl_input_grad(&self, clean: &Tensor, adv: &Tensor) -> Result<InputGrad> {
        self.check_input(adv)?;
        let ev = self.graph.evaluate(
            &self.params,
            &[(INPUT_X, clean), (INPUT_X2, adv)],
            self.nodes.kl_sum,
        )?;
        let g = ev.backward(&Wrt::input(INPUT_X2), None)?;
        Ok(InputGrad {
            loss_rows: ev.get(self.nodes.kl_rows)?.data().to_vec(),
            logits: ev.get(self.nodes.logits2)?.clone(),
            grad: g.inputs[INPUT_X2].clone(),
        })
    }

    /// Logits and `d logits[:, c] / dx` for every class `c`.
    pub fn logit_jacobian(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_input(x)?;
        let ev = self
            .graph
            .evaluate(&self.params, &[(INPUT_X, x)], self.nodes.logits)?;
        let logits = ev.output().clone();
        let (b, c) = (x.batch(), self.spec.n_classes);
        let wrt = Wrt::input(INPUT_X);
        let mut jac = Vec::with_capacity(c);
        for k in 0..c {
            let mut seed = Tensor::zeros(&[b, c]);
            for i in 0..b {
                seed.data_mut()[i * c + k] = 1.0;
            }
            let g = ev.backward(&wrt, Some(&seed))?;
            jac.push(g.inputs[INPUT_X].clone());
        }
        Ok((logits, jac))
    }

    /// Value of a scalar loss node and its gradients for trainable slots.
    pub fn loss_and_param_grads(
        &self,
        node: NodeId,
        inputs: &[(&str, &Tensor)],
    ) -> Result<(f64, Vec<Option<Tensor>>, Option<Tensor>)> {
        let ev = self.graph.evaluate(&self.params, inputs, node)?;
        let loss = ev.output().data()[0];
        let ids: Vec<ParamId> = (0..self.params.len())
            .filter(|&i| self.params.trainable[i])
            .map(ParamId)
            .collect();
        let mut g = ev.backward(&Wrt::params(ids), None)?;
        let grads = (0..self.params.len())
            .map(|i| g.params.remove(&ParamId(i)))
            .collect();
        Ok((loss, grads, ev.get(self.nodes.logits).ok().cloned()))
    }
}

/// One-hot targets for labels.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Tensor {
    Tensor::one_hot(labels, n_classes)
}

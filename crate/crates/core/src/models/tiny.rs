//! Bottleneck autoencoder pretraining and two-phase head fine-tuning.

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::train::{
    clean_step, clean_validation, clip_grad_norm, diverged, train_epochs, Adam, History,
    LoopConfig, ReduceOnPlateau, TrainHyper,
};
use super::{Conv, Encoder, Family, Model, ModelSpec, Net};
use crate::data::{Dataset, DatasetSplit};
use crate::error::{CsiError, Result};
use crate::rng;
use crate::Tensor;
use csi_grad::{Graph, NodeId, Op, Padding, ParamId, Params, Wrt};

const IN_MASKED: &str = "x_in";
const IN_TARGET: &str = "x";
const IN_WEIGHT: &str = "mask_w";
const IN_PROBE_BASE: &str = "xc";
const IN_PROBE: &str = "xc_probe";

/// Masked span width as a fraction of the packet count.
const MASK_FRACTION: f64 = 0.1;
/// The contractive term runs on every `CONTRACTIVE_EVERY`-th step.
const CONTRACTIVE_EVERY: u64 = 4;
const CONTRACTIVE_SHARE: f64 = 0.5;
/// Finite-difference step of the Jacobian-vector product.
const PROBE_STEP: f64 = 1e-4;
const CLIP_NORM: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
pub struct AeNodes {
    pub latent: NodeId,
    pub recon: NodeId,
    pub recon_loss: NodeId,
    pub mse: NodeId,
    /// `||J v||^2` per probed sample, averaged.
    pub probe_norm: NodeId,
    pub total: NodeId,
}

/// Encoder-decoder pair whose encoder parameters share names with the tiny
/// classifier.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub spec: ModelSpec,
    pub graph: Graph,
    pub params: Params,
    pub nodes: AeNodes,
    pub lambda: f64,
}

struct Decoder {
    c1: Conv,
    c2: Conv,
    pool: usize,
}

impl Autoencoder {
    pub fn build(spec: &ModelSpec, lambda: f64) -> Result<Self> {
        if !spec.family.is_tiny() {
            return Err(CsiError::invalid(
                "family",
                format!("{} has no bottleneck encoder", spec.family),
            ));
        }
        spec.validate()?;
        let ch = spec.dims.channels();
        let [a, k, t] = spec.dims.shape();
        let mut net = Net::new();
        let enc = Encoder::declare(&mut net, spec);
        let dec = Decoder {
            c1: net.conv("dec.c1", spec.latent_dim, spec.width, 3, 1, Padding::Same),
            c2: net.conv("dec.c2", spec.width, ch, 3, 1, Padding::Same),
            pool: spec.pool(),
        };
        let x_in = net.b.input(IN_MASKED);
        let target = net.b.input(IN_TARGET);
        let weight = net.b.input(IN_WEIGHT);
        let seq = net.b.reshape(x_in, &[ch, t]);
        let latent = enc.apply(&mut net, seq);
        let mut h = latent;
        if dec.pool > 1 {
            h = net.b.op(Op::Upsample1d(h, dec.pool));
        }
        let h = net.apply_conv(&dec.c1, h);
        let h = net.b.relu(h);
        let h = net.apply_conv(&dec.c2, h);
        let recon = net.b.reshape(h, &[a, k, t]);
        let se = net.b.op(Op::SquaredError(recon, target));
        let mse = net.b.mean(se);
        let weighted = net.b.mul(se, weight);
        let masked = net.b.sum(weighted);
        let recon_loss = net.b.add(mse, masked);

        let base = net.b.input(IN_PROBE_BASE);
        let probe = net.b.input(IN_PROBE);
        let s0 = net.b.reshape(base, &[ch, t]);
        let s1 = net.b.reshape(probe, &[ch, t]);
        let z0 = enc.apply(&mut net, s0);
        let z1 = enc.apply(&mut net, s1);
        let dz = net.b.op(Op::SquaredError(z1, z0));
        let dz_mean = net.b.mean(dz);
        // mean over (sample, latent, time) times latent*time = per-sample sum
        let per_sample = (spec.latent_dim * (t / spec.pool())) as f64;
        let probe_norm = net.b.scale(dz_mean, per_sample / (PROBE_STEP * PROBE_STEP));
        let pen = net.b.scale(probe_norm, lambda);
        let total = net.b.add(recon_loss, pen);
        let nodes = AeNodes {
            latent,
            recon,
            recon_loss,
            mse,
            probe_norm,
            total,
        };
        let graph = std::mem::take(&mut net.b).finish();
        let params = net.init_params(&graph, spec.seed);
        Ok(Self {
            spec: spec.clone(),
            graph,
            params,
            nodes,
            lambda,
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self
            .graph
            .evaluate(&self.params, &[(IN_MASKED, x)], self.nodes.latent)?
            .into_output())
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self
            .graph
            .evaluate(&self.params, &[(IN_MASKED, x)], self.nodes.recon)?
            .into_output())
    }

    /// Mean per-sample `||z(x + h v) - z(x)||^2 / h^2`, the graph's
    /// stochastic estimate of the squared Frobenius norm of the encoder
    /// Jacobian for probe `v`.
    pub fn probe_norm(&self, x: &Tensor, v: &Tensor) -> Result<f64> {
        let shifted = x.zip_map(v, |a, b| a + PROBE_STEP * b);
        let ev = self.graph.evaluate(
            &self.params,
            &[(IN_PROBE_BASE, x), (IN_PROBE, &shifted)],
            self.nodes.probe_norm,
        )?;
        Ok(ev.output().data()[0])
    }

    /// Plain reconstruction MSE over a dataset.
    pub fn mse(&self, data: &Dataset) -> Result<f64> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(128) {
            let x = data.batch(chunk);
            let r = self.reconstruct(&x)?;
            total += r.sub(&x).data().iter().map(|v| v * v).sum::<f64>();
        }
        Ok(total / (data.len() * data.dims.len()).max(1) as f64)
    }
}

/// Weight of the masked-region term at training progress `p in [0, 1]`.
pub fn mask_focus(progress: f64, fraction: f64) -> f64 {
    if fraction <= 0.0 {
        return 0.0;
    }
    (1.0 - progress / fraction).max(0.0)
}

/// Zeroes one random contiguous span of packets per sample; returns the
/// masked input and the 0/1 mask.
fn mask_batch(x: &Tensor, packets: usize, r: &mut rng::Rng) -> (Tensor, Tensor) {
    let width = ((packets as f64 * MASK_FRACTION).round() as usize).clamp(1, packets);
    let mut masked = x.clone();
    let mut mask = Tensor::zeros(x.shape());
    let row = x.row_len();
    for b in 0..x.batch() {
        let start = r.gen_range(0..=packets - width);
        let xs = &mut masked.data_mut()[b * row..(b + 1) * row];
        let ms = &mut mask.data_mut()[b * row..(b + 1) * row];
        for (xc, mc) in xs.chunks_mut(packets).zip(ms.chunks_mut(packets)) {
            xc[start..start + width].iter_mut().for_each(|v| *v = 0.0);
            mc[start..start + width].iter_mut().for_each(|v| *v = 1.0);
        }
    }
    (masked, mask)
}

fn rademacher(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub train_loss: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub best_epoch: usize,
}

/// Masked reconstruction pretraining with a contractive penalty and
/// gradient clipping. Keeps the parameters of the best validation MSE.
pub fn pretrain_autoencoder(
    ae: &mut Autoencoder,
    split: &DatasetSplit,
    hyper: &TrainHyper,
) -> Result<PretrainReport> {
    hyper.validate()?;
    let train = &split.train;
    if train.is_empty() {
        return Err(CsiError::invalid("train", "empty training set"));
    }
    let packets = ae.spec.dims.packets;
    let epochs = hyper.pretrain_epochs.max(1);
    let per_epoch = train.len().div_ceil(hyper.batch_size);
    let total_steps = (epochs * per_epoch) as f64;
    let ids: Vec<ParamId> = ae.graph.all_params();
    let lr = vec![hyper.lr; ids.len()];
    let mut adam = Adam::new(&ae.params, hyper.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = PretrainReport::default();
    let mut best = (f64::INFINITY, ae.params.clone());
    let mut step = 0u64;
    let mut r = rng::stream(hyper.seed, "pretrain-mask", 0);
    for epoch in 1..=epochs {
        order.shuffle(&mut rng::stream(hyper.seed, "pretrain-shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let x = train.batch(chunk);
            let (x_in, mask) = mask_batch(&x, packets, &mut r);
            let n_masked = mask.sum().max(1.0);
            let focus = mask_focus(step as f64 / total_steps, hyper.mask_focus_fraction);
            let weight = mask.scale(focus / n_masked);
            let contractive = ae.lambda > 0.0 && step % CONTRACTIVE_EVERY == 0;
            let (loss, mut grads) = if contractive {
                let m = ((chunk.len() as f64 * CONTRACTIVE_SHARE).ceil() as usize).max(1);
                let mut pick: Vec<usize> = (0..chunk.len()).collect();
                pick.shuffle(&mut r);
                pick.truncate(m);
                pick.sort_unstable();
                let base = x.select_batch(&pick);
                let v = rademacher(base.shape(), &mut r);
                let probe = base.zip_map(&v, |a, b| a + PROBE_STEP * b);
                let inputs = [
                    (IN_MASKED, &x_in),
                    (IN_TARGET, &x),
                    (IN_WEIGHT, &weight),
                    (IN_PROBE_BASE, &base),
                    (IN_PROBE, &probe),
                ];
                grads_of(ae, ae.nodes.total, &inputs, &ids)
            } else {
                let inputs = [(IN_MASKED, &x_in), (IN_TARGET, &x), (IN_WEIGHT, &weight)];
                grads_of(ae, ae.nodes.recon_loss, &inputs, &ids)
            }
            .map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(CsiError::Diverged {
                    epoch,
                    detail: "reconstruction loss is not finite".into(),
                });
            }
            clip_grad_norm(&mut grads, CLIP_NORM);
            adam.step(&mut ae.params, &grads, &lr);
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        let val = if split.val.is_empty() { train } else { &split.val };
        let val_mse = ae.mse(val)?;
        debug!("pretrain epoch {epoch}: loss {:.5} val mse {val_mse:.5}", loss_sum / train.len() as f64);
        report.train_loss.push(loss_sum / train.len() as f64);
        report.val_mse.push(val_mse);
        if val_mse < best.0 {
            best = (val_mse, ae.params.clone());
            report.best_epoch = epoch;
        }
    }
    ae.params = best.1;
    Ok(report)
}

fn grads_of(
    ae: &Autoencoder,
    node: NodeId,
    inputs: &[(&str, &Tensor)],
    ids: &[ParamId],
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let ev = ae.graph.evaluate(&ae.params, inputs, node)?;
    let loss = ev.output().data()[0];
    let mut g = ev.backward(&Wrt::params(ids.iter().copied()), None)?;
    Ok((loss, ids.iter().map(|id| g.params.remove(id)).collect()))
}

/// Copies every encoder tensor of `ae` into `model` by name.
fn copy_encoder(model: &mut Model, ae: &Autoencoder) -> Result<Vec<usize>> {
    let mut slots = Vec::new();
    for (i, d) in ae.graph.param_decls().iter().enumerate() {
        if !d.name.starts_with("enc.") {
            continue;
        }
        let id = model.param_id(&d.name).ok_or_else(|| {
            CsiError::invalid("encoder", format!("classifier has no parameter {}", d.name))
        })?;
        if model.params.tensors[id.0].shape() != ae.params.tensors[i].shape() {
            return Err(CsiError::invalid(
                "encoder",
                format!("shape mismatch for {}", d.name),
            ));
        }
        model.params.tensors[id.0] = ae.params.tensors[i].clone();
        slots.push(id.0);
    }
    Ok(slots)
}

/// Phase A trains the head on a frozen pretrained encoder; phase B trains
/// everything with separate learning rates and plateau halving. Returns the
/// history of both phases.
pub fn finetune_head(
    model: &mut Model,
    ae: &Autoencoder,
    split: &DatasetSplit,
    hyper: &TrainHyper,
) -> Result<(History, History)> {
    hyper.validate()?;
    if !matches!(model.spec.family, Family::TinyTcnHead | Family::TinyGruHead) {
        return Err(CsiError::invalid("family", "fine-tuning needs a tiny classifier"));
    }
    if model.spec.latent_dim != ae.spec.latent_dim {
        return Err(CsiError::invalid(
            "latent_dim",
            format!(
                "head expects {} latent channels, encoder produces {}",
                model.spec.latent_dim, ae.spec.latent_dim
            ),
        ));
    }
    let enc_slots = copy_encoder(model, ae)?;
    let n = model.params.len();
    let is_enc = |i: usize| enc_slots.contains(&i);
    let mut step = |m: &Model, x: &Tensor, y: &[usize], _: u64| clean_step(m, x, y);

    for &i in &enc_slots {
        model.params.trainable[i] = false;
    }
    let a_cfg = LoopConfig {
        max_epochs: hyper.phase_a_epochs.max(1),
        min_epochs: hyper.phase_a_epochs.max(1),
        patience: 1,
        batch_size: hyper.batch_size,
        seed: hyper.seed,
        stage: "finetune-a".into(),
        lr: vec![hyper.head_lr; n],
        weight_decay: hyper.weight_decay,
        plateau: None,
        restore_best: false,
    };
    let mut val = clean_validation(&split.val);
    let phase_a = train_epochs(model, &split.train, &a_cfg, &mut step, &mut val)?;

    for &i in &enc_slots {
        model.params.trainable[i] = true;
    }
    let b_cfg = LoopConfig {
        max_epochs: hyper.phase_b_epochs.max(1),
        min_epochs: hyper.phase_b_epochs.max(1),
        patience: 1,
        batch_size: hyper.batch_size,
        seed: hyper.seed,
        stage: "finetune-b".into(),
        lr: (0..n)
            .map(|i| if is_enc(i) { hyper.encoder_lr } else { hyper.head_lr })
            .collect(),
        weight_decay: hyper.weight_decay,
        plateau: Some(ReduceOnPlateau::new(0.5, 5)),
        restore_best: true,
    };
    let phase_b = train_epochs(model, &split.train, &b_cfg, &mut step, &mut val)?;
    Ok((phase_a, phase_b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focus_schedule() {
        assert_eq!(mask_focus(0.0, 0.4), 1.0);
        assert!((mask_focus(0.2, 0.4) - 0.5).abs() < 1e-15);
        assert_eq!(mask_focus(0.4, 0.4), 0.0);
        assert_eq!(mask_focus(0.5, 0.4), 0.0);
        assert_eq!(mask_focus(0.9, 0.4), 0.0);
    }

    #[test]
    fn masks_are_contiguous_spans() {
        let x = Tensor::full(&[3, 2, 20], 1.0);
        let (xi, m) = mask_batch(&x, 20, &mut rng::stream(0, "t", 0));
        for row in m.data().chunks(20) {
            assert_eq!(row.iter().sum::<f64>(), 2.0);
            let first = row.iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(row[first + 1], 1.0);
        }
        for (a, b) in xi.data().iter().zip(m.data()) {
            assert_eq!(*a, 1.0 - b);
        }
    }
}

//! Forward and reverse kernels for every primitive op.

use crate::graph::{Op, Padding};
use crate::scalar::Real;
use crate::tensor::Tensor;

type Fwd<S> = std::result::Result<Tensor<S>, String>;

fn same_shape<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<(), String> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(format!("{:?} vs {:?}", a.shape(), b.shape()))
    }
}

fn rank<S: Real>(t: &Tensor<S>, r: usize, what: &str) -> Result<(), String> {
    if t.shape().len() == r {
        Ok(())
    } else {
        Err(format!("{what} must be rank {r}, got {:?}", t.shape()))
    }
}

fn sigmoid<S: Real>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn softmax_row<S: Real>(row: &[S], out: &mut [S]) {
    let m = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut z = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn log_softmax_row<S: Real>(row: &[S], out: &mut [S]) {
    let m = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let lse = row.iter().map(|&v| (v - m).exp()).sum::<S>().ln() + m;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Geometry of one conv1d call.
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    width: usize,
    t_in: usize,
    t_out: usize,
    pad_left: usize,
    stride: usize,
    dilation: usize,
}

impl ConvGeom {
    fn new<S: Real>(
        x: &Tensor<S>,
        w: &Tensor<S>,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Self, String> {
        rank(x, 3, "conv input")?;
        rank(w, 3, "conv kernel")?;
        let (batch, cin, t_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, wcin, width) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if wcin != cin {
            return Err(format!("kernel expects {wcin} input channels, got {cin}"));
        }
        let span = dilation * (width - 1) + 1;
        let (t_out, pad_left) = match padding {
            Padding::Valid => {
                if t_in < span {
                    return Err(format!("length {t_in} shorter than receptive field {span}"));
                }
                ((t_in - span) / stride + 1, 0)
            }
            Padding::Same | Padding::Causal => {
                let t_out = t_in.div_ceil(stride);
                let total = ((t_out - 1) * stride + span).saturating_sub(t_in);
                let left = if padding == Padding::Same {
                    total / 2
                } else {
                    total
                };
                (t_out, left)
            }
        };
        Ok(Self {
            batch,
            cin,
            cout,
            width,
            t_in,
            t_out,
            pad_left,
            stride,
            dilation,
        })
    }

    /// Output index range `[lo, hi)` whose tap `k` lands inside the input.
    fn valid_range(&self, k: usize) -> (usize, usize, isize) {
        let off = (k * self.dilation) as isize - self.pad_left as isize;
        // input index = t * stride + off
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = self.t_in as isize - off; // t*s < hi_num
        let hi = if hi_num <= 0 { 0 } else { (hi_num + s - 1) / s };
        let hi = hi.min(self.t_out as isize).max(0);
        (lo as usize, (hi as usize).max(lo as usize), off)
    }
}

fn conv1d_forward<S: Real>(x: &Tensor<S>, w: &Tensor<S>, g: &ConvGeom) -> Tensor<S> {
    let mut y = vec![S::zero(); g.batch * g.cout * g.t_out];
    let xd = x.data();
    let wd = w.data();
    let ranges: Vec<_> = (0..g.width).map(|k| g.valid_range(k)).collect();
    for b in 0..g.batch {
        for o in 0..g.cout {
            let yrow = &mut y[(b * g.cout + o) * g.t_out..][..g.t_out];
            for c in 0..g.cin {
                let xrow = &xd[(b * g.cin + c) * g.t_in..][..g.t_in];
                for (k, &(lo, hi, off)) in ranges.iter().enumerate() {
                    let wv = wd[(o * g.cin + c) * g.width + k];
                    if g.stride == 1 {
                        let start = (lo as isize + off) as usize;
                        for (yv, &xv) in yrow[lo..hi].iter_mut().zip(&xrow[start..]) {
                            *yv += wv * xv;
                        }
                    } else {
                        for t in lo..hi {
                            let idx = (t as isize * g.stride as isize + off) as usize;
                            yrow[t] += wv * xrow[idx];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_raw(vec![g.batch, g.cout, g.t_out], y)
}

fn conv1d_backward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor<S>>, Option<Tensor<S>>) {
    let mut dx = want_x.then(|| vec![S::zero(); x.len()]);
    let mut dw = want_w.then(|| vec![S::zero(); w.len()]);
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let ranges: Vec<_> = (0..g.width).map(|k| g.valid_range(k)).collect();
    for b in 0..g.batch {
        for o in 0..g.cout {
            let dyrow = &dyd[(b * g.cout + o) * g.t_out..][..g.t_out];
            for c in 0..g.cin {
                let xbase = (b * g.cin + c) * g.t_in;
                for (k, &(lo, hi, off)) in ranges.iter().enumerate() {
                    let widx = (o * g.cin + c) * g.width + k;
                    let wv = wd[widx];
                    let mut acc = S::zero();
                    for t in lo..hi {
                        let idx = xbase + (t as isize * g.stride as isize + off) as usize;
                        let d = dyrow[t];
                        if let Some(dx) = dx.as_mut() {
                            dx[idx] += wv * d;
                        }
                        acc += d * xd[idx];
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        dx.map(|d| Tensor::from_raw(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::from_raw(w.shape().to_vec(), d)),
    )
}

/// `C = A (m,k) * B (k,n)`, row-major slices.
fn gemm<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `C = A^T (m,k)^T * B (m,n)` -> (k,n)
fn gemm_tn<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            for (cv, &bv) in c[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `C = A (m,n) * B^T` with `B (k,n)` -> (m,k)
fn gemm_nt<S: Real>(a: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    c
}

struct GruDims {
    batch: usize,
    input: usize,
    hidden: usize,
}

fn gru_dims<S: Real>(args: &[&Tensor<S>]) -> Result<GruDims, String> {
    let (x, h, w_ih, w_hh, b_ih, b_hh) = (args[0], args[1], args[2], args[3], args[4], args[5]);
    rank(x, 2, "gru x")?;
    rank(h, 2, "gru h")?;
    let (batch, input) = (x.shape()[0], x.shape()[1]);
    let hidden = h.shape()[1];
    if h.shape()[0] != batch {
        return Err("gru batch mismatch between x and h".into());
    }
    if w_ih.shape() != [input, 3 * hidden]
        || w_hh.shape() != [hidden, 3 * hidden]
        || b_ih.shape() != [3 * hidden]
        || b_hh.shape() != [3 * hidden]
    {
        return Err(format!(
            "gru weights {:?} {:?} {:?} {:?} incompatible with input {input}, hidden {hidden}",
            w_ih.shape(),
            w_hh.shape(),
            b_ih.shape(),
            b_hh.shape()
        ));
    }
    Ok(GruDims {
        batch,
        input,
        hidden,
    })
}

/// Gate pre-activations `(x W_ih + b_ih, h W_hh + b_hh)`.
fn gru_linear<S: Real>(args: &[&Tensor<S>], d: &GruDims) -> (Vec<S>, Vec<S>) {
    let g3 = 3 * d.hidden;
    let mut gi = gemm(args[0].data(), args[2].data(), d.batch, d.input, g3);
    let mut gh = gemm(args[1].data(), args[3].data(), d.batch, d.hidden, g3);
    for b in 0..d.batch {
        for j in 0..g3 {
            gi[b * g3 + j] += args[4].data()[j];
            gh[b * g3 + j] += args[5].data()[j];
        }
    }
    (gi, gh)
}

fn pool_len<S: Real>(x: &Tensor<S>, size: usize) -> Result<(usize, usize, usize), String> {
    rank(x, 3, "pool input")?;
    let t = x.shape()[2];
    if size == 0 || t < size {
        return Err(format!("pool size {size} larger than length {t}"));
    }
    Ok((x.shape()[0] * x.shape()[1], t, t / size))
}

pub(crate) fn forward<S: Real>(op: &Op<S>, a: &[&Tensor<S>]) -> Fwd<S> {
    Ok(match op {
        Op::Input(_) | Op::Param(_) | Op::Const(_) => unreachable!("leaves are not computed"),
        Op::Add(..) => {
            same_shape(a[0], a[1])?;
            a[0].add(a[1])
        }
        Op::Sub(..) => {
            same_shape(a[0], a[1])?;
            a[0].sub(a[1])
        }
        Op::Mul(..) => {
            same_shape(a[0], a[1])?;
            a[0].zip_map(a[1], |x, y| x * y)
        }
        Op::Scale(_, k) => a[0].scale(*k),
        Op::BiasAdd(..) => {
            let (x, b) = (a[0], a[1]);
            if x.shape().len() < 2 || b.shape() != [x.shape()[1]] {
                return Err(format!("bias {:?} vs input {:?}", b.shape(), x.shape()));
            }
            let c = x.shape()[1];
            let inner: usize = x.shape()[2..].iter().product();
            let mut out = x.clone();
            for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
                let bv = b.data()[i % c];
                for v in chunk {
                    *v += bv;
                }
            }
            out
        }
        Op::MatMul(..) => {
            let (x, w) = (a[0], a[1]);
            rank(x, 2, "matmul lhs")?;
            rank(w, 2, "matmul rhs")?;
            let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
            if w.shape()[0] != k {
                return Err(format!("{:?} x {:?}", x.shape(), w.shape()));
            }
            Tensor::from_raw(vec![m, n], gemm(x.data(), w.data(), m, k, n))
        }
        Op::Conv1d {
            stride,
            dilation,
            padding,
            ..
        } => {
            let g = ConvGeom::new(a[0], a[1], *stride, *dilation, *padding)?;
            conv1d_forward(a[0], a[1], &g)
        }
        Op::GruCell { .. } => {
            let d = gru_dims(a)?;
            let (gi, gh) = gru_linear(a, &d);
            let hsz = d.hidden;
            let h = a[1].data();
            let mut out = vec![S::zero(); d.batch * hsz];
            for b in 0..d.batch {
                let gi = &gi[b * 3 * hsz..];
                let gh = &gh[b * 3 * hsz..];
                for j in 0..hsz {
                    let r = sigmoid(gi[j] + gh[j]);
                    let z = sigmoid(gi[hsz + j] + gh[hsz + j]);
                    let n = (gi[2 * hsz + j] + r * gh[2 * hsz + j]).tanh();
                    out[b * hsz + j] = (S::one() - z) * n + z * h[b * hsz + j];
                }
            }
            Tensor::from_raw(vec![d.batch, hsz], out)
        }
        Op::AvgPool1d(_, size) => {
            let (rows, t, out_t) = pool_len(a[0], *size)?;
            let inv = S::one() / S::from_usize(*size).unwrap();
            let mut out = vec![S::zero(); rows * out_t];
            for r in 0..rows {
                let row = &a[0].data()[r * t..(r + 1) * t];
                for o in 0..out_t {
                    out[r * out_t + o] = row[o * size..(o + 1) * size].iter().copied().sum::<S>() * inv;
                }
            }
            let s = a[0].shape();
            Tensor::from_raw(vec![s[0], s[1], out_t], out)
        }
        Op::MaxPool1d(_, size) => {
            let (rows, t, out_t) = pool_len(a[0], *size)?;
            let mut out = vec![S::zero(); rows * out_t];
            for r in 0..rows {
                let row = &a[0].data()[r * t..(r + 1) * t];
                for o in 0..out_t {
                    let win = &row[o * size..(o + 1) * size];
                    out[r * out_t + o] = win[crate::tensor::argmax(win)];
                }
            }
            let s = a[0].shape();
            Tensor::from_raw(vec![s[0], s[1], out_t], out)
        }
        Op::GlobalAvgPool(_) => {
            rank(a[0], 3, "global pool input")?;
            let s = a[0].shape();
            let t = s[2];
            let inv = S::one() / S::from_usize(t).unwrap();
            let out = a[0]
                .data()
                .chunks(t)
                .map(|c| c.iter().copied().sum::<S>() * inv)
                .collect();
            Tensor::from_raw(vec![s[0], s[1]], out)
        }
        Op::Upsample1d(_, f) => {
            rank(a[0], 3, "upsample input")?;
            let s = a[0].shape();
            let mut out = Vec::with_capacity(a[0].len() * f);
            for &v in a[0].data() {
                out.extend(std::iter::repeat(v).take(*f));
            }
            Tensor::from_raw(vec![s[0], s[1], s[2] * f], out)
        }
        Op::Reshape(_, tail) => {
            let x = a[0];
            let n: usize = tail.iter().product();
            if x.shape().is_empty() || n != x.row_len() {
                return Err(format!("cannot view {:?} as (B, {:?})", x.shape(), tail));
            }
            let mut shape = vec![x.shape()[0]];
            shape.extend_from_slice(tail);
            Tensor::from_raw(shape, x.data().to_vec())
        }
        Op::SliceTime(_, t) => {
            rank(a[0], 3, "slice input")?;
            let s = a[0].shape();
            if *t >= s[2] {
                return Err(format!("time index {t} out of range {}", s[2]));
            }
            let out = a[0].data().chunks(s[2]).map(|c| c[*t]).collect();
            Tensor::from_raw(vec![s[0], s[1]], out)
        }
        Op::StackTime(_) => {
            let first = a[0];
            rank(first, 2, "stack item")?;
            for t in a {
                same_shape(first, t)?;
            }
            let (b, c, n) = (first.shape()[0], first.shape()[1], a.len());
            let mut out = vec![S::zero(); b * c * n];
            for (ti, t) in a.iter().enumerate() {
                for (i, &v) in t.data().iter().enumerate() {
                    out[i * n + ti] = v;
                }
            }
            Tensor::from_raw(vec![b, c, n], out)
        }
        Op::Relu(_) => a[0].map(|v| if v > S::zero() { v } else { S::zero() }),
        Op::Sigmoid(_) => a[0].map(sigmoid),
        Op::Tanh(_) => a[0].map(|v| v.tanh()),
        Op::Softmax(_) => {
            let x = a[0];
            let last = *x.shape().last().ok_or("softmax of rank-0")?;
            let mut out = vec![S::zero(); x.len()];
            for (row, o) in x.data().chunks(last).zip(out.chunks_mut(last)) {
                softmax_row(row, o);
            }
            Tensor::from_raw(x.shape().to_vec(), out)
        }
        Op::Log(_) => a[0].map(|v| v.ln()),
        Op::Sum(_) => Tensor::scalar(a[0].sum()),
        Op::Mean(_) => {
            let n = a[0].len().max(1);
            Tensor::scalar(a[0].sum() / S::from_usize(n).unwrap())
        }
        Op::SquaredError(..) => {
            same_shape(a[0], a[1])?;
            a[0].zip_map(a[1], |x, y| (x - y) * (x - y))
        }
        Op::CrossEntropy { .. } => {
            let (l, t) = (a[0], a[1]);
            rank(l, 2, "logits")?;
            same_shape(l, t)?;
            let c = l.shape()[1];
            let mut ls = vec![S::zero(); c];
            let out = l
                .data()
                .chunks(c)
                .zip(t.data().chunks(c))
                .map(|(row, tr)| {
                    log_softmax_row(row, &mut ls);
                    -tr.iter().zip(&ls).map(|(&ti, &li)| ti * li).sum::<S>()
                })
                .collect();
            Tensor::from_raw(vec![l.shape()[0]], out)
        }
        Op::KlSoftmax { .. } => {
            let (p, q) = (a[0], a[1]);
            rank(p, 2, "kl lhs")?;
            same_shape(p, q)?;
            let c = p.shape()[1];
            let mut lp = vec![S::zero(); c];
            let mut lq = vec![S::zero(); c];
            let out = p
                .data()
                .chunks(c)
                .zip(q.data().chunks(c))
                .map(|(pr, qr)| {
                    log_softmax_row(pr, &mut lp);
                    log_softmax_row(qr, &mut lq);
                    let kl: S = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
                    kl.max(S::zero())
                })
                .collect();
            Tensor::from_raw(vec![p.shape()[0]], out)
        }
    })
}

/// Vector-Jacobian products for each input flagged in `want`.
pub(crate) fn backward<S: Real>(
    op: &Op<S>,
    a: &[&Tensor<S>],
    y: &Tensor<S>,
    dy: &Tensor<S>,
    want: &[bool],
) -> Vec<Option<Tensor<S>>> {
    match op {
        Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
        Op::Add(..) => vec![Some(dy.clone()), Some(dy.clone())],
        Op::Sub(..) => vec![Some(dy.clone()), Some(dy.scale(-S::one()))],
        Op::Mul(..) => vec![
            want[0].then(|| dy.zip_map(a[1], |g, v| g * v)),
            want[1].then(|| dy.zip_map(a[0], |g, v| g * v)),
        ],
        Op::Scale(_, k) => vec![Some(dy.scale(*k))],
        Op::BiasAdd(..) => {
            let c = a[0].shape()[1];
            let inner: usize = a[0].shape()[2..].iter().product();
            let db = want[1].then(|| {
                let mut db = vec![S::zero(); c];
                for (i, chunk) in dy.data().chunks(inner).enumerate() {
                    db[i % c] += chunk.iter().copied().sum::<S>();
                }
                Tensor::from_raw(vec![c], db)
            });
            vec![Some(dy.clone()), db]
        }
        Op::MatMul(..) => {
            let (x, w) = (a[0], a[1]);
            let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
            vec![
                want[0].then(|| Tensor::from_raw(vec![m, k], gemm_nt(dy.data(), w.data(), m, n, k))),
                want[1].then(|| Tensor::from_raw(vec![k, n], gemm_tn(x.data(), dy.data(), m, k, n))),
            ]
        }
        Op::Conv1d {
            stride,
            dilation,
            padding,
            ..
        } => {
            let g = ConvGeom::new(a[0], a[1], *stride, *dilation, *padding).expect("validated");
            let (dx, dw) = conv1d_backward(a[0], a[1], dy, &g, want[0], want[1]);
            vec![dx, dw]
        }
        Op::GruCell { .. } => {
            let d = gru_dims(a).expect("validated");
            let (gi, gh) = gru_linear(a, &d);
            let hsz = d.hidden;
            let g3 = 3 * hsz;
            let h = a[1].data();
            let mut dgi = vec![S::zero(); d.batch * g3];
            let mut dgh = vec![S::zero(); d.batch * g3];
            let mut dh = vec![S::zero(); d.batch * hsz];
            for b in 0..d.batch {
                let gi = &gi[b * g3..(b + 1) * g3];
                let gh = &gh[b * g3..(b + 1) * g3];
                for j in 0..hsz {
                    let r = sigmoid(gi[j] + gh[j]);
                    let z = sigmoid(gi[hsz + j] + gh[hsz + j]);
                    let n = (gi[2 * hsz + j] + r * gh[2 * hsz + j]).tanh();
                    let g = dy.data()[b * hsz + j];
                    let hp = h[b * hsz + j];
                    let dz = g * (hp - n);
                    let dn = g * (S::one() - z);
                    dh[b * hsz + j] = g * z;
                    let dn_pre = dn * (S::one() - n * n);
                    let dr = dn_pre * gh[2 * hsz + j];
                    let dr_pre = dr * r * (S::one() - r);
                    let dz_pre = dz * z * (S::one() - z);
                    dgi[b * g3 + j] = dr_pre;
                    dgi[b * g3 + hsz + j] = dz_pre;
                    dgi[b * g3 + 2 * hsz + j] = dn_pre;
                    dgh[b * g3 + j] = dr_pre;
                    dgh[b * g3 + hsz + j] = dz_pre;
                    dgh[b * g3 + 2 * hsz + j] = dn_pre * r;
                }
            }
            let sum_rows = |m: &[S]| {
                let mut s = vec![S::zero(); g3];
                for row in m.chunks(g3) {
                    for (acc, &v) in s.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::from_raw(vec![g3], s)
            };
            let dx = want[0].then(|| {
                Tensor::from_raw(
                    vec![d.batch, d.input],
                    gemm_nt(&dgi, a[2].data(), d.batch, g3, d.input),
                )
            });
            let dh = want[1].then(|| {
                let back = gemm_nt(&dgh, a[3].data(), d.batch, g3, hsz);
                Tensor::from_raw(
                    vec![d.batch, hsz],
                    dh.iter().zip(back).map(|(&x, y)| x + y).collect(),
                )
            });
            vec![
                dx,
                dh,
                want[2].then(|| {
                    Tensor::from_raw(vec![d.input, g3], gemm_tn(a[0].data(), &dgi, d.batch, d.input, g3))
                }),
                want[3].then(|| {
                    Tensor::from_raw(vec![hsz, g3], gemm_tn(h, &dgh, d.batch, hsz, g3))
                }),
                want[4].then(|| sum_rows(&dgi)),
                want[5].then(|| sum_rows(&dgh)),
            ]
        }
        Op::AvgPool1d(_, size) => {
            let t = a[0].shape()[2];
            let out_t = t / size;
            let inv = S::one() / S::from_usize(*size).unwrap();
            let mut dx = vec![S::zero(); a[0].len()];
            for (r, drow) in dy.data().chunks(out_t).enumerate() {
                for (o, &g) in drow.iter().enumerate() {
                    for v in &mut dx[r * t + o * size..r * t + (o + 1) * size] {
                        *v = g * inv;
                    }
                }
            }
            vec![Some(Tensor::from_raw(a[0].shape().to_vec(), dx))]
        }
        Op::MaxPool1d(_, size) => {
            let t = a[0].shape()[2];
            let out_t = t / size;
            let mut dx = vec![S::zero(); a[0].len()];
            for (r, drow) in dy.data().chunks(out_t).enumerate() {
                let row = &a[0].data()[r * t..(r + 1) * t];
                for (o, &g) in drow.iter().enumerate() {
                    let k = crate::tensor::argmax(&row[o * size..(o + 1) * size]);
                    dx[r * t + o * size + k] += g;
                }
            }
            vec![Some(Tensor::from_raw(a[0].shape().to_vec(), dx))]
        }
        Op::GlobalAvgPool(_) => {
            let t = a[0].shape()[2];
            let inv = S::one() / S::from_usize(t).unwrap();
            let mut dx = Vec::with_capacity(a[0].len());
            for &g in dy.data() {
                dx.extend(std::iter::repeat(g * inv).take(t));
            }
            vec![Some(Tensor::from_raw(a[0].shape().to_vec(), dx))]
        }
        Op::Upsample1d(_, f) => {
            let dx = dy.data().chunks(*f).map(|c| c.iter().copied().sum()).collect();
            vec![Some(Tensor::from_raw(a[0].shape().to_vec(), dx))]
        }
        Op::Reshape(..) => vec![Some(Tensor::from_raw(a[0].shape().to_vec(), dy.data().to_vec()))],
        Op::SliceTime(_, t) => {
            let tl = a[0].shape()[2];
            let mut dx = vec![S::zero(); a[0].len()];
            for (i, &g) in dy.data().iter().enumerate() {
                dx[i * tl + t] = g;
            }
            vec![Some(Tensor::from_raw(a[0].shape().to_vec(), dx))]
        }
        Op::StackTime(_) => {
            let n = a.len();
            (0..n)
                .map(|ti| {
                    want[ti].then(|| {
                        let d = dy.data().chunks(n).map(|c| c[ti]).collect();
                        Tensor::from_raw(a[ti].shape().to_vec(), d)
                    })
                })
                .collect()
        }
        Op::Relu(_) => vec![Some(dy.zip_map(a[0], |g, v| if v > S::zero() { g } else { S::zero() }))],
        Op::Sigmoid(_) => vec![Some(dy.zip_map(y, |g, s| g * s * (S::one() - s)))],
        Op::Tanh(_) => vec![Some(dy.zip_map(y, |g, t| g * (S::one() - t * t)))],
        Op::Softmax(_) => {
            let last = *y.shape().last().unwrap();
            let mut dx = vec![S::zero(); y.len()];
            for ((s, g), o) in y
                .data()
                .chunks(last)
                .zip(dy.data().chunks(last))
                .zip(dx.chunks_mut(last))
            {
                let dot: S = s.iter().zip(g).map(|(&a, &b)| a * b).sum();
                for ((o, &si), &gi) in o.iter_mut().zip(s).zip(g) {
                    *o = si * (gi - dot);
                }
            }
            vec![Some(Tensor::from_raw(y.shape().to_vec(), dx))]
        }
        Op::Log(_) => vec![Some(dy.zip_map(a[0], |g, v| g / v))],
        Op::Sum(_) => vec![Some(Tensor::full(a[0].shape(), dy.data()[0]))],
        Op::Mean(_) => {
            let n = S::from_usize(a[0].len().max(1)).unwrap();
            vec![Some(Tensor::full(a[0].shape(), dy.data()[0] / n))]
        }
        Op::SquaredError(..) => {
            let two = S::lit(2.0);
            let diff = a[0].sub(a[1]);
            let da = diff.zip_map(dy, |d, g| two * d * g);
            let db = want[1].then(|| da.scale(-S::one()));
            vec![Some(da), db]
        }
        Op::CrossEntropy { .. } => {
            let (l, t) = (a[0], a[1]);
            let c = l.shape()[1];
            let mut dl = vec![S::zero(); l.len()];
            let mut dt = want[1].then(|| vec![S::zero(); t.len()]);
            let mut ls = vec![S::zero(); c];
            for (i, g) in dy.data().iter().enumerate() {
                let row = &l.data()[i * c..(i + 1) * c];
                let tr = &t.data()[i * c..(i + 1) * c];
                log_softmax_row(row, &mut ls);
                let tsum: S = tr.iter().copied().sum();
                for j in 0..c {
                    dl[i * c + j] = *g * (ls[j].exp() * tsum - tr[j]);
                    if let Some(dt) = dt.as_mut() {
                        dt[i * c + j] = -*g * ls[j];
                    }
                }
            }
            vec![
                Some(Tensor::from_raw(l.shape().to_vec(), dl)),
                dt.map(|d| Tensor::from_raw(t.shape().to_vec(), d)),
            ]
        }
        Op::KlSoftmax { .. } => {
            let (p, q) = (a[0], a[1]);
            let c = p.shape()[1];
            let mut dp = want[0].then(|| vec![S::zero(); p.len()]);
            let mut dq = want[1].then(|| vec![S::zero(); q.len()]);
            let mut lp = vec![S::zero(); c];
            let mut lq = vec![S::zero(); c];
            for (i, &g) in dy.data().iter().enumerate() {
                log_softmax_row(&p.data()[i * c..(i + 1) * c], &mut lp);
                log_softmax_row(&q.data()[i * c..(i + 1) * c], &mut lq);
                let kl: S = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
                for j in 0..c {
                    let pj = lp[j].exp();
                    if let Some(dp) = dp.as_mut() {
                        dp[i * c + j] = g * pj * ((lp[j] - lq[j]) - kl);
                    }
                    if let Some(dq) = dq.as_mut() {
                        dq[i * c + j] = g * (lq[j].exp() - pj);
                    }
                }
            }
            vec![
                dp.map(|d| Tensor::from_raw(p.shape().to_vec(), d)),
                dq.map(|d| Tensor::from_raw(q.shape().to_vec(), d)),
            ]
        }
    }
}

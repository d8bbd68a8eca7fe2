//! Differentiable operations. Each op computes its forward value eagerly and
//! records what its backward rule needs.

use std::rc::Rc;

use super::tape::{Node, NodeId, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryKind<T> {
    Neg,
    Scale(T),
    AddScalar(T),
    Exp,
    Log,
    Sigmoid,
    Gelu,
    Relu,
    Square,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
    },
    Unary {
        kind: UnaryKind<T>,
        a: NodeId,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    MeanRows {
        a: NodeId,
    },
    Softmax {
        a: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Embedding {
        table: NodeId,
        tokens: Vec<usize>,
    },
    IndexRows {
        a: NodeId,
        idx: Vec<usize>,
    },
    CombineRows {
        parts: Vec<(NodeId, Vec<usize>)>,
    },
    Pick {
        a: NodeId,
        pos: Vec<usize>,
    },
    MulRows {
        a: NodeId,
        g: NodeId,
    },
    MulConst {
        a: NodeId,
        c: Rc<Tensor<T>>,
    },
    Reshape {
        a: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Concrete {
        x: NodeId,
        logit: NodeId,
        z: Vec<T>,
        p: T,
        temp: T,
    },
}

/// Numerical floor used inside the concrete relaxation.
pub(crate) const CONCRETE_EPS: f64 = 1e-7;

fn grad_buf<'g, T: Element>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Tensor<T>>],
    id: NodeId,
) -> Option<&'g mut [T]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[id].value.shape().to_vec()));
    }
    slot.as_mut().map(|t| t.data_mut())
}

fn gelu_scalar<T: Element>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Op<T> {
    pub(crate) fn backward(
        &self,
        nodes: &[Node<T>],
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let gd = g.data();
        match self {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let av = nodes[a].value.clone();
                let bv = nodes[b].value.clone();
                let b_batched = bv.numel() == batch * k * n && batch > 1;
                if let Some(da) = grad_buf(nodes, grads, a) {
                    for bi in 0..batch {
                        let boff = if b_batched { bi * k * n } else { 0 };
                        gemm_nt_acc(
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &bv.data()[boff..boff + k * n],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(db) = grad_buf(nodes, grads, b) {
                    if b_batched {
                        for bi in 0..batch {
                            gemm_tn_acc(
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                &av.data()[bi * m * k..(bi + 1) * m * k],
                                &gd[bi * m * n..(bi + 1) * m * n],
                                m,
                                k,
                                n,
                            );
                        }
                    } else {
                        gemm_tn_acc(db, av.data(), gd, batch * m, k, n);
                    }
                }
            }
            &Op::Binary { kind, a, b } => {
                let av = nodes[a].value.clone();
                let bv = nodes[b].value.clone();
                let nb = bv.numel();
                let (ad, bd) = (av.data(), bv.data());
                if let Some(da) = grad_buf(nodes, grads, a) {
                    for i in 0..da.len() {
                        da[i] = da[i]
                            + match kind {
                                BinaryKind::Add | BinaryKind::Sub => gd[i],
                                BinaryKind::Mul => gd[i] * bd[i % nb],
                                BinaryKind::Div => gd[i] / bd[i % nb],
                            };
                    }
                }
                if let Some(db) = grad_buf(nodes, grads, b) {
                    for i in 0..gd.len() {
                        let j = i % nb;
                        db[j] = db[j]
                            + match kind {
                                BinaryKind::Add => gd[i],
                                BinaryKind::Sub => -gd[i],
                                BinaryKind::Mul => gd[i] * ad[i],
                                BinaryKind::Div => -gd[i] * ad[i] / (bd[j] * bd[j]),
                            };
                    }
                }
            }
            &Op::Unary { kind, a } => {
                let av = nodes[a].value.clone();
                let (ad, yd) = (av.data(), out.data());
                if let Some(da) = grad_buf(nodes, grads, a) {
                    for i in 0..da.len() {
                        let d = match kind {
                            UnaryKind::Neg => -gd[i],
                            UnaryKind::Scale(c) => gd[i] * c,
                            UnaryKind::AddScalar(_) => gd[i],
                            UnaryKind::Exp => gd[i] * yd[i],
                            UnaryKind::Log => gd[i] / ad[i],
                            UnaryKind::Sigmoid => gd[i] * yd[i] * (T::one() - yd[i]),
                            UnaryKind::Gelu => gd[i] * gelu_grad(ad[i]),
                            UnaryKind::Relu => {
                                if ad[i] > T::zero() {
                                    gd[i]
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Square => gd[i] * (ad[i] + ad[i]),
                        };
                        da[i] = da[i] + d;
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(da) = grad_buf(nodes, grads, a) {
                    for v in da.iter_mut() {
                        *v = *v + gd[0];
                    }
                }
            }
            &Op::Mean { a } => {
                if let Some(da) = grad_buf(nodes, grads, a) {
                    let s = gd[0] / T::from_usize(da.len()).unwrap();
                    for v in da.iter_mut() {
                        *v = *v + s;
                    }
                }
            }
            &Op::MeanRows { a } => {
                if let Some(da) = grad_buf(nodes, grads, a) {
                    let c = gd.len();
                    let rows = da.len() / c;
                    let inv = T::one() / T::from_usize(rows).unwrap();
                    for r in 0..rows {
                        for j in 0..c {
                            da[r * c + j] = da[r * c + j] + gd[j] * inv;
                        }
                    }
                }
            }
            &Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                let yd = out.data();
                if let Some(da) = grad_buf(nodes, grads, a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot = (0..len).fold(T::zero(), |s, l| s + gd[at(l)] * yd[at(l)]);
                            for l in 0..len {
                                let p = at(l);
                                da[p] = da[p] + yd[p] * (gd[p] - dot);
                            }
                        }
                    }
                }
            }
            &Op::LogSoftmax { a } => {
                let yd = out.data();
                if let Some(da) = grad_buf(nodes, grads, a) {
                    let c = out.cols();
                    for r in 0..out.rows() {
                        let row = r * c..(r + 1) * c;
                        let gs = gd[row.clone()].iter().fold(T::zero(), |s, &v| s + v);
                        for p in row {
                            da[p] = da[p] + gd[p] - yd[p].exp() * gs;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let rows = out.rows();
                let gainv = nodes[*gain].value.clone();
                let gv = gainv.data();
                if let Some(dx) = grad_buf(nodes, grads, *x) {
                    let cf = T::from_usize(c).unwrap();
                    let mut dxh = vec![T::zero(); c];
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let p = r * c + j;
                            dxh[j] = gd[p] * gv[j];
                            m1 = m1 + dxh[j];
                            m2 = m2 + dxh[j] * xhat[p];
                        }
                        m1 = m1 / cf;
                        m2 = m2 / cf;
                        for j in 0..c {
                            let p = r * c + j;
                            dx[p] = dx[p] + rstd[r] * (dxh[j] - m1 - xhat[p] * m2);
                        }
                    }
                }
                if let Some(dg) = grad_buf(nodes, grads, *gain) {
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] = dg[j] + gd[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(db) = grad_buf(nodes, grads, *bias) {
                    for r in 0..rows {
                        for j in 0..c {
                            db[j] = db[j] + gd[r * c + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(dl) = grad_buf(nodes, grads, *logits) {
                    let v = probs.len() / targets.len();
                    let s = gd[0] / T::from_usize(targets.len()).unwrap();
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let p = r * v + j;
                            let onehot = if j == t { T::one() } else { T::zero() };
                            dl[p] = dl[p] + (probs[p] - onehot) * s;
                        }
                    }
                }
            }
            Op::Embedding { table, tokens } => {
                if let Some(dt) = grad_buf(nodes, grads, *table) {
                    let c = out.cols();
                    for (r, &t) in tokens.iter().enumerate() {
                        for j in 0..c {
                            dt[t * c + j] = dt[t * c + j] + gd[r * c + j];
                        }
                    }
                }
            }
            Op::IndexRows { a, idx } => {
                if let Some(da) = grad_buf(nodes, grads, *a) {
                    let c = out.cols();
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            da[src * c + j] = da[src * c + j] + gd[r * c + j];
                        }
                    }
                }
            }
            Op::CombineRows { parts } => {
                let c = out.cols();
                for (pid, idx) in parts {
                    if let Some(dp) = grad_buf(nodes, grads, *pid) {
                        for (r, &dst) in idx.iter().enumerate() {
                            for j in 0..c {
                                dp[r * c + j] = dp[r * c + j] + gd[dst * c + j];
                            }
                        }
                    }
                }
            }
            Op::Pick { a, pos } => {
                if let Some(da) = grad_buf(nodes, grads, *a) {
                    for (r, &p) in pos.iter().enumerate() {
                        da[p] = da[p] + gd[r];
                    }
                }
            }
            &Op::MulRows { a, g: gate } => {
                let av = nodes[a].value.clone();
                let gatev = nodes[gate].value.clone();
                let c = av.cols();
                if let Some(da) = grad_buf(nodes, grads, a) {
                    for r in 0..av.rows() {
                        let s = gatev.data()[r];
                        for j in 0..c {
                            da[r * c + j] = da[r * c + j] + gd[r * c + j] * s;
                        }
                    }
                }
                if let Some(dg) = grad_buf(nodes, grads, gate) {
                    for r in 0..av.rows() {
                        let dot = (0..c).fold(T::zero(), |s, j| {
                            s + gd[r * c + j] * av.data()[r * c + j]
                        });
                        dg[r] = dg[r] + dot;
                    }
                }
            }
            Op::MulConst { a, c } => {
                if let Some(da) = grad_buf(nodes, grads, *a) {
                    for (i, &m) in c.data().iter().enumerate() {
                        da[i] = da[i] + gd[i] * m;
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(da) = grad_buf(nodes, grads, a) {
                    for (d, &v) in da.iter_mut().zip(gd) {
                        *d = *d + v;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => attention_backward(
                nodes, grads, gd, *q, *k, *v, *batch, *seq, *heads, probs,
            ),
            Op::Concrete {
                x,
                logit,
                z,
                p,
                temp,
            } => {
                let xv = nodes[*x].value.clone();
                let (p, t) = (*p, *temp);
                let one = T::one();
                let keep = one / (one - p);
                if let Some(dx) = grad_buf(nodes, grads, *x) {
                    for i in 0..dx.len() {
                        dx[i] = dx[i] + gd[i] * (one - z[i]) * keep;
                    }
                }
                if let Some(dl) = grad_buf(nodes, grads, *logit) {
                    let eps = T::from_f64_lossy(CONCRETE_EPS);
                    let dlogit_dp = one / (p + eps) + one / (one - p + eps);
                    let mut acc = T::zero();
                    for i in 0..z.len() {
                        let dz_dp = z[i] * (one - z[i]) / t * dlogit_dp;
                        let dout_dp = xv.data()[i] * (-dz_dp * keep + (one - z[i]) * keep * keep);
                        acc = acc + gd[i] * dout_dp;
                    }
                    dl[0] = dl[0] + acc * p * (one - p);
                }
            }
        }
    }
}

/// Copies head `h` of a `[batch*seq, heads*hd]` buffer for sequence `b`
/// into a contiguous `[seq, hd]` block.
fn head_block<T: Element>(src: &[T], b: usize, h: usize, seq: usize, d: usize, hd: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(seq * hd);
    for s in 0..seq {
        let row = (b * seq + s) * d + h * hd;
        out.extend_from_slice(&src[row..row + hd]);
    }
    out
}

fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn attention_forward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Tensor<T>, Vec<T>) {
    let d = q.cols();
    let hd = d / heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut out = vec![T::zero(); batch * seq * d];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let qh = head_block(q.data(), b, h, seq, d, hd);
            let kh = head_block(k.data(), b, h, seq, d, hd);
            let vh = head_block(v.data(), b, h, seq, d, hd);
            let pbase = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                let qi = &qh[i * hd..(i + 1) * hd];
                let mut mx = T::neg_infinity();
                for j in 0..=i {
                    let s = dot(qi, &kh[j * hd..(j + 1) * hd]) * scale;
                    prow[j] = s;
                    if s > mx {
                        mx = s;
                    }
                }
                let mut z = T::zero();
                for pj in prow.iter_mut().take(i + 1) {
                    *pj = (*pj - mx).exp();
                    z = z + *pj;
                }
                for pj in prow.iter_mut().take(i + 1) {
                    *pj = *pj / z;
                }
                let orow = (b * seq + i) * d + h * hd;
                let o = &mut out[orow..orow + hd];
                for j in 0..=i {
                    let pj = prow[j];
                    let vj = &vh[j * hd..(j + 1) * hd];
                    for t in 0..hd {
                        o[t] = o[t] + pj * vj[t];
                    }
                }
            }
        }
    }
    (
        Tensor::new(q.shape().to_vec(), out).expect("attention output shape"),
        probs,
    )
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Element>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    gd: &[T],
    q: NodeId,
    k: NodeId,
    v: NodeId,
    batch: usize,
    seq: usize,
    heads: usize,
    probs: &[T],
) {
    let qv = nodes[q].value.clone();
    let kv = nodes[k].value.clone();
    let vv = nodes[v].value.clone();
    let d = qv.cols();
    let hd = d / heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let n = batch * seq * d;
    let mut dq = vec![T::zero(); n];
    let mut dk = vec![T::zero(); n];
    let mut dv = vec![T::zero(); n];
    let mut ds = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let qh = head_block(qv.data(), b, h, seq, d, hd);
            let kh = head_block(kv.data(), b, h, seq, d, hd);
            let vh = head_block(vv.data(), b, h, seq, d, hd);
            let gh = head_block(gd, b, h, seq, d, hd);
            let pbase = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let prow = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                let gi = &gh[i * hd..(i + 1) * hd];
                // dP_ij = dO_i · V_j ; dS = P ⊙ (dP − Σ_j P_ij dP_ij)
                let mut psum = T::zero();
                for j in 0..=i {
                    ds[j] = dot(gi, &vh[j * hd..(j + 1) * hd]);
                    psum = psum + prow[j] * ds[j];
                }
                let qrow = (b * seq + i) * d + h * hd;
                for j in 0..=i {
                    let pj = prow[j];
                    let krow = (b * seq + j) * d + h * hd;
                    for t in 0..hd {
                        dv[krow + t] = dv[krow + t] + pj * gi[t];
                    }
                    let s = pj * (ds[j] - psum) * scale;
                    for t in 0..hd {
                        dq[qrow + t] = dq[qrow + t] + s * kh[j * hd + t];
                        dk[krow + t] = dk[krow + t] + s * qh[i * hd + t];
                    }
                }
            }
        }
    }
    for (id, buf) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(dst) = grad_buf(nodes, grads, id) {
            for (d, s) in dst.iter_mut().zip(buf) {
                *d = *d + s;
            }
        }
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    let nb: usize = b.iter().product();
    nb == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

impl<'t, T: Element> Var<'t, T> {
    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    fn unary(&self, kind: UnaryKind<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let value = self.value().map(f);
        self.tape
            .push(value, Op::Unary { kind, a: self.id }, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let av = self.value();
        let bv = other.value();
        if !broadcast_ok(av.shape(), bv.shape()) {
            return Err(Error::Shape(format!(
                "{kind:?}: cannot broadcast {:?} onto {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let nb = bv.numel();
        let (ad, bd) = (av.data(), bv.data());
        let data = (0..ad.len())
            .map(|i| {
                let (x, y) = (ad[i], bd[i % nb]);
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// Matrix product. `other` is either 2-D (leading dims of `self` are
    /// flattened into rows) or has the same batch dims as `self`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let av = self.value();
        let bv = other.value();
        let (ash, bsh) = (av.shape(), bv.shape());
        let err = || {
            Error::Shape(format!(
                "matmul of {ash:?} and {bsh:?}: inner dimensions differ"
            ))
        };
        if ash.len() < 2 || bsh.len() < 2 || ash[ash.len() - 1] != bsh[bsh.len() - 2] {
            return Err(err());
        }
        let k = ash[ash.len() - 1];
        let n = bsh[bsh.len() - 1];
        let b_batch: usize = bsh[..bsh.len() - 2].iter().product();
        let (batch, m) = if b_batch == 1 {
            (1, av.numel() / k)
        } else {
            if ash.len() != bsh.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
                return Err(err());
            }
            (b_batch, ash[ash.len() - 2])
        };
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let boff = if b_batch == 1 { 0 } else { bi * k * n };
            gemm_acc(
                &mut out[bi * m * n..(bi + 1) * m * n],
                &av.data()[bi * m * k..(bi + 1) * m * k],
                &bv.data()[boff..boff + k * n],
                m,
                k,
                n,
            );
        }
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Elementwise sum; `other` may be a scalar or match a suffix of the shape.
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Neg, |x| -x)
    }

    pub fn scale(&self, c: f64) -> Var<'t, T> {
        let c = T::from_f64_lossy(c);
        self.unary(UnaryKind::Scale(c), move |x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t, T> {
        let c = T::from_f64_lossy(c);
        self.unary(UnaryKind::AddScalar(c), move |x| x + c)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Exp, |x| x.exp())
    }

    pub fn ln(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Log, |x| x.ln())
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Sigmoid, sigmoid_scalar)
    }

    /// Exact-erf GELU.
    pub fn gelu(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Gelu, gelu_scalar)
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Relu, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Square, |x| x * x)
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().sum();
        self.tape
            .push(Tensor::scalar(s), Op::Sum { a: self.id }, self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t, T> {
        let v = self.value();
        let s = v.sum() / T::from_usize(v.numel()).unwrap();
        self.tape
            .push(Tensor::scalar(s), Op::Mean { a: self.id }, self.requires_grad())
    }

    /// Column means of a `[rows, c]` view: `[c]`.
    pub fn mean_rows(&self) -> Var<'t, T> {
        let v = self.value();
        let (rows, c) = (v.rows(), v.cols());
        let mut acc = vec![T::zero(); c];
        for r in 0..rows {
            for (a, &x) in acc.iter_mut().zip(v.row(r)) {
                *a = *a + x;
            }
        }
        let inv = T::one() / T::from_usize(rows).unwrap();
        let data = acc.into_iter().map(|a| a * inv).collect();
        self.tape.push(
            Tensor::new(vec![c], data).unwrap(),
            Op::MeanRows { a: self.id },
            self.requires_grad(),
        )
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).fold(T::neg_infinity(), |m, l| m.max(src[at(l)]));
                let mut z = T::zero();
                for l in 0..len {
                    let e = (src[at(l)] - mx).exp();
                    out[at(l)] = e;
                    z = z + e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / z;
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(shape.to_vec(), out)?,
            Op::Softmax {
                a: self.id,
                outer,
                len,
                inner,
            },
            self.requires_grad(),
        ))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self) -> Var<'t, T> {
        let v = self.value();
        let c = v.cols();
        let mut out = Vec::with_capacity(v.numel());
        for r in 0..v.rows() {
            let row = v.row(r);
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().fold(T::zero(), |s, &x| s + (x - mx).exp()).ln() + mx;
            out.extend(row.iter().map(|&x| x - lse));
        }
        debug_assert_eq!(out.len(), v.rows() * c);
        self.tape.push(
            Tensor::new(v.shape().to_vec(), out).unwrap(),
            Op::LogSoftmax { a: self.id },
            self.requires_grad(),
        )
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layernorm(&self, gain: &Var<'t, T>, bias: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        self.same_tape(gain);
        self.same_tape(bias);
        let xv = self.value();
        let gv = gain.value();
        let bv = bias.value();
        let c = xv.cols();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::Shape(format!(
                "layernorm width {c} but gain {:?} and bias {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("layernorm eps must be > 0, got {eps}")));
        }
        let eps = T::from_f64_lossy(eps);
        let cf = T::from_usize(c).unwrap();
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |s, &x| s + x) / cf;
            let var = row.iter().fold(T::zero(), |s, &x| s + (x - mean) * (x - mean)) / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            Tensor::new(xv.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood (nats) of `targets` under row-wise
    /// softmax of `self`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let (rows, c) = (v.rows(), v.cols());
        if rows != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: {rows} rows of logits but {} targets",
                targets.len()
            )));
        }
        let mut probs = Vec::with_capacity(v.numel());
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::InvalidArgument(format!(
                    "target {t} out of range for vocabulary {c}"
                )));
            }
            let row = v.row(r);
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let z = row.iter().fold(T::zero(), |s, &x| s + (x - mx).exp());
            probs.extend(row.iter().map(|&x| (x - mx).exp() / z));
            total = total + (z.ln() + mx - row[t]);
        }
        let loss = total / T::from_usize(rows).unwrap();
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
            self.requires_grad(),
        ))
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&self, tokens: &[usize]) -> Result<Var<'t, T>> {
        let tv = self.value();
        let (v, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= v {
                return Err(Error::InvalidArgument(format!(
                    "token {t} out of range for vocabulary {v}"
                )));
            }
            out.extend_from_slice(tv.row(t));
        }
        Ok(self.tape.push(
            Tensor::new(vec![tokens.len(), d], out)?,
            Op::Embedding {
                table: self.id,
                tokens: tokens.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Gathers rows `idx` of a `[n, c]` view into `[idx.len(), c]`.
    pub fn index_rows(&self, idx: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let (n, c) = (v.rows(), v.cols());
        if idx.is_empty() {
            return Err(Error::InvalidArgument("index_rows: empty selection".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::InvalidArgument(format!("row {i} out of range {n}")));
            }
            out.extend_from_slice(v.row(i));
        }
        Ok(self.tape.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::IndexRows {
                a: self.id,
                idx: idx.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Picks flat element positions into a 1-D tensor.
    pub fn pick(&self, pos: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        if let Some(&bad) = pos.iter().find(|&&p| p >= v.numel()) {
            return Err(Error::InvalidArgument(format!(
                "position {bad} out of range {}",
                v.numel()
            )));
        }
        let out = pos.iter().map(|&p| v.data()[p]).collect();
        Ok(self.tape.push(
            Tensor::new(vec![pos.len()], out)?,
            Op::Pick {
                a: self.id,
                pos: pos.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Scales row `r` of a `[m, c]` view by `gates[r]`.
    pub fn mul_rows(&self, gates: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(gates);
        let av = self.value();
        let gv = gates.value();
        if gv.numel() != av.rows() {
            return Err(Error::Shape(format!(
                "mul_rows: {} rows but {} gates",
                av.rows(),
                gv.numel()
            )));
        }
        let c = av.cols();
        let mut out = av.data().to_vec();
        for (r, &s) in gv.data().iter().enumerate() {
            for x in &mut out[r * c..(r + 1) * c] {
                *x = *x * s;
            }
        }
        let rg = self.requires_grad() || gates.requires_grad();
        Ok(self.tape.push(
            Tensor::new(av.shape().to_vec(), out)?,
            Op::MulRows {
                a: self.id,
                g: gates.id,
            },
            rg,
        ))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, c: Tensor<T>) -> Result<Var<'t, T>> {
        let av = self.value();
        if av.shape() != c.shape() {
            return Err(Error::Shape(format!(
                "mul_const: {:?} vs {:?}",
                av.shape(),
                c.shape()
            )));
        }
        let out = av.data().iter().zip(c.data()).map(|(&x, &m)| x * m).collect();
        Ok(self.tape.push(
            Tensor::new(av.shape().to_vec(), out)?,
            Op::MulConst {
                a: self.id,
                c: Rc::new(c),
            },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self
            .tape
            .push(v, Op::Reshape { a: self.id }, self.requires_grad()))
    }

    /// Causal multi-head scaled dot-product attention over `[batch*seq, d]`
    /// projections; position `i` attends to `j <= i` within its sequence.
    pub fn causal_attention(
        &self,
        k: &Var<'t, T>,
        v: &Var<'t, T>,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(k);
        self.same_tape(v);
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let d = qv.cols();
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 || qv.rows() != batch * seq {
            return Err(Error::Shape(format!(
                "attention: {:?} is not [batch {batch} * seq {seq}, heads {heads} * hd]",
                qv.shape()
            )));
        }
        let (out, probs) = attention_forward(&qv, &kv, &vv, batch, seq, heads);
        let rg = self.requires_grad() || k.requires_grad() || v.requires_grad();
        Ok(self.tape.push(
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }
}

/// Sums row blocks into an `[n, c]` output: `out[idx[r]] += part[r]`.
pub fn combine_rows<'t, T: Element>(
    tape: &'t super::Tape<T>,
    n: usize,
    c: usize,
    parts: &[(Var<'t, T>, Vec<usize>)],
) -> Result<Var<'t, T>> {
    let mut out = vec![T::zero(); n * c];
    let mut rg = false;
    for (v, idx) in parts {
        assert!(std::ptr::eq(v.tape, tape), "vars belong to different tapes");
        let pv = v.value();
        if pv.cols() != c || pv.rows() != idx.len() {
            return Err(Error::Shape(format!(
                "combine_rows: part {:?} with {} indices into [{n}, {c}]",
                pv.shape(),
                idx.len()
            )));
        }
        for (r, &dst) in idx.iter().enumerate() {
            if dst >= n {
                return Err(Error::InvalidArgument(format!("row {dst} out of range {n}")));
            }
            for (o, &x) in out[dst * c..(dst + 1) * c].iter_mut().zip(pv.row(r)) {
                *o = *o + x;
            }
        }
        rg |= v.requires_grad();
    }
    Ok(tape.push(
        Tensor::new(vec![n, c], out)?,
        Op::CombineRows {
            parts: parts.iter().map(|(v, idx)| (v.id, idx.clone())).collect(),
        },
        rg,
    ))
}

/// Concrete (relaxed Bernoulli) dropout with a learnable drop-rate logit.
///
/// `z = sigmoid((ln(p+ε) − ln(1−p+ε) + ln(u+ε) − ln(1−u+ε)) / temp)`,
/// output `x · (1 − z) / (1 − p)` with `p = sigmoid(logit)`.
pub fn concrete_mask<'t, T: Element>(
    x: &Var<'t, T>,
    logit: &Var<'t, T>,
    noise: &[T],
    temp: f64,
) -> Result<(Var<'t, T>, Vec<T>)> {
    if !(temp > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "concrete temperature must be > 0, got {temp}"
        )));
    }
    let xv = x.value();
    if noise.len() != xv.numel() || logit.value().numel() != 1 {
        return Err(Error::Shape(
            "concrete dropout: noise must match input and logit must be scalar".into(),
        ));
    }
    let one = T::one();
    let eps = T::from_f64_lossy(CONCRETE_EPS);
    let t = T::from_f64_lossy(temp);
    let p = sigmoid_scalar(logit.item());
    let base = (p + eps).ln() - (one - p + eps).ln();
    let z: Vec<T> = noise
        .iter()
        .map(|&u| sigmoid_scalar((base + (u + eps).ln() - (one - u + eps).ln()) / t))
        .collect();
    let keep = one / (one - p);
    let out = xv
        .data()
        .iter()
        .zip(&z)
        .map(|(&xi, &zi)| xi * (one - zi) * keep)
        .collect();
    let rg = x.requires_grad() || logit.requires_grad();
    let var = x.tape.push(
        Tensor::new(xv.shape().to_vec(), out)?,
        Op::Concrete {
            x: x.id,
            logit: logit.id,
            z: z.clone(),
            p,
            temp: t,
        },
        rg,
    );
    Ok((var, z))
}

//! Transformer building blocks and the byte-level causal language model.
//!
//! The model is pre-norm: `x += attn(ln1(x))`, `x += mlp(ln2(x))`, then a
//! final layernorm and a vocabulary projection. Layers flagged in
//! `moe_layer_mask` replace the MLP by a routed expert layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::baselines::{self, CONCRETE_DROPOUT_REG, CONCRETE_INIT_P, CONCRETE_TEMP, CONCRETE_WEIGHT_REG};
use crate::error::{Error, Result};
use crate::moe::{
    expert_layer_forward, modulize, route, router_from_stream, DenseMlp, ExpertVars, Gates,
    RoutingDecision,
};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply<'t, T: Element>(&self, x: &Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Self::Gelu),
            "relu" => Ok(Self::Relu),
            _ => Err(Error::Config(format!("unknown activation {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DenseDropout,
    Concrete,
    Dropblock,
    SmoeLearned,
    Thor,
    SmoeDropout,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::DenseDropout,
        Method::Concrete,
        Method::Dropblock,
        Method::SmoeLearned,
        Method::Thor,
        Method::SmoeDropout,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::DenseDropout => "dense_dropout",
            Method::Concrete => "concrete",
            Method::Dropblock => "dropblock",
            Method::SmoeLearned => "smoe_learned",
            Method::Thor => "thor",
            Method::SmoeDropout => "smoe_dropout",
        }
    }

    pub fn is_moe(&self) -> bool {
        matches!(self, Method::SmoeLearned | Method::Thor | Method::SmoeDropout)
    }

    pub fn has_router(&self) -> bool {
        matches!(self, Method::SmoeLearned | Method::SmoeDropout)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Experts present in each MoE layer.
    pub n_experts: usize,
    /// Number of slices the MLP was cut into; expert width is
    /// `d_ff / source_experts`. Equals `n_experts` unless experts were pruned.
    pub source_experts: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub moe_layer_mask: Vec<bool>,
    pub method: Method,
    pub activation: Activation,
    /// Drop probability for `dense_dropout` and `dropblock`.
    pub dropout: f64,
    pub dropblock_size: usize,
    /// Standard deviation of weight initialization. The output head uses
    /// `init_scale / sqrt(d_model)`.
    pub init_scale: f64,
}

impl ModelConfig {
    /// Small default shape with the given method; MoE methods use every layer.
    pub fn tiny(method: Method) -> Self {
        let n_layers = 2;
        Self {
            n_layers,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            n_experts: 8,
            source_experts: 8,
            vocab: 256,
            seq_len: 64,
            moe_layer_mask: vec![method.is_moe(); n_layers],
            method,
            activation: Activation::Gelu,
            dropout: 0.1,
            dropblock_size: 5,
            init_scale: 0.02,
        }
    }

    /// Copy with another method; the MoE mask follows the method.
    pub fn with_method(&self, method: Method) -> Self {
        let mut c = self.clone();
        if method.is_moe() != self.method.is_moe() {
            c.moe_layer_mask = vec![method.is_moe(); self.n_layers];
        }
        c.method = method;
        c
    }

    pub fn has_moe(&self) -> bool {
        self.moe_layer_mask.iter().any(|&m| m)
    }

    pub fn moe_layers(&self) -> usize {
        self.moe_layer_mask.iter().filter(|&&m| m).count()
    }

    pub fn expert_hidden(&self) -> usize {
        self.d_ff / self.source_experts
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.vocab == 0 {
            return bad("n_layers, d_model, d_ff and vocab must be positive".into());
        }
        if self.seq_len == 0 {
            return bad("seq_len must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model={} is not divisible by n_heads={}",
                self.d_model, self.n_heads
            ));
        }
        if self.moe_layer_mask.len() != self.n_layers {
            return bad(format!(
                "moe_layer_mask has {} entries for {} layers",
                self.moe_layer_mask.len(),
                self.n_layers
            ));
        }
        if self.has_moe() != self.method.is_moe() {
            return bad(format!(
                "method {} requires moe_layer_mask to be {}",
                self.method,
                if self.method.is_moe() { "non-empty" } else { "all false" }
            ));
        }
        if self.has_moe() {
            if self.source_experts == 0 || self.d_ff % self.source_experts != 0 {
                return bad(format!(
                    "d_ff={} is not divisible by N={}",
                    self.d_ff, self.source_experts
                ));
            }
            if self.n_experts == 0 || self.n_experts > self.source_experts {
                return bad(format!(
                    "n_experts={} must be in [1, {}]",
                    self.n_experts, self.source_experts
                ));
            }
            if self.method == Method::Thor && self.n_experts < 2 {
                return bad("thor needs at least 2 experts".into());
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.dropblock_size == 0 || self.dropblock_size % 2 == 0 {
            return bad(format!(
                "dropblock_size must be odd, got {}",
                self.dropblock_size
            ));
        }
        if !(self.init_scale > 0.0) {
            return bad("init_scale must be positive".into());
        }
        Ok(())
    }
}

/// `W2 · act(W1 · x + b1) + b2` on `[rows, d_model]`.
pub fn dense_mlp_forward<'t, T: Element>(
    x: &Var<'t, T>,
    w1: &Var<'t, T>,
    b1: &Var<'t, T>,
    w2: &Var<'t, T>,
    b2: &Var<'t, T>,
    act: Activation,
) -> Result<Var<'t, T>> {
    act.apply(&x.matmul(w1)?.add(b1)?).matmul(w2)?.add(b2)
}

/// Token rows of `table` plus learned positions; `tokens` holds whole
/// sequences of length `seq`.
pub fn embed<'t, T: Element>(
    tokens: &[usize],
    seq: usize,
    table: &Var<'t, T>,
    pos: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let max = pos.value().rows();
    if seq == 0 || seq > max || tokens.len() % seq != 0 {
        return Err(Error::Shape(format!(
            "{} tokens do not form sequences of length {seq} (max {max})",
            tokens.len()
        )));
    }
    let positions: Vec<usize> = (0..tokens.len()).map(|i| i % seq).collect();
    table.embedding(tokens)?.add(&pos.index_rows(&positions)?)
}

/// Projected causal self-attention of `[batch*seq, d]`; no residual.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention<'t, T: Element>(
    x: &Var<'t, T>,
    wq: &Var<'t, T>,
    wk: &Var<'t, T>,
    wv: &Var<'t, T>,
    wo: &Var<'t, T>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var<'t, T>> {
    let q = x.matmul(wq)?;
    let k = x.matmul(wk)?;
    let v = x.matmul(wv)?;
    q.causal_attention(&k, &v, batch, seq, heads)?.matmul(wo)
}

#[derive(Clone, Debug)]
enum MlpIds {
    Dense {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    Moe {
        experts: Vec<[ParamId; 3]>,
        b2: ParamId,
        router: Option<ParamId>,
    },
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    mlp: MlpIds,
    concrete: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct ModelIds {
    tok: ParamId,
    pos: ParamId,
    layers: Vec<LayerIds>,
    lnf: (ParamId, ParamId),
    head_w: ParamId,
    head_b: ParamId,
}

/// Parameter totals by group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub router: usize,
    pub aux: usize,
    pub trainable: usize,
}

/// Per-call forward options.
pub struct ForwardCtx<'r> {
    /// Activated experts per token in MoE layers.
    pub k: usize,
    pub training: bool,
    /// Replace every routed gate by 1.
    pub unit_gates: bool,
    /// Source of dropout masks and THOR pairs while training.
    pub rng: Option<&'r mut RngStream>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval(k: usize) -> Self {
        Self {
            k,
            training: false,
            unit_gates: false,
            rng: None,
        }
    }

    pub fn train(k: usize, rng: &'r mut RngStream) -> Self {
        Self {
            k,
            training: true,
            unit_gates: false,
            rng: Some(rng),
        }
    }
}

/// Expert choices of one MoE layer for every token of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRoute {
    pub layer: usize,
    pub k: usize,
    pub n_experts: usize,
    pub indices: Vec<usize>,
}

pub struct ForwardOut<'t, T> {
    /// `[batch*seq, vocab]`.
    pub logits: Var<'t, T>,
    /// Mean balancing loss over MoE layers (`smoe_learned` only).
    pub balance: Option<Var<'t, T>>,
    /// Summed Concrete regularizer (`concrete` only, training).
    pub concrete_reg: Option<Var<'t, T>>,
    pub routes: Vec<LayerRoute>,
    /// Input of every router-bearing MoE layer, in layer order.
    pub router_inputs: Vec<Var<'t, T>>,
}

/// Parameters plus the configuration that gives them meaning.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore<T>,
    ids: ModelIds,
}

impl<T: Element> Model<T> {
    /// Fresh initialization. MoE layers are cut from a dense MLP drawn with
    /// the same stream a dense model would use, so every method of a seed
    /// starts from identical backbone weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (d, s) = (c.init_scale, seed);
        let mut ps = ParamStore::new();
        let bb = ParamGroup::Backbone;
        let randn = |name: &str, shape: Vec<usize>| {
            Tensor::randn(shape, &mut RngStream::new(s, format!("init/{name}")), d)
        };
        let ones = |n: usize| Tensor::full(vec![n], T::one());
        let zeros = |n: usize| Tensor::<T>::zeros(vec![n]);
        let dm = c.d_model;

        let tok = ps.insert("embed.tok", randn("embed.tok", vec![c.vocab, dm])?, bb, false);
        let pos = ps.insert("embed.pos", randn("embed.pos", vec![c.seq_len, dm])?, bb, false);
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = format!("l{l}");
            let ln1 = (
                ps.insert(format!("{p}.ln1.g"), ones(dm), bb, false),
                ps.insert(format!("{p}.ln1.b"), zeros(dm), bb, false),
            );
            let mut proj = |n: &str| -> Result<ParamId> {
                let name = format!("{p}.attn.{n}");
                let t = randn(&name, vec![dm, dm])?;
                Ok(ps.insert(name, t, bb, false))
            };
            let (wq, wk, wv, wo) = (proj("wq")?, proj("wk")?, proj("wv")?, proj("wo")?);
            let ln2 = (
                ps.insert(format!("{p}.ln2.g"), ones(dm), bb, false),
                ps.insert(format!("{p}.ln2.b"), zeros(dm), bb, false),
            );
            let dense = DenseMlp::init(
                dm,
                c.d_ff,
                &mut RngStream::new(s, format!("init/{p}.mlp")),
                d,
            )?;
            let mlp = if c.moe_layer_mask[l] {
                let layer = modulize(&dense, c.source_experts)?;
                let experts = layer
                    .experts
                    .into_iter()
                    .take(c.n_experts)
                    .enumerate()
                    .map(|(i, e)| {
                        [
                            ps.insert(format!("{p}.moe.e{i}.w1"), e.w1, bb, false),
                            ps.insert(format!("{p}.moe.e{i}.b1"), e.b1, bb, false),
                            ps.insert(format!("{p}.moe.e{i}.w2"), e.w2, bb, false),
                        ]
                    })
                    .collect();
                let b2 = ps.insert(format!("{p}.moe.b2"), layer.b2, bb, false);
                let router = if c.method.has_router() {
                    let st = router_from_stream::<T>(
                        dm,
                        c.n_experts,
                        &mut RngStream::new(s, format!("router-init/{p}")),
                    )?;
                    let frozen = c.method == Method::SmoeDropout;
                    Some(ps.insert(format!("{p}.router"), st.g, ParamGroup::Router, frozen))
                } else {
                    None
                };
                MlpIds::Moe {
                    experts,
                    b2,
                    router,
                }
            } else {
                MlpIds::Dense {
                    w1: ps.insert(format!("{p}.mlp.w1"), dense.w1, bb, false),
                    b1: ps.insert(format!("{p}.mlp.b1"), dense.b1, bb, false),
                    w2: ps.insert(format!("{p}.mlp.w2"), dense.w2, bb, false),
                    b2: ps.insert(format!("{p}.mlp.b2"), dense.b2, bb, false),
                }
            };
            let concrete = (c.method == Method::Concrete).then(|| {
                let logit = (CONCRETE_INIT_P / (1.0 - CONCRETE_INIT_P)).ln();
                ps.insert(
                    format!("{p}.concrete.p_logit"),
                    Tensor::scalar(T::from_f64_lossy(logit)),
                    ParamGroup::Aux,
                    false,
                )
            });
            layers.push(LayerIds {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                mlp,
                concrete,
            });
        }
        let lnf = (
            ps.insert("lnf.g", ones(dm), bb, false),
            ps.insert("lnf.b", zeros(dm), bb, false),
        );
        // Unit-variance features after the final norm; keep logits near zero.
        let head = Tensor::randn(
            vec![dm, c.vocab],
            &mut RngStream::new(s, "init/head.w"),
            d / (dm as f64).sqrt(),
        )?;
        let head_w = ps.insert("head.w", head, bb, false);
        let head_b = ps.insert("head.b", zeros(c.vocab), bb, false);
        Ok(Self {
            config,
            seed,
            params: ps,
            ids: ModelIds {
                tok,
                pos,
                layers,
                lnf,
                head_w,
                head_b,
            },
        })
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            backbone: self.params.count_group(ParamGroup::Backbone),
            router: self.params.count_group(ParamGroup::Router),
            aux: self.params.count_group(ParamGroup::Aux),
            trainable: self.params.trainable_count(),
        }
    }

    /// Router parameter ids of every MoE layer, in layer order.
    pub fn router_ids(&self) -> Vec<ParamId> {
        self.ids
            .layers
            .iter()
            .filter_map(|l| match &l.mlp {
                MlpIds::Moe { router, .. } => *router,
                MlpIds::Dense { .. } => None,
            })
            .collect()
    }

    /// Combined checksum of all router matrices.
    pub fn router_checksum(&self) -> u64 {
        self.router_ids().iter().fold(0xcbf2_9ce4_8422_2325, |h, &id| {
            (h ^ self.params.value(id).checksum()).wrapping_mul(0x100_0000_01b3)
        })
    }

    /// Checksum over every parameter value, in registration order.
    pub fn checksum(&self) -> u64 {
        self.params.iter().fold(0xcbf2_9ce4_8422_2325, |h, (_, p)| {
            (h ^ p.value.checksum()).wrapping_mul(0x100_0000_01b3)
        })
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Element>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            params.insert(p.name.clone(), p.value.cast(), p.group, p.frozen);
        }
        Model {
            config: self.config.clone(),
            seed: self.seed,
            params,
            ids: self.ids.clone(),
        }
    }

    /// Runs the model over `batch` sequences laid out back to back.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        tokens: &[usize],
        batch: usize,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ForwardOut<'t, T>> {
        let c = &self.config;
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::Shape(format!(
                "{} tokens do not split into {batch} sequences",
                tokens.len()
            )));
        }
        let seq = tokens.len() / batch;
        if seq > c.seq_len {
            return Err(Error::Shape(format!(
                "sequence length {seq} exceeds configured {}",
                c.seq_len
            )));
        }
        if c.has_moe() && (ctx.k == 0 || ctx.k > c.n_experts) {
            return Err(Error::InvalidArgument(format!(
                "k={} outside [1, {}]",
                ctx.k, c.n_experts
            )));
        }
        let stochastic = matches!(
            c.method,
            Method::DenseDropout | Method::Concrete | Method::Dropblock | Method::Thor
        );
        if ctx.training && stochastic && ctx.rng.is_none() {
            return Err(Error::InvalidArgument(format!(
                "training {} needs a random stream",
                c.method
            )));
        }
        let p = |id: ParamId| tape.param(&self.params, id);
        let ids = &self.ids;
        let mut x = embed(tokens, seq, &p(ids.tok), &p(ids.pos))?;
        let mut balance: Vec<Var<'t, T>> = Vec::new();
        let mut concrete_reg: Option<Var<'t, T>> = None;
        let mut routes = Vec::new();
        let mut router_inputs = Vec::new();
        let mut thor_eval = RngStream::new(self.seed, "thor-eval");

        for (l, li) in ids.layers.iter().enumerate() {
            let h = x.layernorm(&p(li.ln1.0), &p(li.ln1.1), LN_EPS)?;
            let a = causal_attention(
                &h,
                &p(li.wq),
                &p(li.wk),
                &p(li.wv),
                &p(li.wo),
                batch,
                seq,
                c.n_heads,
            )?;
            x = x.add(&a)?;
            let h = x.layernorm(&p(li.ln2.0), &p(li.ln2.1), LN_EPS)?;
            let y = match &li.mlp {
                MlpIds::Dense { w1, b1, w2, b2 } => {
                    let (w2v, b2v) = (p(*w2), p(*b2));
                    let hid = c.activation.apply(&h.matmul(&p(*w1))?.add(&p(*b1))?);
                    let hid = match (c.method, ctx.training, ctx.rng.as_deref_mut()) {
                        (Method::DenseDropout, true, Some(rng)) => {
                            baselines::dropout(&hid, c.dropout, rng, true)?
                        }
                        (Method::Dropblock, true, Some(rng)) => {
                            baselines::dropblock(&hid, c.dropout, c.dropblock_size, rng, true)?
                        }
                        (Method::Concrete, true, Some(rng)) => {
                            let logit = p(li.concrete.expect("concrete layer has p_logit"));
                            let (out, _) =
                                baselines::concrete_dropout(&hid, &logit, CONCRETE_TEMP, rng)?;
                            let reg = baselines::concrete_regularizer(
                                &logit,
                                &[w2v, b2v],
                                c.d_ff,
                                CONCRETE_WEIGHT_REG,
                                CONCRETE_DROPOUT_REG,
                            )?;
                            concrete_reg = Some(match concrete_reg {
                                Some(acc) => acc.add(&reg)?,
                                None => reg,
                            });
                            out
                        }
                        _ => hid,
                    };
                    hid.matmul(&w2v)?.add(&b2v)?
                }
                MlpIds::Moe {
                    experts,
                    b2,
                    router,
                } => {
                    let ev: Vec<ExpertVars<'t, T>> = experts
                        .iter()
                        .map(|e| ExpertVars {
                            w1: p(e[0]),
                            b1: p(e[1]),
                            w2: p(e[2]),
                        })
                        .collect();
                    let (decision, gates) = match router {
                        Some(g) => {
                            router_inputs.push(h.clone());
                            let (decision, probs) = route(&h, &p(*g), ctx.k)?;
                            if c.method == Method::SmoeLearned && ctx.training {
                                balance.push(baselines::balance_loss_var(&probs, &decision)?);
                            }
                            let gates = if ctx.unit_gates {
                                Gates::Unit
                            } else {
                                Gates::Probs(probs)
                            };
                            (decision, gates)
                        }
                        None => {
                            let rng = match (ctx.training, ctx.rng.as_deref_mut()) {
                                (true, Some(r)) => r,
                                _ => &mut thor_eval,
                            };
                            let mut sets = Vec::with_capacity(tokens.len());
                            for _ in 0..batch {
                                let set = baselines::random_experts(rng, c.n_experts, ctx.k)?;
                                sets.extend(std::iter::repeat_n(set, seq));
                            }
                            let gate = T::from_f64_lossy(1.0 / ctx.k as f64);
                            let d = RoutingDecision::fixed(sets, c.n_experts, gate)?;
                            let gates = if ctx.unit_gates {
                                Gates::Unit
                            } else {
                                Gates::Fixed
                            };
                            (d, gates)
                        }
                    };
                    let y = expert_layer_forward(&h, &ev, &p(*b2), &decision, &gates, c.activation)?;
                    routes.push(LayerRoute {
                        layer: l,
                        k: decision.k,
                        n_experts: decision.n_experts,
                        indices: decision.indices,
                    });
                    y
                }
            };
            x = x.add(&y)?;
        }
        let h = x.layernorm(&p(ids.lnf.0), &p(ids.lnf.1), LN_EPS)?;
        let logits = h.matmul(&p(ids.head_w))?.add(&p(ids.head_b))?;
        let balance = match balance.len() {
            0 => None,
            n => {
                let mut acc = balance[0];
                for b in &balance[1..] {
                    acc = acc.add(b)?;
                }
                Some(acc.scale(1.0 / n as f64))
            }
        };
        Ok(ForwardOut {
            logits,
            balance,
            concrete_reg,
            routes,
            router_inputs,
        })
    }

    /// Logits as a plain tensor, evaluation mode.
    pub fn logits(&self, tokens: &[usize], batch: usize, k: usize) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = self.forward(&tape, tokens, batch, &mut ForwardCtx::eval(k))?;
        Ok((*out.logits.value()).clone())
    }

    /// Parameters of expert `e` in MoE layer `layer`: `[w1, b1, w2]`.
    pub fn expert_ids(&self, layer: usize) -> Option<(&[[ParamId; 3]], ParamId, Option<ParamId>)> {
        match &self.ids.layers.get(layer)?.mlp {
            MlpIds::Moe {
                experts,
                b2,
                router,
            } => Some((experts, *b2, *router)),
            MlpIds::Dense { .. } => None,
        }
    }
}

//! Post-training analyses: slimmable `k` sweeps, expert voting and
//! subnetwork selection, analytic FLOPs, single-expert distillation.
//!
//! # FLOPs
//!
//! Per-token forward cost, counting a multiply-add as two operations, with
//! `d = d_model`, `S = seq_len`, `h = d_ff / source_experts`:
//!
//! ```text
//! embedding add            d
//! per layer  layernorms    2 · 5d
//!            attention     6d² (QKV) + 2Sd (scores) + 2Sd (mix) + 2d² (out)
//!            residuals     2d
//!            dense MLP     4·d·d_ff
//!            MoE layer     2·d·N (router, if any) + k · 4·d·h
//! final layernorm          5d
//! vocab projection         2·d·V
//! ```
//!
//! At `k = N` the experts cost exactly the dense MLP, so a routed model
//! exceeds its dense twin by the router term alone.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::moe::topk_select;
use crate::nn::{ForwardCtx, Method, Model, ModelConfig};
use crate::schedule::KSchedule;
use crate::tensor::{Element, Tensor};
use crate::training::{
    bpc, group_windows, train_model, Batch, Corpus, LossTerm, StepRecord, TrainConfig, TrainRun,
};

/// Default distillation weights.
pub const DISTILL_ALPHA: f64 = 0.5;
pub const DISTILL_TEMP: f64 = 2.0;

/// Analytic parameter count of the backbone (everything but routers and
/// dropout-rate parameters).
pub fn backbone_params(c: &ModelConfig) -> usize {
    let d = c.d_model;
    let mut n = c.vocab * d + c.seq_len * d + 2 * d + d * c.vocab + c.vocab;
    for &moe in &c.moe_layer_mask {
        n += 4 * d + 4 * d * d;
        n += if moe {
            c.n_experts * expert_params(c) + d
        } else {
            2 * d * c.d_ff + c.d_ff + d
        };
    }
    n
}

/// Parameters of one expert.
pub fn expert_params(c: &ModelConfig) -> usize {
    let h = c.expert_hidden();
    2 * c.d_model * h + h
}

/// Router parameters over all MoE layers.
pub fn router_params(c: &ModelConfig) -> usize {
    if c.method.has_router() {
        c.moe_layers() * c.d_model * c.n_experts
    } else {
        0
    }
}

/// Parameters touched per token at `k`: everything outside the experts,
/// `k` experts per MoE layer, and the routers.
pub fn activated_params(c: &ModelConfig, k: usize) -> usize {
    if !c.has_moe() {
        return backbone_params(c);
    }
    let all = backbone_params(c);
    let experts = c.moe_layers() * c.n_experts * expert_params(c);
    all - experts + c.moe_layers() * k * expert_params(c) + router_params(c)
}

/// Components of [`count_flops`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopsBreakdown {
    /// Everything except routers and experts.
    pub base: u64,
    /// All routers together.
    pub router: u64,
    /// One expert in one layer.
    pub per_expert: u64,
    pub moe_layers: u64,
}

pub fn flops_breakdown(c: &ModelConfig, seq_len: usize) -> FlopsBreakdown {
    let d = c.d_model as u64;
    let s = seq_len as u64;
    let mut base = d + 5 * d + 2 * d * c.vocab as u64;
    let mut moe_layers = 0;
    for &moe in &c.moe_layer_mask {
        base += 10 * d + 8 * d * d + 4 * s * d + 2 * d;
        if moe {
            moe_layers += 1;
        } else {
            base += 4 * d * c.d_ff as u64;
        }
    }
    let router = if c.method.has_router() {
        moe_layers * 2 * d * c.n_experts as u64
    } else {
        0
    };
    FlopsBreakdown {
        base,
        router,
        per_expert: 4 * d * c.expert_hidden() as u64,
        moe_layers,
    }
}

/// Per-token forward FLOPs at `k` activated experts; see the module docs.
pub fn count_flops(c: &ModelConfig, k: usize, seq_len: usize) -> u64 {
    let b = flops_breakdown(c, seq_len);
    b.base + b.router + k as u64 * b.per_expert * b.moe_layers
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub k: usize,
    pub activated_params: usize,
    pub flops_per_token: u64,
    pub val_bpc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: Method,
    pub seed: u64,
    pub checkpoint_id: String,
    pub rows: Vec<EvalRow>,
}

pub const REPORT_HEADER: &str = "method,seed,k,activated_params,flops_per_token,val_bpc";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.method, self.seed, r.k, r.activated_params, r.flops_per_token, r.val_bpc
            ));
        }
        s
    }

    /// Parses [`EvalReport::to_csv`] output; the checkpoint id is not stored.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(REPORT_HEADER) {
            return Err(Error::Config("report CSV has an unexpected header".into()));
        }
        let mut method = None;
        let mut seed = 0;
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Config(format!("malformed report row {line:?}"));
            if f.len() != 6 {
                return Err(bad());
            }
            method = Some(f[0].parse::<Method>()?);
            seed = f[1].parse().map_err(|_| bad())?;
            rows.push(EvalRow {
                k: f[2].parse().map_err(|_| bad())?,
                activated_params: f[3].parse().map_err(|_| bad())?,
                flops_per_token: f[4].parse().map_err(|_| bad())?,
                val_bpc: f[5].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self {
            method: method.ok_or_else(|| Error::Config("empty report".into()))?,
            seed,
            checkpoint_id: String::new(),
            rows,
        })
    }

    pub fn bpc_at(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.val_bpc)
    }
}

/// Evaluates one model at every `k` in `ks` (sorted, deduplicated). Dense
/// models have no `k` and yield a single row at the largest requested value.
pub fn slimmable_sweep<T: Element>(
    model: &Model<T>,
    windows: &[Batch],
    ks: &[usize],
    checkpoint_id: &str,
) -> Result<EvalReport> {
    let c = &model.config;
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        return Err(Error::InvalidArgument("no k values to sweep".into()));
    }
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > c.n_experts) {
        return Err(Error::InvalidArgument(format!(
            "k={bad} outside [1, {}]",
            c.n_experts
        )));
    }
    if !c.has_moe() {
        ks = vec![*ks.last().unwrap()];
    }
    let rows = ks
        .iter()
        .map(|&k| {
            Ok(EvalRow {
                k,
                activated_params: activated_params(c, k),
                flops_per_token: count_flops(c, k, c.seq_len),
                val_bpc: bpc(model, windows, k)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        method: c.method,
        seed: model.seed,
        checkpoint_id: checkpoint_id.to_string(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerVotes {
    pub layer: usize,
    pub counts: Vec<u64>,
    pub tokens_seen: u64,
    pub k_used: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub layers: Vec<LayerVotes>,
}

/// Counts top-`k` membership of every expert over one pass through `windows`.
pub fn vote_experts<T: Element>(model: &Model<T>, windows: &[Batch], k: usize) -> Result<VoteTally> {
    let c = &model.config;
    if !c.has_moe() {
        return Err(Error::NoExperts(format!(
            "method {} has no expert layers",
            c.method
        )));
    }
    let mut layers: Vec<LayerVotes> = Vec::new();
    for b in group_windows(windows, 8) {
        let tape = crate::autograd::Tape::new();
        let out = model.forward(&tape, &b.inputs, b.batch, &mut ForwardCtx::eval(k))?;
        for (i, r) in out.routes.iter().enumerate() {
            if layers.len() <= i {
                layers.push(LayerVotes {
                    layer: r.layer,
                    counts: vec![0; r.n_experts],
                    tokens_seen: 0,
                    k_used: r.k,
                });
            }
            let lv = &mut layers[i];
            for &e in &r.indices {
                lv.counts[e] += 1;
            }
            lv.tokens_seen += (r.indices.len() / r.k) as u64;
        }
    }
    Ok(VoteTally { layers })
}

/// Experts kept per layer: the `m` highest counts, ties to the lower index,
/// returned in ascending index order.
pub fn most_voted(counts: &[u64], m: usize) -> Result<Vec<usize>> {
    let as_f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let (mut keep, _) = topk_select(&as_f, m)?;
    keep.sort_unstable();
    Ok(keep)
}

/// Keeps the `m` most voted experts in every MoE layer and the matching
/// router columns. The result has `n_experts = m` and evaluates at `k <= m`.
pub fn select_subnetwork<T: Element>(
    model: &Model<T>,
    tally: &VoteTally,
    m: usize,
) -> Result<Model<T>> {
    let c = &model.config;
    if !c.has_moe() {
        return Err(Error::NoExperts(format!("method {} has no expert layers", c.method)));
    }
    if m == 0 || m > c.n_experts {
        return Err(Error::InvalidArgument(format!(
            "m={m} outside [1, {}]",
            c.n_experts
        )));
    }
    if tally.layers.len() != c.moe_layers() {
        return Err(Error::InvalidArgument(format!(
            "tally covers {} layers, model has {} MoE layers",
            tally.layers.len(),
            c.moe_layers()
        )));
    }
    let mut cfg = c.clone();
    cfg.n_experts = m;
    let mut out = Model::new(cfg, model.seed)?;
    let mut done = vec![false; out.params.len()];
    for lv in &tally.layers {
        let keep = most_voted(&lv.counts, m)?;
        let (src, _, src_router) = model
            .expert_ids(lv.layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {} has no experts", lv.layer)))?;
        let (dst, _, dst_router) = out.expert_ids(lv.layer).expect("same layout");
        let (src, dst) = (src.to_vec(), dst.to_vec());
        for (j, &e) in keep.iter().enumerate() {
            for t in 0..3 {
                let v = model.params.value(src[e][t]).clone();
                out.params.set_value(dst[j][t], v)?;
                done[dst[j][t].0] = true;
            }
        }
        if let (Some(s), Some(d)) = (src_router, dst_router) {
            let g = model.params.value(s);
            let cols: Vec<T> = (0..g.rows())
                .flat_map(|r| keep.iter().map(move |&e| g.row(r)[e]))
                .collect();
            out.params.set_value(d, Tensor::new(vec![g.rows(), m], cols)?)?;
            done[d.0] = true;
        }
    }
    let names: Vec<(usize, String)> = out
        .params
        .iter()
        .filter(|(id, _)| !done[id.0])
        .map(|(id, p)| (id.0, p.name.clone()))
        .collect();
    for (i, name) in names {
        let src = model
            .params
            .id(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
        out.params
            .set_value(crate::autograd::ParamId(i), model.params.value(src).clone())?;
    }
    Ok(out)
}

/// Student shape for distillation: the teacher with a single expert of
/// width `d_ff / N` in each MoE layer.
pub fn single_expert_config(teacher: &ModelConfig) -> ModelConfig {
    let mut c = teacher.clone();
    if c.has_moe() {
        c.n_experts = 1;
        c.method = Method::SmoeDropout;
    }
    c
}

/// Training configuration of a distilled student (or its scratch twin):
/// `k = 1` throughout.
pub fn student_train_config(base: &TrainConfig, student: ModelConfig, steps: usize) -> TrainConfig {
    let mut t = base.clone();
    t.model = student;
    t.steps = steps;
    t.ksched = KSchedule {
        k_min: 1,
        k_max: 1,
        total_steps: steps,
        mode: crate::schedule::KMode::Constant,
    };
    t
}

/// One row of the distillation log.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillRecord {
    pub step: usize,
    pub ce: f64,
    pub kd: f64,
    pub val_bpc: Option<f64>,
}

pub const DISTILL_LOG_HEADER: &str = "step,lr,ce_nats,kd_loss,val_bpc";

pub struct DistillRun {
    pub run: TrainRun,
    pub kd: Vec<f64>,
}

impl DistillRun {
    pub fn records(&self) -> Vec<DistillRecord> {
        self.run
            .log
            .iter()
            .zip(&self.kd)
            .map(|(r, &kd)| DistillRecord {
                step: r.step,
                ce: r.train_loss,
                kd,
                val_bpc: r.val_bpc_k,
            })
            .collect()
    }

    pub fn log_csv(&self) -> String {
        let mut s = format!("{DISTILL_LOG_HEADER}\n");
        for (r, &kd) in self.run.log.iter().zip(&self.kd) {
            let v = r.val_bpc_k.map(|x| x.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", r.step, r.lr, r.train_loss, kd, v));
        }
        s
    }
}

struct KdTerm<'a> {
    teacher: &'a Model<f32>,
    teacher_k: usize,
    alpha: f64,
    temp: f64,
    kd: Vec<f64>,
}

impl LossTerm for KdTerm<'_> {
    fn ce_weight(&self) -> f64 {
        self.alpha
    }

    fn term<'t>(&mut self, batch: &Batch, logits: &Var<'t, f32>) -> Result<Option<Var<'t, f32>>> {
        let t_logits = self.teacher.logits(&batch.inputs, batch.batch, self.teacher_k)?;
        let (rows, v) = (t_logits.rows(), t_logits.cols());
        let mut pt = Vec::with_capacity(rows * v);
        let mut lpt = Vec::with_capacity(rows * v);
        for r in 0..rows {
            let z: Vec<f64> = t_logits.row(r).iter().map(|&x| x as f64 / self.temp).collect();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = z.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for x in z {
                pt.push((x - lse).exp() as f32);
                lpt.push((x - lse) as f32);
            }
        }
        let ls = logits.scale(1.0 / self.temp).log_softmax();
        let lpt = logits.tape().constant(Tensor::new(vec![rows, v], lpt)?);
        let kl = lpt
            .sub(&ls)?
            .mul_const(Tensor::new(vec![rows, v], pt)?)?
            .sum()
            .scale(1.0 / rows as f64);
        self.kd.push(kl.item() as f64);
        if self.alpha == 1.0 {
            return Ok(None);
        }
        Ok(Some(kl.scale((1.0 - self.alpha) * self.temp * self.temp)))
    }
}

/// Trains a fresh student (initialized from `config.seed`) on
/// `alpha · CE + (1 − alpha) · temp² · KL(teacher_T ‖ student_T)`, where
/// both distributions are softened by `temp` and the teacher runs at
/// `teacher_k` experts.
pub fn distill(
    teacher: &Model<f32>,
    config: &TrainConfig,
    corpus: &Corpus,
    alpha: f64,
    temp: f64,
    teacher_k: usize,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<DistillRun> {
    if !(0.0..=1.0).contains(&alpha) || !(temp > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "distillation needs alpha in [0, 1] and temp > 0, got {alpha}, {temp}"
        )));
    }
    if teacher.config.vocab != config.model.vocab {
        return Err(Error::Config("teacher and student vocabularies differ".into()));
    }
    let student = Model::new(config.model.clone(), config.seed)?;
    let mut term = KdTerm {
        teacher,
        teacher_k,
        alpha,
        temp,
        kd: Vec::new(),
    };
    let run = train_model(config, corpus, student, &mut term, on_step)?;
    Ok(DistillRun { run, kd: term.kd })
}

/// BPC-versus-activated-parameters chart, one polyline per report.
pub fn sweep_svg(reports: &[EvalReport]) -> String {
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let pts: Vec<(f64, f64)> = reports
        .iter()
        .flat_map(|r| r.rows.iter().map(|x| (x.activated_params as f64, x.val_bpc)))
        .collect();
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| {
        pts.iter().map(sel).fold(init, f)
    };
    let (x0, x1) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
    let (y0, y1) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let sx = |x: f64| pad + (x - x0) / span(x0, x1) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / span(y0, y1) * (h - 2.0 * pad);
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{t}\" text-anchor=\"middle\">activated parameters</text>\n\
         <text x=\"15\" y=\"{cy}\" transform=\"rotate(-90 15 {cy})\" text-anchor=\"middle\">val BPC</text>\n\
         <text x=\"{pad}\" y=\"{lb}\">{x0:.0}</text><text x=\"{r}\" y=\"{lb}\" text-anchor=\"end\">{x1:.0}</text>\n\
         <text x=\"{l}\" y=\"{b}\" text-anchor=\"end\">{y0:.3}</text><text x=\"{l}\" y=\"{pad}\" text-anchor=\"end\">{y1:.3}</text>\n",
        b = h - pad,
        r = w - pad,
        cx = w / 2.0,
        t = h - 15.0,
        cy = h / 2.0,
        lb = h - pad + 15.0,
        l = pad - 5.0,
    );
    for (i, rep) in reports.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let line: Vec<String> = rep
            .rows
            .iter()
            .map(|x| format!("{:.1},{:.1}", sx(x.activated_params as f64), sy(x.val_bpc)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            line.join(" ")
        ));
        for x in &rep.rows {
            s.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"><title>k={} bpc={:.4}</title></circle>\n",
                sx(x.activated_params as f64),
                sy(x.val_bpc),
                x.k,
                x.val_bpc
            ));
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{} seed {}</text>\n",
            w - pad - 150.0,
            pad + 15.0 * i as f64,
            rep.method,
            rep.seed
        ));
    }
    s.push_str("</svg>\n");
    s
}

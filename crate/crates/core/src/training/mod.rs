//! Deterministic training over a byte corpus.

mod checkpoint;
mod corpus;
mod data;
mod optim;

pub use checkpoint::{Checkpoint, NamedTensor, MAGIC, VERSION};
pub use corpus::synthetic_corpus;
pub use data::{eval_windows, group_windows, make_batches, Batch, BatchIter, Corpus};
pub use optim::{adam_step, clip_grad_norm, AdamHyper, AdamState, OptimizerKind};

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::baselines::{self, BALANCE_WEIGHT, THOR_COEF};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Method, Model, ModelConfig};
use crate::rng::RngStream;
use crate::schedule::{KSchedule, LrDecay, LrSchedule};
use crate::tensor::Element;

/// Sequences per evaluation forward pass.
const EVAL_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxWeights {
    pub balance: f64,
    pub thor: f64,
    pub concrete: f64,
}

impl Default for AuxWeights {
    fn default() -> Self {
        Self {
            balance: BALANCE_WEIGHT,
            thor: THOR_COEF,
            concrete: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub ksched: KSchedule,
    pub lr0: f64,
    pub lr_decay: LrDecay,
    pub optimizer: AdamHyper,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub data_path: String,
    pub val_fraction: f64,
    pub aux: AuxWeights,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
    /// Validation interval; `0` means `max(1, steps / 20)`.
    pub val_every: usize,
    /// Validation windows used at periodic checks; `0` means all.
    pub val_windows: usize,
}

impl TrainConfig {
    /// Defaults for `model`: Adam, cosine decay from 2.5e-4, and the `k`
    /// schedule of the method (linear from 2 for SMoE-Dropout, constant 2
    /// for the learnable router and THOR, constant N for dense variants).
    pub fn new(model: ModelConfig, steps: usize) -> Self {
        let n = model.n_experts.max(1);
        let ksched = default_ksched(model.method, n, steps);
        Self {
            model,
            ksched,
            lr0: 2.5e-4,
            lr_decay: LrDecay::Cosine,
            optimizer: AdamHyper::default(),
            batch: 8,
            steps,
            seed: 0,
            data_path: String::new(),
            val_fraction: 0.1,
            aux: AuxWeights::default(),
            grad_clip: 0.0,
            val_every: 0,
            val_windows: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ksched.validate()?;
        if self.ksched.total_steps != self.steps {
            return Err(Error::Config(format!(
                "k schedule spans {} steps but training runs {}",
                self.ksched.total_steps, self.steps
            )));
        }
        if self.model.has_moe() && self.ksched.k_max > self.model.n_experts {
            return Err(Error::Config(format!(
                "k_max={} exceeds N={}",
                self.ksched.k_max, self.model.n_experts
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            lr0: self.lr0,
            total_steps: self.steps,
            decay: self.lr_decay,
        }
    }

    pub fn val_interval(&self) -> usize {
        if self.val_every > 0 {
            self.val_every
        } else {
            (self.steps / 20).max(1)
        }
    }

    /// Sets the step count and rebuilds the `k` schedule to span it.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self.ksched.total_steps = steps;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn default_ksched(method: Method, n: usize, steps: usize) -> KSchedule {
    let k2 = 2.min(n);
    let (k_min, k_max, mode) = match method {
        Method::SmoeDropout => (k2, n, crate::schedule::KMode::Linear),
        Method::SmoeLearned | Method::Thor => (k2, k2, crate::schedule::KMode::Constant),
        _ => (n, n, crate::schedule::KMode::Constant),
    };
    KSchedule {
        k_min,
        k_max,
        total_steps: steps,
        mode,
    }
}

/// One row of the step log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub k: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_bpc_k: Option<f64>,
    pub val_bpc_n: Option<f64>,
}

pub const STEP_LOG_HEADER: &str = "step,k,lr,train_loss_nats,val_bpc@k,val_bpc@N";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.k,
            self.lr,
            self.train_loss,
            opt(self.val_bpc_k),
            opt(self.val_bpc_n)
        )
    }
}

pub fn step_log_csv(log: &[StepRecord]) -> String {
    let mut s = String::from(STEP_LOG_HEADER);
    s.push('\n');
    for r in log {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub struct TrainRun {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub log: Vec<StepRecord>,
    /// Model forward passes made while computing training losses.
    pub forward_passes: usize,
    /// `(step, router checksum)` at every validation point.
    pub router_checksums: Vec<(usize, u64)>,
}

impl TrainRun {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, &self.config, self.config.steps)
    }
}

/// Mean cross-entropy over the windows in bits per byte, evaluated at `k`.
pub fn bpc<T: Element>(model: &Model<T>, windows: &[Batch], k: usize) -> Result<f64> {
    Ok(mean_nats(model, windows, k)? / std::f64::consts::LN_2)
}

/// Mean cross-entropy in nats, accumulated in 64-bit.
pub fn mean_nats<T: Element>(model: &Model<T>, windows: &[Batch], k: usize) -> Result<f64> {
    if model.config.has_moe() && (k == 0 || k > model.config.n_experts) {
        return Err(Error::InvalidArgument(format!(
            "k={k} outside [1, {}]",
            model.config.n_experts
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for b in group_windows(windows, EVAL_BATCH) {
        let logits = model.logits(&b.inputs, b.batch, k)?;
        let v = logits.cols();
        for (r, &t) in b.targets.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let lse = row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
            if t >= v {
                return Err(Error::InvalidArgument(format!("target {t} outside vocab {v}")));
            }
            total += lse - row[t].as_f64();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no evaluation tokens".into()));
    }
    Ok(total / count as f64)
}

/// Extra objective mixed into the training loss.
pub trait LossTerm {
    /// Weight of the cross-entropy term.
    fn ce_weight(&self) -> f64 {
        1.0
    }

    /// Additional loss for one batch given the model's logits.
    fn term<'t>(&mut self, batch: &Batch, logits: &Var<'t, f32>) -> Result<Option<Var<'t, f32>>>;
}

struct NoExtra;

impl LossTerm for NoExtra {
    fn term<'t>(&mut self, _: &Batch, _: &Var<'t, f32>) -> Result<Option<Var<'t, f32>>> {
        Ok(None)
    }
}

/// Trains a fresh model initialized from `config.seed`.
pub fn train(config: &TrainConfig, corpus: &Corpus) -> Result<TrainRun> {
    train_with(config, corpus, &mut |_| {})
}

/// As [`train`], calling `on_step` after every step.
pub fn train_with(
    config: &TrainConfig,
    corpus: &Corpus,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainRun> {
    config.validate()?;
    let model = Model::new(config.model.clone(), config.seed)?;
    train_model(config, corpus, model, &mut NoExtra, on_step)
}

fn add<'t>(a: Var<'t, f32>, b: Option<Var<'t, f32>>, w: f64) -> Result<Var<'t, f32>> {
    match b {
        Some(b) if w != 0.0 => a.add(&b.scale(w)),
        _ => Ok(a),
    }
}

/// The training loop proper, starting from `model`.
pub fn train_model(
    config: &TrainConfig,
    corpus: &Corpus,
    mut model: Model<f32>,
    extra: &mut dyn LossTerm,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainRun> {
    config.validate()?;
    let mc = &model.config;
    let seq = mc.seq_len;
    let n = mc.n_experts;
    let moe = mc.has_moe();
    let method = mc.method;
    let seed = config.seed;
    let mut batches = make_batches(&corpus.train, seq, config.batch, RngStream::new(seed, "batches"))?;
    let mut noise = RngStream::new(seed, "dropout-mask");
    let val = eval_windows(&corpus.val, seq, config.val_windows)?;
    let lr_s = config.lr_schedule();
    let every = config.val_interval();
    let mut state = AdamState::new();
    let mut log = Vec::with_capacity(config.steps);
    let mut passes = 0;
    let mut checksums = vec![(0, model.router_checksum())];

    for step in 0..config.steps {
        let k = config.ksched.k_at(step)?;
        let lr = lr_s.lr_at(step);
        let batch = batches.next().expect("endless iterator");
        let tape = Tape::new();
        let out = model.forward(&tape, &batch.inputs, batch.batch, &mut ForwardCtx::train(k, &mut noise))?;
        passes += 1;
        let ce = out.logits.cross_entropy(&batch.targets)?;
        let (ce_value, mut loss) = if method == Method::Thor {
            let out2 =
                model.forward(&tape, &batch.inputs, batch.batch, &mut ForwardCtx::train(k, &mut noise))?;
            passes += 1;
            let ce2 = out2.logits.cross_entropy(&batch.targets)?;
            let both = ce.add(&ce2)?.scale(0.5);
            let kl = baselines::thor_consistency_logits(&out.logits, &out2.logits)?;
            (both.item() as f64, both.add(&kl.scale(config.aux.thor))?)
        } else {
            (ce.item() as f64, ce)
        };
        loss = add(loss, out.balance, config.aux.balance)?;
        loss = add(loss, out.concrete_reg, config.aux.concrete)?;
        let w = extra.ce_weight();
        if w != 1.0 {
            loss = loss.scale(w);
        }
        loss = add(loss, extra.term(&batch, &out.logits)?, 1.0)?;
        let lv = loss.item() as f64;
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                step,
                loss: lv,
                config: config.to_json(),
            });
        }
        let grads = tape.backward(loss)?;
        model.params.zero_grad();
        model.params.accumulate(&grads);
        drop(grads);
        drop(tape);
        if config.grad_clip > 0.0 {
            clip_grad_norm(&mut model.params, config.grad_clip);
        }
        adam_step(&mut model.params, &mut state, &config.optimizer, lr, step + 1)?;

        let mut rec = StepRecord {
            step,
            k,
            lr,
            train_loss: ce_value,
            val_bpc_k: None,
            val_bpc_n: None,
        };
        if (step + 1) % every == 0 || step + 1 == config.steps {
            let at_k = bpc(&model, &val, k)?;
            rec.val_bpc_k = Some(at_k);
            rec.val_bpc_n = Some(if moe && k != n { bpc(&model, &val, n)? } else { at_k });
            checksums.push((step + 1, model.router_checksum()));
        }
        on_step(&rec);
        log.push(rec);
    }
    Ok(TrainRun {
        config: config.clone(),
        model,
        log,
        forward_passes: passes,
        router_checksums: checksums,
    })
}

/// Reads `config.data_path` and splits it.
pub fn load_corpus(config: &TrainConfig) -> Result<Corpus> {
    if config.data_path.is_empty() {
        return Err(Error::Config("data_path is not set".into()));
    }
    let bytes = std::fs::read(&config.data_path).map_err(|e| {
        Error::Config(format!("data_path {:?} is not readable: {e}", config.data_path))
    })?;
    Corpus::split(&bytes, config.val_fraction)
}

//! Run configuration files.
//!
//! Flat `key = value` lines grouped under `[section]` headers; `#` starts a
//! comment. A top-level `preset` is applied first and every other key
//! overrides it, whatever its position in the file.
//!
//! ```text
//! preset = paper-tiny
//! output_dir = runs/tiny
//!
//! [model]
//! method = smoe_dropout        # dense_dropout concrete dropblock smoe_learned thor smoe_dropout
//! moe_layers = all             # all early middle later every2 none, or indices like 0,1
//!
//! [schedule]
//! k_min = 2
//! k_mode = linear              # linear constant
//!
//! [train]
//! steps = 2000
//! data_path = data/corpus.txt
//!
//! [report]
//! formats = csv,svg
//! sweep_ks = 2,4,8
//! ```
//!
//! Keys: `[model]` n_layers d_model n_heads d_ff n_experts vocab seq_len
//! moe_layers method activation dropout dropblock_size init_scale;
//! `[schedule]` k_min k_max k_mode lr0 lr_decay; `[train]` steps batch seed
//! data_path val_fraction optimizer beta1 beta2 eps weight_decay grad_clip
//! val_every val_windows; `[aux]` balance thor concrete; `[report]` formats
//! sweep_ks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Activation, Method, ModelConfig};
use crate::schedule::{KMode, LrDecay};
use crate::training::{default_ksched, OptimizerKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    PaperTiny,
    PaperSmall,
    Custom,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::PaperTiny => "paper-tiny",
            Preset::PaperSmall => "paper-small",
            Preset::Custom => "custom",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-tiny" => Ok(Preset::PaperTiny),
            "paper-small" => Ok(Preset::PaperSmall),
            "custom" => Ok(Preset::Custom),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

/// 2 layers, d=128, 4 heads, d_ff=512, N=8, seq 64, batch 8, 2000 steps.
pub fn paper_tiny(method: Method) -> TrainConfig {
    let mut t = TrainConfig::new(ModelConfig::tiny(method), 2000);
    t.lr0 = 2e-3;
    t
}

/// 4 layers, d=256, 4 heads, d_ff=2048, N=16, seq 128, batch 8, 10000 steps.
pub fn paper_small(method: Method) -> TrainConfig {
    let n_layers = 4;
    let model = ModelConfig {
        n_layers,
        d_model: 256,
        n_heads: 4,
        d_ff: 2048,
        n_experts: 16,
        source_experts: 16,
        seq_len: 128,
        moe_layer_mask: vec![method.is_moe(); n_layers],
        ..ModelConfig::tiny(method)
    };
    let mut t = TrainConfig::new(model, 10_000);
    t.lr0 = 1e-3;
    t
}

/// Named MoE layer placements over `n` layers.
pub fn layer_mask(spec: &str, n: usize) -> Result<Vec<bool>> {
    let half = n.div_ceil(2);
    let mask: Vec<bool> = match spec {
        "all" => vec![true; n],
        "none" => vec![false; n],
        "early" => (0..n).map(|i| i < half).collect(),
        "later" => (0..n).map(|i| i >= n - half).collect(),
        "middle" => {
            let lo = (n - half) / 2;
            (0..n).map(|i| i >= lo && i < lo + half).collect()
        }
        "every2" => (0..n).map(|i| i % 2 == 1 || n == 1).collect(),
        list => {
            let mut m = vec![false; n];
            for part in list.split(',') {
                let i: usize = part
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad moe_layers value {spec:?}")))?;
                if i >= n {
                    return Err(Error::Config(format!("moe layer {i} out of range {n}")));
                }
                m[i] = true;
            }
            m
        }
    };
    Ok(mask)
}

fn mask_spec(mask: &[bool]) -> String {
    if mask.iter().all(|&m| !m) {
        return "none".into();
    }
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub preset: Preset,
    pub csv: bool,
    pub svg: bool,
    /// `k` values of the final sweep; empty means `{N/4, N/2, N}`.
    pub sweep_ks: Vec<usize>,
}

impl RunConfig {
    pub fn from_preset(preset: Preset, method: Method) -> Self {
        let train = match preset {
            Preset::PaperSmall => paper_small(method),
            _ => paper_tiny(method),
        };
        Self {
            train,
            output_dir: PathBuf::from("runs"),
            preset,
            csv: true,
            svg: true,
            sweep_ks: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<(String, String), (usize, String)> = BTreeMap::new();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            entries.insert((section.clone(), k.trim().to_string()), (no + 1, v.trim().to_string()));
        }
        let mut take = |s: &str, k: &str| entries.remove(&(s.to_string(), k.to_string()));

        let preset: Preset = match take("", "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Custom,
        };
        let method: Method = match take("model", "method") {
            Some((_, v)) => v.parse()?,
            None => Method::SmoeDropout,
        };
        let mut rc = RunConfig::from_preset(preset, method);
        if let Some((_, v)) = take("", "output_dir") {
            rc.output_dir = PathBuf::from(v);
        }
        let t = &mut rc.train;
        let m = &mut t.model;

        fn num<F: FromStr>(e: Option<(usize, String)>, key: &str, dst: &mut F) -> Result<()> {
            if let Some((line, v)) = e {
                *dst = v
                    .parse()
                    .map_err(|_| Error::Config(format!("line {line}: bad value {v:?} for {key}")))?;
            }
            Ok(())
        }
        num(take("model", "n_layers"), "n_layers", &mut m.n_layers)?;
        num(take("model", "d_model"), "d_model", &mut m.d_model)?;
        num(take("model", "n_heads"), "n_heads", &mut m.n_heads)?;
        num(take("model", "d_ff"), "d_ff", &mut m.d_ff)?;
        num(take("model", "n_experts"), "n_experts", &mut m.n_experts)?;
        m.source_experts = m.n_experts;
        num(take("model", "source_experts"), "source_experts", &mut m.source_experts)?;
        num(take("model", "vocab"), "vocab", &mut m.vocab)?;
        num(take("model", "seq_len"), "seq_len", &mut m.seq_len)?;
        num(take("model", "dropout"), "dropout", &mut m.dropout)?;
        num(take("model", "dropblock_size"), "dropblock_size", &mut m.dropblock_size)?;
        num(take("model", "init_scale"), "init_scale", &mut m.init_scale)?;
        if let Some((_, v)) = take("model", "activation") {
            m.activation = v.parse::<Activation>()?;
        }
        let default_mask = if method.is_moe() { "all" } else { "none" };
        let spec = take("model", "moe_layers").map(|e| e.1);
        m.moe_layer_mask = layer_mask(spec.as_deref().unwrap_or(default_mask), m.n_layers)?;

        num(take("train", "steps"), "steps", &mut t.steps)?;
        num(take("train", "batch"), "batch", &mut t.batch)?;
        num(take("train", "seed"), "seed", &mut t.seed)?;
        if let Some((_, v)) = take("train", "data_path") {
            t.data_path = v;
        }
        num(take("train", "val_fraction"), "val_fraction", &mut t.val_fraction)?;
        if let Some((line, v)) = take("train", "optimizer") {
            t.optimizer.kind = match v.as_str() {
                "adam" => OptimizerKind::Adam,
                "adamw" => OptimizerKind::AdamW,
                _ => return Err(Error::Config(format!("line {line}: unknown optimizer {v:?}"))),
            };
        }
        num(take("train", "beta1"), "beta1", &mut t.optimizer.beta1)?;
        num(take("train", "beta2"), "beta2", &mut t.optimizer.beta2)?;
        num(take("train", "eps"), "eps", &mut t.optimizer.eps)?;
        num(take("train", "weight_decay"), "weight_decay", &mut t.optimizer.weight_decay)?;
        num(take("train", "grad_clip"), "grad_clip", &mut t.grad_clip)?;
        num(take("train", "val_every"), "val_every", &mut t.val_every)?;
        num(take("train", "val_windows"), "val_windows", &mut t.val_windows)?;

        t.ksched = default_ksched(method, m.n_experts.max(1), t.steps);
        num(take("schedule", "k_min"), "k_min", &mut t.ksched.k_min)?;
        num(take("schedule", "k_max"), "k_max", &mut t.ksched.k_max)?;
        if let Some((line, v)) = take("schedule", "k_mode") {
            t.ksched.mode = match v.as_str() {
                "linear" => KMode::Linear,
                "constant" => KMode::Constant,
                _ => return Err(Error::Config(format!("line {line}: unknown k_mode {v:?}"))),
            };
        }
        num(take("schedule", "lr0"), "lr0", &mut t.lr0)?;
        if let Some((line, v)) = take("schedule", "lr_decay") {
            t.lr_decay = match v.as_str() {
                "cosine" => LrDecay::Cosine,
                "linear" => LrDecay::Linear,
                _ => return Err(Error::Config(format!("line {line}: unknown lr_decay {v:?}"))),
            };
        }
        num(take("aux", "balance"), "balance", &mut t.aux.balance)?;
        num(take("aux", "thor"), "thor", &mut t.aux.thor)?;
        num(take("aux", "concrete"), "concrete", &mut t.aux.concrete)?;

        if let Some((_, v)) = take("report", "formats") {
            rc.csv = false;
            rc.svg = false;
            for f in v.split(',').map(str::trim) {
                match f {
                    "csv" => rc.csv = true,
                    "svg" => rc.svg = true,
                    _ => return Err(Error::Config(format!("unknown report format {f:?}"))),
                }
            }
        }
        if let Some((line, v)) = take("report", "sweep_ks") {
            rc.sweep_ks = parse_ks(&v)
                .map_err(|_| Error::Config(format!("line {line}: bad sweep_ks {v:?}")))?;
        }
        if let Some(((s, k), (line, _))) = entries.into_iter().next() {
            let key = if s.is_empty() { k } else { format!("{s}.{k}") };
            return Err(Error::Config(format!("line {line}: unknown key {key}")));
        }
        rc.train.validate()?;
        Ok(rc)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text form; [`RunConfig::parse`] reads it back unchanged.
    pub fn render(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset.name());
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "method = {}", m.method);
        for (k, v) in [
            ("n_layers", m.n_layers),
            ("d_model", m.d_model),
            ("n_heads", m.n_heads),
            ("d_ff", m.d_ff),
            ("n_experts", m.n_experts),
            ("source_experts", m.source_experts),
            ("vocab", m.vocab),
            ("seq_len", m.seq_len),
            ("dropblock_size", m.dropblock_size),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "moe_layers = {}", mask_spec(&m.moe_layer_mask));
        let act = match m.activation {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        };
        let _ = writeln!(s, "activation = {act}");
        let _ = writeln!(s, "dropout = {}", m.dropout);
        let _ = writeln!(s, "init_scale = {}", m.init_scale);
        let _ = writeln!(s, "\n[schedule]");
        let _ = writeln!(s, "k_min = {}", t.ksched.k_min);
        let _ = writeln!(s, "k_max = {}", t.ksched.k_max);
        let mode = match t.ksched.mode {
            KMode::Linear => "linear",
            KMode::Constant => "constant",
        };
        let _ = writeln!(s, "k_mode = {mode}");
        let _ = writeln!(s, "lr0 = {}", t.lr0);
        let decay = match t.lr_decay {
            LrDecay::Cosine => "cosine",
            LrDecay::Linear => "linear",
        };
        let _ = writeln!(s, "lr_decay = {decay}");
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "data_path = {}", t.data_path);
        let _ = writeln!(s, "val_fraction = {}", t.val_fraction);
        let opt = match t.optimizer.kind {
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        };
        let _ = writeln!(s, "optimizer = {opt}");
        let _ = writeln!(s, "beta1 = {}", t.optimizer.beta1);
        let _ = writeln!(s, "beta2 = {}", t.optimizer.beta2);
        let _ = writeln!(s, "eps = {}", t.optimizer.eps);
        let _ = writeln!(s, "weight_decay = {}", t.optimizer.weight_decay);
        let _ = writeln!(s, "grad_clip = {}", t.grad_clip);
        let _ = writeln!(s, "val_every = {}", t.val_every);
        let _ = writeln!(s, "val_windows = {}", t.val_windows);
        let _ = writeln!(s, "\n[aux]");
        let _ = writeln!(s, "balance = {}", t.aux.balance);
        let _ = writeln!(s, "thor = {}", t.aux.thor);
        let _ = writeln!(s, "concrete = {}", t.aux.concrete);
        let _ = writeln!(s, "\n[report]");
        let mut formats = Vec::new();
        if self.csv {
            formats.push("csv");
        }
        if self.svg {
            formats.push("svg");
        }
        let _ = writeln!(s, "formats = {}", formats.join(","));
        if !self.sweep_ks.is_empty() {
            let ks: Vec<String> = self.sweep_ks.iter().map(|k| k.to_string()).collect();
            let _ = writeln!(s, "sweep_ks = {}", ks.join(","));
        }
        s
    }

    /// First 12 hex digits of the SHA-256 of the rendered configuration.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.render().as_bytes());
        d.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// The final sweep's `k` values.
    pub fn sweep_ks(&self) -> Vec<usize> {
        if !self.sweep_ks.is_empty() {
            return self.sweep_ks.clone();
        }
        default_sweep_ks(self.train.model.n_experts)
    }
}

/// `{N/4, N/2, N}`, without zeros or duplicates.
pub fn default_sweep_ks(n: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = [n / 4, n / 2, n].into_iter().filter(|&k| k > 0).collect();
    ks.dedup();
    ks
}

/// Comma-separated positive integers.
pub fn parse_ks(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad k list {s:?}")))
        })
        .collect()
}

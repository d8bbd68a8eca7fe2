//! Command implementations behind the `smdk` binary.
//!
//! Every `cmd_*` function prints a human summary to stdout, writes
//! machine-readable files, and returns the process exit code: 0 success,
//! 2 configuration or usage error, 3 non-finite loss, 4 parameter-count
//! parity violation. `SMDK_SEED` overrides the configured seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::{default_sweep_ks, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    backbone_params, distill, router_params, select_subnetwork, single_expert_config,
    slimmable_sweep, student_train_config, sweep_svg, vote_experts, EvalReport, DISTILL_ALPHA,
    DISTILL_TEMP,
};
use crate::training::{
    bpc, eval_windows, load_corpus, step_log_csv, synthetic_corpus, train_with, Checkpoint, Corpus,
    StepRecord, TrainConfig, TrainRun,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_PARITY: i32 = 4;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "SMDK_SEED";

fn exit_with(r: Result<()>) -> i32 {
    match r {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}

/// Applies `SMDK_SEED` if set.
pub fn apply_seed_env(train: &mut TrainConfig) -> Result<()> {
    if let Ok(v) = std::env::var(SEED_ENV) {
        train.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
    }
    Ok(())
}

/// Files written by a training run, all prefixed by the config hash.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainArtifacts {
    pub hash: String,
    pub config_echo: PathBuf,
    pub steps_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub report_csv: PathBuf,
    pub plot: PathBuf,
}

impl TrainArtifacts {
    pub fn for_run(rc: &RunConfig) -> Self {
        let hash = rc.hash();
        let p = |suffix: &str| rc.output_dir.join(format!("{hash}_{suffix}"));
        Self {
            config_echo: p("config.echo"),
            steps_csv: p("steps.csv"),
            checkpoint: p("final.smdk"),
            report_csv: p("report.csv"),
            plot: p("sweep.svg"),
            hash,
        }
    }
}

/// Everything a finished training command produced.
pub struct TrainOutcome {
    pub artifacts: TrainArtifacts,
    pub run: TrainRun,
    pub report: EvalReport,
}

/// Trains, then writes the config echo, step log, final checkpoint and the
/// final sweep report. Prints nothing.
pub fn run_train_with(
    rc: &RunConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    rc.train.validate()?;
    let corpus = load_corpus(&rc.train)?;
    let art = TrainArtifacts::for_run(rc);
    std::fs::create_dir_all(&rc.output_dir).map_err(|e| Error::io(&rc.output_dir, e))?;
    write(&art.config_echo, rc.render())?;
    let t = &rc.train;
    let run = train_with(t, &corpus, on_step)?;
    write(&art.steps_csv, step_log_csv(&run.log))?;
    let ckpt = run.checkpoint();
    ckpt.save(&art.checkpoint)?;
    let val = eval_windows(&corpus.val, t.model.seq_len, 0)?;
    let report = slimmable_sweep(&run.model, &val, &rc.sweep_ks(), &ckpt.id()?)?;
    if rc.csv {
        write(&art.report_csv, report.to_csv())?;
    }
    if rc.svg {
        write(&art.plot, sweep_svg(std::slice::from_ref(&report)))?;
    }
    Ok(TrainOutcome {
        artifacts: art,
        run,
        report,
    })
}

/// [`run_train_with`] with progress printed to stdout.
pub fn run_train(rc: &RunConfig) -> Result<TrainArtifacts> {
    let t = &rc.train;
    println!(
        "training {} ({} layers, d={}, N={}) for {} steps, seed {}, run {}",
        t.model.method, t.model.n_layers, t.model.d_model, t.model.n_experts, t.steps, t.seed, rc.hash()
    );
    let out = run_train_with(rc, &mut |r| {
        if let (Some(a), Some(b)) = (r.val_bpc_k, r.val_bpc_n) {
            println!(
                "step {:>6}  k={:<3} lr={:.3e}  loss={:.4}  val_bpc@k={:.4}  val_bpc@N={:.4}",
                r.step, r.k, r.lr, r.train_loss, a, b
            );
        }
    })?;
    for r in &out.report.rows {
        println!(
            "final k={:<3} params={:<9} flops/token={:<10} val_bpc={:.4}",
            r.k, r.activated_params, r.flops_per_token, r.val_bpc
        );
    }
    println!("wrote {}", out.artifacts.checkpoint.display());
    Ok(out.artifacts)
}

pub fn cmd_train(config_path: &Path) -> i32 {
    exit_with((|| {
        let mut rc = RunConfig::load(config_path)?;
        apply_seed_env(&mut rc.train)?;
        run_train(&rc).map(|_| ())
    })())
}

fn corpus_for(ckpt: &Checkpoint, data: Option<&Path>) -> Result<Corpus> {
    let mut cfg = ckpt.config.clone();
    if let Some(d) = data {
        cfg.data_path = d.display().to_string();
    }
    load_corpus(&cfg)
}

#[derive(Clone, Debug, Default)]
pub struct SweepArgs {
    pub checkpoint: PathBuf,
    /// Empty means `{N/4, N/2, N}`.
    pub ks: Vec<usize>,
    /// Defaults to the checkpoint's `data_path`.
    pub data: Option<PathBuf>,
    /// Defaults to `<checkpoint stem>_sweep.csv` next to the checkpoint.
    pub out: Option<PathBuf>,
    pub plot: Option<PathBuf>,
}

pub fn run_sweep(args: &SweepArgs) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.to_model()?;
    let n = model.config.n_experts;
    let ks = if args.ks.is_empty() {
        default_sweep_ks(n)
    } else {
        args.ks.clone()
    };
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::Config(format!("k={bad} outside [1, {n}]")));
    }
    let corpus = corpus_for(&ckpt, args.data.as_deref())?;
    let val = eval_windows(&corpus.val, model.config.seq_len, 0)?;
    let report = slimmable_sweep(&model, &val, &ks, &ckpt.id()?)?;
    let out = args.out.clone().unwrap_or_else(|| sibling(&args.checkpoint, "sweep.csv"));
    write(&out, report.to_csv())?;
    if let Some(p) = &args.plot {
        write(p, sweep_svg(std::slice::from_ref(&report)))?;
    }
    for r in &report.rows {
        println!(
            "k={:<3} params={:<9} flops/token={:<10} val_bpc={:.4}",
            r.k, r.activated_params, r.flops_per_token, r.val_bpc
        );
    }
    println!("wrote {}", out.display());
    Ok(report)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}_{suffix}"))
}

pub fn cmd_sweep(args: &SweepArgs) -> i32 {
    exit_with(run_sweep(args).map(|_| ()))
}

fn wildcard(pattern: &str, name: &str) -> bool {
    let (p, n): (Vec<char>, Vec<char>) = (pattern.chars().collect(), name.chars().collect());
    let (mut pi, mut ni, mut star, mut mark) = (0, 0, None, 0);
    while ni < n.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == n[ni]) {
            pi += 1;
            ni += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some(pi);
            mark = ni;
            pi += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ni = mark;
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

/// Expands `*` and `?` in any path component. A matched directory stands
/// for every `*_config.echo` file inside it.
pub fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>> {
    let mut current = vec![if pattern.starts_with('/') {
        PathBuf::from("/")
    } else {
        PathBuf::new()
    }];
    for comp in pattern.split('/').filter(|c| !c.is_empty()) {
        let mut next = Vec::new();
        for base in &current {
            if comp.contains(['*', '?']) {
                let dir = if base.as_os_str().is_empty() { Path::new(".") } else { base };
                let Ok(rd) = std::fs::read_dir(dir) else { continue };
                for entry in rd.flatten() {
                    let name = entry.file_name().to_string_lossy().to_string();
                    if wildcard(comp, &name) {
                        next.push(base.join(name));
                    }
                }
            } else {
                let p = base.join(comp);
                if p.exists() {
                    next.push(p);
                }
            }
        }
        current = next;
    }
    let mut out = Vec::new();
    for p in current {
        if p.is_dir() {
            let rd = std::fs::read_dir(&p).map_err(|e| Error::io(&p, e))?;
            for entry in rd.flatten() {
                if entry.file_name().to_string_lossy().ends_with("_config.echo") {
                    out.push(entry.path());
                }
            }
        } else {
            out.push(p);
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// One run in a comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub hash: String,
    pub config: RunConfig,
    pub backbone_params: usize,
    pub router_params: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub ks: Vec<usize>,
    pub parity_ok: bool,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,seed,run,backbone_params,router_params,router_frozen");
        for k in &self.ks {
            let _ = write!(s, ",val_bpc@k{k}");
        }
        s.push('\n');
        for r in &self.rows {
            let m = &r.config.train.model;
            let frozen = m.method == crate::nn::Method::SmoeDropout;
            let _ = write!(
                s,
                "{},{},{},{},{},{}",
                m.method, r.config.train.seed, r.hash, r.backbone_params, r.router_params, frozen
            );
            for &k in &self.ks {
                s.push(',');
                if let Some(b) = r.report.bpc_at(k) {
                    let _ = write!(s, "{b}");
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Loads every run matched by `pattern` (config echoes or directories).
pub fn run_compare(pattern: &str) -> Result<Comparison> {
    let files: Vec<PathBuf> = expand_glob(pattern)?
        .into_iter()
        .filter(|p| p.to_string_lossy().ends_with("_config.echo"))
        .collect();
    if files.len() < 2 {
        return Err(Error::Config(format!(
            "compare needs at least 2 completed runs, {pattern:?} matched {}",
            files.len()
        )));
    }
    let mut rows = Vec::new();
    for f in files {
        let name = f.file_name().unwrap().to_string_lossy().to_string();
        let hash = name.trim_end_matches("_config.echo").to_string();
        let config = RunConfig::load(&f)?;
        let report_path = f.with_file_name(format!("{hash}_report.csv"));
        let text = std::fs::read_to_string(&report_path).map_err(|e| {
            Error::Config(format!("run {hash} has no report {}: {e}", report_path.display()))
        })?;
        let report = EvalReport::from_csv(&text)?;
        let m = &config.train.model;
        rows.push(CompareRow {
            backbone_params: backbone_params(m),
            router_params: router_params(m),
            hash,
            config,
            report,
        });
    }
    rows.sort_by(|a, b| {
        let key = |r: &CompareRow| (r.config.train.model.method.name(), r.config.train.seed);
        key(a).cmp(&key(b))
    });
    let mut ks: Vec<usize> = rows.iter().flat_map(|r| r.report.rows.iter().map(|x| x.k)).collect();
    ks.sort_unstable();
    ks.dedup();
    let parity_ok = rows.iter().all(|r| r.backbone_params == rows[0].backbone_params);
    Ok(Comparison {
        rows,
        ks,
        parity_ok,
    })
}

/// Prints and optionally writes the comparison; exit 4 on a parity
/// violation.
pub fn cmd_compare(pattern: &str, out: Option<&Path>) -> i32 {
    exit_with((|| {
        let cmp = run_compare(pattern)?;
        let csv = cmp.to_csv();
        print!("{}", csv.replace(',', "\t"));
        if let Some(o) = out {
            write(o, &csv)?;
        }
        if !cmp.parity_ok {
            let counts: Vec<String> = cmp
                .rows
                .iter()
                .map(|r| format!("{}={}", r.hash, r.backbone_params))
                .collect();
            return Err(Error::Parity(format!(
                "backbone parameter counts differ: {}",
                counts.join(", ")
            )));
        }
        Ok(())
    })())
}

#[derive(Clone, Debug, Default)]
pub struct SelectArgs {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    /// Experts to keep per layer.
    pub m: usize,
    /// Routing width of the voting pass; defaults to `m`.
    pub k: Option<usize>,
    pub out: PathBuf,
}

/// Votes over the training split, keeps the `m` most selected experts per
/// layer, and writes the pruned checkpoint. Returns BPC at `k = m` before
/// and after.
pub fn run_select(args: &SelectArgs) -> Result<(f64, f64)> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.to_model()?;
    let n = model.config.n_experts;
    if args.m == 0 || args.m > n {
        return Err(Error::Config(format!("m={} outside [1, {n}]", args.m)));
    }
    let k = args.k.unwrap_or(args.m);
    if k == 0 || k > n {
        return Err(Error::Config(format!("k={k} outside [1, {n}]")));
    }
    let corpus = corpus_for(&ckpt, args.data.as_deref())?;
    let seq = model.config.seq_len;
    let votes = vote_experts(&model, &eval_windows(&corpus.train, seq, 64)?, k)?;
    let pruned = select_subnetwork(&model, &votes, args.m)?;
    let mut cfg = ckpt.config.clone();
    cfg.ksched.k_min = cfg.ksched.k_min.min(args.m);
    cfg.ksched.k_max = cfg.ksched.k_max.min(args.m);
    Checkpoint::from_model(&pruned, &cfg, ckpt.step).save(&args.out)?;
    for lv in &votes.layers {
        println!("layer {} votes {:?}", lv.layer, lv.counts);
    }
    let val = eval_windows(&corpus.val, seq, 0)?;
    let before = bpc(&model, &val, args.m)?;
    let after = bpc(&pruned, &val, args.m)?;
    println!(
        "kept {} of {n} experts per layer; val_bpc@k={} before {before:.4} after {after:.4}",
        args.m, args.m
    );
    println!("wrote {}", args.out.display());
    Ok((before, after))
}

pub fn cmd_select(args: &SelectArgs) -> i32 {
    exit_with(run_select(args).map(|_| ()))
}

#[derive(Clone, Debug)]
pub struct DistillArgs {
    pub teacher: PathBuf,
    pub data: Option<PathBuf>,
    pub steps: usize,
    pub alpha: f64,
    pub temp: f64,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Also train the same student from scratch without the teacher.
    pub twin: bool,
}

impl Default for DistillArgs {
    fn default() -> Self {
        Self {
            teacher: PathBuf::new(),
            data: None,
            steps: 500,
            alpha: DISTILL_ALPHA,
            temp: DISTILL_TEMP,
            seed: None,
            out_dir: PathBuf::from("runs"),
            twin: false,
        }
    }
}

/// Student and (optional) twin validation BPC.
pub fn run_distill(args: &DistillArgs) -> Result<(f64, Option<f64>)> {
    let ckpt = Checkpoint::load(&args.teacher)?;
    let teacher = ckpt.to_model()?;
    let corpus = corpus_for(&ckpt, args.data.as_deref())?;
    let student = single_expert_config(&teacher.config);
    let mut cfg = student_train_config(&ckpt.config, student, args.steps);
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    apply_seed_env(&mut cfg)?;
    cfg.validate()?;
    let tag = format!(
        "{}|{}|{}|{}|{}",
        ckpt.id()?,
        cfg.to_json(),
        args.alpha,
        args.temp,
        args.steps
    );
    let hash: String = Sha256::digest(tag.as_bytes())
        .iter()
        .take(6)
        .map(|b| format!("{b:02x}"))
        .collect();
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let teacher_k = teacher.config.n_experts;
    let val = eval_windows(&corpus.val, cfg.model.seq_len, 0)?;
    println!("distilling {} steps, alpha={}, temp={}", args.steps, args.alpha, args.temp);
    let d = distill(&teacher, &cfg, &corpus, args.alpha, args.temp, teacher_k, &mut |_| {})?;
    write(&args.out_dir.join(format!("{hash}_distill.csv")), d.log_csv())?;
    d.run
        .checkpoint()
        .save(args.out_dir.join(format!("{hash}_student.smdk")))?;
    if let (Some(first), Some(last)) = (d.records().first(), d.records().last()) {
        println!(
            "ce {:.4} -> {:.4}, kd {:.4} -> {:.4}",
            first.ce, last.ce, first.kd, last.kd
        );
    }
    let student_bpc = bpc(&d.run.model, &val, 1)?;
    println!("student val_bpc {student_bpc:.4}");
    let twin_bpc = if args.twin {
        let run = train_with(&cfg, &corpus, &mut |_| {})?;
        run.checkpoint()
            .save(args.out_dir.join(format!("{hash}_twin.smdk")))?;
        let b = bpc(&run.model, &val, 1)?;
        println!("scratch twin val_bpc {b:.4}");
        Some(b)
    } else {
        None
    };
    Ok((student_bpc, twin_bpc))
}

pub fn cmd_distill(args: &DistillArgs) -> i32 {
    exit_with(run_distill(args).map(|_| ()))
}

/// Writes `bytes` of synthetic text.
pub fn cmd_corpus(out: &Path, bytes: usize, seed: u64) -> i32 {
    exit_with((|| {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write(out, synthetic_corpus(bytes, seed))?;
        println!("wrote {bytes} bytes to {}", out.display());
        Ok(())
    })())
}

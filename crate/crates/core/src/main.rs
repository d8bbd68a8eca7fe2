use std::path::PathBuf;

use clap::{Parser, Subcommand};
use smdk::cli;
use smdk::eval::{DISTILL_ALPHA, DISTILL_TEMP};

#[derive(Parser)]
#[command(name = "smdk", version, about = "Sparse mixture-of-experts desk lab")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from an INI config file.
    Train { config: PathBuf },
    /// Evaluate a checkpoint at several expert counts.
    Sweep {
        checkpoint: PathBuf,
        /// Comma-separated k values; defaults to N/4,N/2,N.
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Tabulate finished runs matched by a glob over config echoes or run directories.
    Compare {
        pattern: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep the m most-voted experts per layer.
    Select {
        checkpoint: PathBuf,
        #[arg(long)]
        m: usize,
        /// Routing width used while voting; defaults to m.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a single-expert student from a teacher checkpoint.
    Distill {
        teacher: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = DISTILL_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = DISTILL_TEMP)]
        temp: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        /// Also train a scratch twin for comparison.
        #[arg(long)]
        twin: bool,
    },
    /// Write a synthetic wiki-style byte corpus.
    Corpus {
        out: PathBuf,
        #[arg(long, default_value_t = 262_144)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    let code = match Args::parse().cmd {
        Cmd::Train { config } => cli::cmd_train(&config),
        Cmd::Sweep { checkpoint, ks, data, out, plot } => cli::cmd_sweep(&cli::SweepArgs {
            checkpoint,
            ks,
            data,
            out,
            plot,
        }),
        Cmd::Compare { pattern, out } => cli::cmd_compare(&pattern, out.as_deref()),
        Cmd::Select { checkpoint, m, k, data, out } => cli::cmd_select(&cli::SelectArgs {
            checkpoint,
            data,
            m,
            k,
            out,
        }),
        Cmd::Distill { teacher, steps, alpha, temp, seed, data, out_dir, twin } => {
            cli::cmd_distill(&cli::DistillArgs {
                teacher,
                data,
                steps,
                alpha,
                temp,
                seed,
                out_dir,
                twin,
            })
        }
        Cmd::Corpus { out, bytes, seed } => cli::cmd_corpus(&out, bytes, seed),
    };
    std::process::exit(code);
}

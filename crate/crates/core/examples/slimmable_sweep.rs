//! Trains once, then evaluates the same weights with 1..=N active experts and
//! writes the sweep as CSV and SVG.

use smdk::eval::{slimmable_sweep, sweep_svg};
use smdk::nn::{Method, ModelConfig};
use smdk::training::{eval_windows, synthetic_corpus, train, Corpus, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut model = ModelConfig::tiny(Method::SmoeDropout);
    model.d_model = 64;
    model.d_ff = 256;
    model.seq_len = 32;
    let mut cfg = TrainConfig::new(model, 1500);
    cfg.lr0 = 2e-3;
    cfg.batch = 4;
    cfg.val_windows = 2;
    let corpus = Corpus::split(&synthetic_corpus(64 * 1024, 0), 0.1)?;
    let run = train(&cfg, &corpus)?;

    let val = eval_windows(&corpus.val, cfg.model.seq_len, 32)?;
    let ks: Vec<usize> = (1..=cfg.model.n_experts).collect();
    let report = slimmable_sweep(&run.model, &val, &ks, "example")?;
    print!("{}", report.to_csv());

    let dir = std::env::temp_dir().join("smdk-sweep-example");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("sweep.csv"), report.to_csv())?;
    std::fs::write(dir.join("sweep.svg"), sweep_svg(&[report]))?;
    println!("wrote {}", dir.display());
    Ok(())
}

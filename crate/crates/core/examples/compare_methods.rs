//! Trains the frozen-router curriculum and a learnable router at fixed k=2
//! with identical backbones, then builds the comparison table from the run
//! artifacts.

use smdk::cli::{run_compare, run_train_with};
use smdk::config::{Preset, RunConfig};
use smdk::nn::Method;
use smdk::training::synthetic_corpus;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("smdk-compare-example");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir)?;
    let data = dir.join("corpus.txt");
    std::fs::write(&data, synthetic_corpus(64 * 1024, 0))?;

    for method in [Method::SmoeDropout, Method::SmoeLearned] {
        let mut rc = RunConfig::from_preset(Preset::PaperTiny, method);
        rc.train.model.d_model = 64;
        rc.train.model.d_ff = 256;
        rc.train.model.seq_len = 32;
        rc.train = rc.train.with_steps(1500);
        rc.train.batch = 4;
        rc.train.val_windows = 2;
        rc.train.data_path = data.display().to_string();
        rc.output_dir = dir.join("runs");
        let out = run_train_with(&rc, &mut |_| {})?;
        println!("{method}: artifacts under hash {}", out.artifacts.hash);
    }

    let table = run_compare(&format!("{}/runs/*_config.echo", dir.display()))?;
    print!("{}", table.to_csv());
    println!("backbone parity: {}", table.parity_ok);
    Ok(())
}

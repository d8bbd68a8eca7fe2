//! Counts how often each expert lands in the top-k on a data sample, then
//! keeps only the most voted experts of every layer.

use smdk::eval::{select_subnetwork, vote_experts};
use smdk::nn::{Method, ModelConfig};
use smdk::training::{bpc, eval_windows, synthetic_corpus, train, Corpus, TrainConfig};

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
    let full = train(&cfg, &corpus)?.model;

    let sample = eval_windows(&corpus.train, cfg.model.seq_len, 32)?;
    let val = eval_windows(&corpus.val, cfg.model.seq_len, 32)?;
    for m in [2, 4] {
        let tally = vote_experts(&full, &sample, m)?;
        for lv in &tally.layers {
            println!("m={m} layer {} votes {:?}", lv.layer, lv.counts);
        }
        let small = select_subnetwork(&full, &tally, m)?;
        println!(
            "m={m}: {} of {} experts kept, val bpc {:.4} (full model at k={m}: {:.4})",
            small.config.n_experts,
            full.config.n_experts,
            bpc(&small, &val, m)?,
            bpc(&full, &val, m)?
        );
    }
    Ok(())
}

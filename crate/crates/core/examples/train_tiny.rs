//! Trains a small SMoE-Dropout model on the synthetic byte corpus and prints
//! the step log as it goes.

use smdk::nn::{Method, ModelConfig};
use smdk::training::{bpc, eval_windows, synthetic_corpus, train_with, Corpus, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut model = ModelConfig::tiny(Method::SmoeDropout);
    model.d_model = 64;
    model.d_ff = 256;
    model.seq_len = 32;
    let mut cfg = TrainConfig::new(model, 1500);
    cfg.lr0 = 2e-3;
    cfg.batch = 4;
    cfg.val_windows = 4;

    let corpus = Corpus::split(&synthetic_corpus(64 * 1024, 0), 0.1)?;
    let run = train_with(&cfg, &corpus, &mut |r| {
        if let (Some(v), true) = (r.val_bpc_k, r.step % 150 == 0) {
            println!("step {:>3}  k={}  loss {:.3} nats  val {:.3} bpc", r.step, r.k, r.train_loss, v);
        }
    })?;

    let val = eval_windows(&corpus.val, cfg.model.seq_len, 16)?;
    for k in [2, 4, 8] {
        println!("final val bpc at k={k}: {:.4}", bpc(&run.model, &val, k)?);
    }
    Ok(())
}

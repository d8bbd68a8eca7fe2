//! Distills a trained SMoE teacher (all experts active) into a model with a
//! single expert per layer, next to an identically initialized student trained
//! on labels alone.

use smdk::eval::{distill, single_expert_config, student_train_config};
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
    let teacher = train(&cfg, &corpus)?.model;
    let n = teacher.config.n_experts;

    let student_cfg = student_train_config(&cfg, single_expert_config(&teacher.config), 1000);
    let student = distill(&teacher, &student_cfg, &corpus, 0.5, 2.0, n, &mut |_| {})?;
    let twin = train(&student_cfg, &corpus)?;

    let val = eval_windows(&corpus.val, cfg.model.seq_len, 32)?;
    println!("teacher (k={n}):      {:.4} bpc", bpc(&teacher, &val, n)?);
    println!("distilled student:   {:.4} bpc", bpc(&student.run.model, &val, 1)?);
    println!("label-only student:  {:.4} bpc", bpc(&twin.model, &val, 1)?);
    println!("kd term, first/last step: {:.4} / {:.4}", student.kd[0], student.kd.last().unwrap());
    Ok(())
}

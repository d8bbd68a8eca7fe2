//! Saves a model to the binary checkpoint format, reloads it and confirms the
//! weights and outputs match. A flipped byte is caught by the checksum.

use smdk::nn::{Method, Model, ModelConfig};
use smdk::training::{Checkpoint, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = TrainConfig::new(ModelConfig::tiny(Method::SmoeLearned), 10);
    let model = Model::<f32>::new(cfg.model.clone(), 5)?;
    let ck = Checkpoint::from_model(&model, &cfg, 0);

    let path = std::env::temp_dir().join("smdk-example.smdk");
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?.to_model()?;
    println!("id {}, {} bytes", ck.id()?, std::fs::metadata(&path)?.len());
    println!("checksums {:016x} / {:016x}", model.checksum(), back.checksum());

    let tokens: Vec<usize> = b"hello, experts".iter().map(|&b| b as usize).collect();
    assert_eq!(model.logits(&tokens, 1, 2)?, back.logits(&tokens, 1, 2)?);
    println!("logits identical after reload");

    let mut bytes = ck.to_bytes()?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    println!("corrupted load: {}", Checkpoint::from_bytes(&bytes).unwrap_err());
    Ok(())
}

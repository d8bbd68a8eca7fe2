//! Splits a dense MLP into equal experts and shows that running all of them
//! with unit gates reproduces the dense output.

use smdk::moe::{modulize, router_init, DenseMlp};
use smdk::nn::Activation;
use smdk::rng::RngStream;
use smdk::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (d, d_ff, n) = (32, 128, 8);
    let mut rng = RngStream::new(0, "example/modulize");
    let mut mlp = DenseMlp::<f64>::init(d, d_ff, &mut rng, 0.2)?;
    mlp.b1 = Tensor::randn(vec![d_ff], &mut rng, 0.1)?;

    let layer = modulize(&mlp, n)?;
    println!(
        "dense: {} params; {} experts of hidden width {}: {} params",
        mlp.param_count(),
        layer.n_experts(),
        layer.experts[0].hidden(),
        layer.param_count()
    );

    let router = router_init::<f64>(d, n, 0)?;
    let x = Tensor::randn(vec![10, d], &mut rng, 1.0)?;
    let dense = mlp.forward(&x, Activation::Gelu)?;
    let split = layer.forward(&x, &router, n, true, Activation::Gelu)?;
    println!("max |dense - experts| = {:.2e}", dense.max_abs_diff(&split));

    // The split is lossless in both directions.
    assert_eq!(layer.to_dense()?, mlp);
    println!("to_dense(modulize(mlp)) == mlp");
    Ok(())
}

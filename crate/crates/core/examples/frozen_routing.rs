//! A frozen random router: softmax over `x·G`, then top-k. Growing `k` only
//! ever adds experts, so the selections nest.

use smdk::autograd::Tape;
use smdk::moe::{route, router_init};
use smdk::rng::RngStream;
use smdk::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (d, n) = (16, 8);
    let router = router_init::<f64>(d, n, 42)?;
    let x = Tensor::randn(vec![4, d], &mut RngStream::new(1, "example/tokens"), 1.0)?;
    let tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(router.g.clone());

    for k in [1, 2, 4, 8] {
        let (decision, _) = route(&xv, &g, k)?;
        let t0: Vec<String> = decision
            .token(0)
            .iter()
            .zip(&decision.gates[..k])
            .map(|(e, g)| format!("{e}:{g:.3}"))
            .collect();
        println!("k={k}  token 0 -> [{}]", t0.join(" "));
    }

    let (_, probs) = route(&xv, &g, n)?;
    let p = probs.value();
    let mean: Vec<String> = (0..n)
        .map(|e| format!("{:.3}", (0..p.rows()).map(|t| p.row(t)[e]).sum::<f64>() / p.rows() as f64))
        .collect();
    println!("mean routing probability per expert: {}", mean.join(" "));
    Ok(())
}

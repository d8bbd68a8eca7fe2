//! The auxiliary terms of the comparison methods: load balancing, random
//! expert pairs with a symmetric KL, and structured dropout masks.

use smdk::baselines::{balance_loss, dropblock_mask, dropout_mask, thor_consistency, thor_route, BalanceStats};
use smdk::rng::RngStream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n = 8;
    let uniform = vec![1.0 / n as f64; n];
    let mut skewed = vec![0.02; n];
    skewed[0] = 1.0 - 0.02 * (n - 1) as f64;
    for (name, p) in [("uniform", &uniform), ("skewed", &skewed)] {
        let stats = BalanceStats { f: p.clone(), p: p.clone() };
        println!("balance loss, {name} load: {:.4}", balance_loss(&stats, n));
    }

    let mut rng = RngStream::new(3, "example/thor");
    let pairs: Vec<_> = (0..5).map(|_| thor_route(&mut rng, n)).collect::<smdk::Result<_>>()?;
    println!("random expert pairs: {pairs:?}");
    let (p, q) = ([0.7, 0.2, 0.1], [0.5, 0.3, 0.2]);
    println!("symmetric KL(p, q) = {:.5}", thor_consistency(&p, &q));

    let mut rng = RngStream::new(4, "example/masks");
    let show = |m: &[f64]| m.iter().map(|&v| if v == 0.0 { '.' } else { '#' }).collect::<String>();
    let drop: Vec<f64> = dropout_mask(48, 0.1, &mut rng)?;
    println!("dropout   {}", show(&drop));
    let block: Vec<f64> = dropblock_mask(1, 48, 0.05, 5, &mut rng)?;
    println!("dropblock {}", show(&block));
    Ok(())
}

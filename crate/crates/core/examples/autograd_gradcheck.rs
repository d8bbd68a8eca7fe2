//! Reverse-mode gradients on a small expression, checked against central
//! finite differences.

use smdk::autograd::{check_gradients, Tape};
use smdk::rng::RngStream;
use smdk::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = RngStream::new(7, "example/gradcheck");
    let x = Tensor::<f64>::randn(vec![3, 4], &mut rng, 1.0)?;
    let w = Tensor::<f64>::randn(vec![4, 5], &mut rng, 0.5)?;

    // Mean cross-entropy of gelu(x·w) against fixed targets.
    let tape = Tape::new();
    let (xv, wv) = (tape.var(x.clone()), tape.var(w.clone()));
    let loss = xv.matmul(&wv)?.gelu().cross_entropy(&[0, 3, 1])?;
    println!("loss = {:.6}", loss.item());
    let grads = tape.backward(loss)?;
    println!("dL/dw row 0 = {:?}", &grads.get(wv).unwrap().row(0));

    let report = check_gradients(&[x, w], 1e-5, 64, |_, v| {
        v[0].matmul(&v[1])?.gelu().cross_entropy(&[0, 3, 1])
    })?;
    println!(
        "finite differences: {} coordinates, max relative error {:.2e}",
        report.checked, report.max_rel_error
    );
    Ok(())
}

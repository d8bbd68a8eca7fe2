mod common;

use approx::assert_abs_diff_eq;
use smdk::autograd::{check_gradients, combine_rows, concrete_mask, ParamGroup, ParamStore, Tape};
use smdk::rng::RngStream;
use smdk::tensor::Tensor;
use smdk::Result;

const FD_STEP: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand(shape: &[usize], s: &mut RngStream) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), s, 1.0).unwrap()
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn probe<'t>(tape: &'t Tape<f64>, y: smdk::autograd::Var<'t, f64>) -> Result<smdk::autograd::Var<'t, f64>> {
    let n = y.value().numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let wv = tape.constant(Tensor::new(y.shape(), w)?);
    Ok(y.mul(&wv)?.sum())
}

fn gradcheck_10<F>(label: &str, shapes: &[&[usize]], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[smdk::autograd::Var<'t, f64>]) -> Result<smdk::autograd::Var<'t, f64>>,
{
    let mut s = RngStream::new(1234, label);
    for trial in 0..10 {
        let inputs: Vec<_> = shapes.iter().map(|sh| rand(sh, &mut s)).collect();
        let r = check_gradients(&inputs, FD_STEP, 64, &f).unwrap();
        assert!(
            r.max_rel_error < OP_TOL,
            "{label} trial {trial}: rel error {}",
            r.max_rel_error
        );
    }
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    assert_eq!(id.matmul(&b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    assert_eq!(a.matmul(&b).unwrap().value().data(), &[19.0, 22.0, 43.0, 50.0]);

    let a = tape.constant(Tensor::<f64>::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::<f64>::zeros(vec![2, 3]));
    let err = a.matmul(&b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn batched_matmul_matches_per_batch_products() {
    let mut s = RngStream::new(5, "bmm");
    let a = rand(&[2, 3, 4], &mut s);
    let b = rand(&[2, 4, 5], &mut s);
    let tape = Tape::new();
    let y = tape.constant(a.clone()).matmul(&tape.constant(b.clone())).unwrap();
    assert_eq!(y.shape(), vec![2, 3, 5]);
    for bi in 0..2 {
        let ab = Tensor::new(vec![3, 4], a.data()[bi * 12..(bi + 1) * 12].to_vec()).unwrap();
        let bb = Tensor::new(vec![4, 5], b.data()[bi * 20..(bi + 1) * 20].to_vec()).unwrap();
        assert_eq!(ab.matmul2d(&bb).unwrap().data(), &y.value().data()[bi * 15..(bi + 1) * 15]);
    }
    let bad = tape.constant(rand(&[3, 4, 5], &mut s));
    assert!(tape.constant(a).matmul(&bad).is_err());
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let y = tape.constant(t(&[2], &[0.0, 0.0])).softmax(0).unwrap();
    assert_eq!(y.value().data(), &[0.5, 0.5]);

    let y = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).softmax(0).unwrap();
    let want = [
        0.090_030_573_170_380_46,
        0.244_728_471_054_797_65,
        0.665_240_955_774_821_9,
    ];
    for (a, b) in y.value().data().iter().zip(want) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
    }

    let x = t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 5.5, -3.0]);
    let shifted = x.map(|v| v + 123.25);
    let a = tape.constant(x).softmax(1).unwrap().value();
    let b = tape.constant(shifted).softmax(1).unwrap().value();
    assert!(a.max_abs_diff(&b) < 1e-12);

    assert!(tape.constant(t(&[2], &[0.0, 1.0])).softmax(1).is_err());
}

#[test]
fn softmax_along_non_last_axis() {
    let mut s = RngStream::new(8, "sm-axis");
    let x = rand(&[3, 4, 2], &mut s);
    let tape = Tape::new();
    let y = tape.constant(x).softmax(1).unwrap().value();
    for o in 0..3 {
        for i in 0..2 {
            let sum: f64 = (0..4).map(|l| y.data()[(o * 4 + l) * 2 + i]).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }
}

#[test]
fn layernorm_examples() {
    let tape = Tape::new();
    let ones = tape.constant(t(&[2], &[1.0, 1.0]));
    let zeros = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape
        .constant(t(&[1, 2], &[4.0, 4.0]))
        .layernorm(&ones, &zeros, 1e-5)
        .unwrap();
    assert_eq!(y.value().data(), &[0.0, 0.0]);

    let eps = 1e-5;
    let y = tape
        .constant(t(&[1, 2], &[1.0, 3.0]))
        .layernorm(&ones, &zeros, eps)
        .unwrap();
    // mean 2, biased variance 1: (x − 2) / sqrt(1 + eps)
    let r = 1.0 / (1.0f64 + eps).sqrt();
    assert_abs_diff_eq!(y.value().data()[0], -r, epsilon = 1e-15);
    assert_abs_diff_eq!(y.value().data()[1], r, epsilon = 1e-15);

    let b = tape.constant(t(&[2], &[0.7, -2.0]));
    let y = tape
        .constant(t(&[2, 2], &[1.0, 3.0, -5.0, 8.0]))
        .layernorm(&zeros, &b, eps)
        .unwrap();
    assert_eq!(y.value().data(), &[0.7, -2.0, 0.7, -2.0]);

    let wide = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
    assert!(tape
        .constant(t(&[1, 2], &[1.0, 3.0]))
        .layernorm(&wide, &zeros, eps)
        .is_err());
}

#[test]
fn gelu_examples() {
    let tape = Tape::new();
    let y = tape.constant(t(&[3], &[0.0, 10.0, 1.0])).gelu().value();
    assert_eq!(y.data()[0], 0.0);
    assert_abs_diff_eq!(y.data()[1], 10.0, epsilon = 1e-12);
    // Φ(1) from a 30-digit reference evaluation.
    assert_abs_diff_eq!(y.data()[2], 0.841_344_746_068_542_9, epsilon = 1e-12);
}

#[test]
fn cross_entropy_examples() {
    let tape = Tape::new();
    let uniform = tape.constant(Tensor::<f64>::zeros(vec![4, 256]));
    let ce = uniform.cross_entropy(&[0, 17, 255, 3]).unwrap().item();
    assert_abs_diff_eq!(ce, 256f64.ln(), epsilon = 1e-12);

    let mut confident = vec![0.0; 10];
    confident[4] = 1000.0;
    let ce = tape
        .constant(t(&[1, 10], &confident))
        .cross_entropy(&[4])
        .unwrap()
        .item();
    assert!(ce.abs() < 1e-12);

    let ce = tape
        .constant(t(&[1, 2], &[0.0, 3f64.ln()]))
        .cross_entropy(&[1])
        .unwrap()
        .item();
    assert_abs_diff_eq!(ce, 0.287_682_072_451_780_9, epsilon = 1e-12);

    assert!(tape
        .constant(t(&[1, 2], &[0.0, 0.0]))
        .cross_entropy(&[2])
        .is_err());
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.var(Tensor::<f64>::zeros(vec![2, 3, 4]));
    let g = tape.backward(x.sum()).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let tape = Tape::new();
    let x = tape.var(t(&[2], &[1.0, 2.0]));
    let loss = x.mul(&x).unwrap().sum();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);

    let tape = Tape::new();
    let x = tape.var(t(&[2], &[1.0, 2.0]));
    assert!(tape.backward(x.square()).is_err());
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let mut s = RngStream::new(1, "frozen");
    let w = store.insert("w", rand(&[3, 2], &mut s), ParamGroup::Backbone, false);
    let g = store.insert("g", rand(&[2, 2], &mut s), ParamGroup::Router, true);
    let before = store.value(g).checksum();
    let tape = Tape::new();
    let x = tape.constant(rand(&[4, 3], &mut s));
    let y = x
        .matmul(&tape.param(&store, w))
        .unwrap()
        .matmul(&tape.param(&store, g))
        .unwrap()
        .square()
        .sum();
    let grads = tape.backward(y).unwrap();
    store.accumulate(&grads);
    assert!(store.get(w).grad.is_some());
    assert!(store.get(g).grad.is_none());
    assert_eq!(store.value(g).checksum(), before);
}

#[test]
fn gradcheck_matmul() {
    gradcheck_10("matmul", &[&[3, 4], &[4, 5]], |tape, v| {
        probe(tape, v[0].matmul(&v[1])?)
    });
    gradcheck_10("bmm", &[&[2, 3, 4], &[2, 4, 2]], |tape, v| {
        probe(tape, v[0].matmul(&v[1])?)
    });
}

#[test]
fn gradcheck_elementwise() {
    gradcheck_10("add-bcast", &[&[3, 4], &[4]], |tape, v| probe(tape, v[0].add(&v[1])?));
    gradcheck_10("sub", &[&[3, 4], &[3, 4]], |tape, v| probe(tape, v[0].sub(&v[1])?));
    gradcheck_10("mul", &[&[3, 4], &[3, 4]], |tape, v| probe(tape, v[0].mul(&v[1])?));
    gradcheck_10("div", &[&[3, 4], &[1]], |tape, v| {
        probe(tape, v[0].div(&v[1].square().add_scalar(0.5))?)
    });
    gradcheck_10("unary", &[&[5]], |tape, v| {
        let x = &v[0];
        let y = x
            .gelu()
            .add(&x.sigmoid())?
            .add(&x.scale(0.3).exp())?
            .add(&x.square().add_scalar(1.0).ln())?
            .add(&x.neg())?;
        probe(tape, y)
    });
    gradcheck_10("mean", &[&[3, 4]], |_, v| Ok(v[0].square().mean()));
    gradcheck_10("mean_rows", &[&[3, 4]], |tape, v| probe(tape, v[0].mean_rows()));
}

#[test]
fn gradcheck_relu_away_from_kink() {
    let x = t(&[4], &[-1.3, -0.2, 0.4, 2.0]);
    let r = check_gradients(&[x], FD_STEP, 4, |tape, v| probe(tape, v[0].relu())).unwrap();
    assert!(r.max_rel_error < OP_TOL);
}

#[test]
fn gradcheck_softmax_family() {
    gradcheck_10("softmax-last", &[&[3, 5]], |tape, v| probe(tape, v[0].softmax(1)?));
    gradcheck_10("softmax-mid", &[&[2, 3, 2]], |tape, v| probe(tape, v[0].softmax(1)?));
    gradcheck_10("log-softmax", &[&[3, 5]], |tape, v| probe(tape, v[0].log_softmax()));
}

#[test]
fn gradcheck_layernorm() {
    gradcheck_10("layernorm", &[&[3, 6], &[6], &[6]], |tape, v| {
        probe(tape, v[0].layernorm(&v[1], &v[2], 1e-5)?)
    });
}

#[test]
fn gradcheck_cross_entropy() {
    gradcheck_10("ce", &[&[4, 7]], |_, v| v[0].cross_entropy(&[0, 6, 3, 3]));
}

#[test]
fn gradcheck_gather_scatter() {
    gradcheck_10("embedding", &[&[5, 3]], |tape, v| probe(tape, v[0].embedding(&[4, 0, 4, 2])?));
    gradcheck_10("index-rows", &[&[5, 3]], |tape, v| probe(tape, v[0].index_rows(&[1, 1, 3])?));
    gradcheck_10("pick", &[&[3, 4]], |tape, v| probe(tape, v[0].pick(&[0, 5, 11])?));
    gradcheck_10("mul-rows", &[&[3, 4], &[3]], |tape, v| probe(tape, v[0].mul_rows(&v[1])?));
    gradcheck_10("combine", &[&[2, 3], &[3, 3]], |tape, v| {
        let y = combine_rows(tape, 4, 3, &[(v[0], vec![3, 0]), (v[1], vec![0, 1, 3])])?;
        probe(tape, y)
    });
    gradcheck_10("reshape", &[&[2, 6]], |tape, v| probe(tape, v[0].reshape(vec![3, 4])?));
}

#[test]
fn embedding_gradient_touches_only_used_rows() {
    let tape = Tape::new();
    let table = tape.var(Tensor::<f64>::zeros(vec![6, 2]));
    let y = table.embedding(&[1, 4, 1]).unwrap().sum();
    let g = tape.backward(y).unwrap();
    let gd = g.get(table).unwrap();
    for r in 0..6 {
        let want = match r {
            1 => 2.0,
            4 => 1.0,
            _ => 0.0,
        };
        assert_eq!(gd.row(r), &[want, want]);
    }
}

#[test]
fn gradcheck_attention() {
    gradcheck_10("attention", &[&[6, 4], &[6, 4], &[6, 4]], |tape, v| {
        probe(tape, v[0].causal_attention(&v[1], &v[2], 2, 3, 2)?)
    });
}

#[test]
fn gradcheck_concrete() {
    let mut s = RngStream::new(3, "concrete-noise");
    let noise: Vec<f64> = (0..12).map(|_| s.uniform_open()).collect();
    // temperature 0.5 keeps the relaxation smooth enough for finite differences
    gradcheck_10("concrete", &[&[3, 4], &[1]], |tape, v| {
        let (y, _) = concrete_mask(&v[0], &v[1], &noise, 0.5)?;
        probe(tape, y)
    });
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut s = RngStream::new(77, "det");
        let tape = Tape::new();
        let x = tape.var(rand(&[6, 8], &mut s));
        let w = tape.var(rand(&[8, 8], &mut s));
        let y = x
            .matmul(&w)
            .unwrap()
            .gelu()
            .causal_attention(&x, &x, 2, 3, 2)
            .unwrap()
            .cross_entropy(&[0, 1, 2, 3, 4, 5])
            .unwrap();
        let g = tape.backward(y).unwrap();
        (y.item().to_bits(), g.get(w).unwrap().clone(), g.get(x).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
}


#[test]
fn every_op_passes_gradcheck() {
    for (name, err) in common::run_op_suite() {
        assert!(err < OP_TOL, "{name}: rel error {err}");
    }
}

#![allow(dead_code)]

use smdk::autograd::{check_gradients, combine_rows, concrete_mask, Tape, Var};
use smdk::nn::{Activation, ForwardCtx, Method, Model, ModelConfig};
use smdk::rng::RngStream;
use smdk::tensor::Tensor;
use smdk::training::{synthetic_corpus, Corpus, TrainConfig};
use smdk::Result;

/// Two layers, d=16, N=4; large init so gradients are far from zero.
pub fn small_config(method: Method) -> ModelConfig {
    let mut c = ModelConfig::tiny(method);
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.n_experts = 4;
    c.source_experts = 4;
    c.vocab = 11;
    c.seq_len = 6;
    c.init_scale = 0.5;
    c.activation = Activation::Gelu;
    c
}

fn eval_loss(
    model: &Model<f64>,
    tokens: &[usize],
    targets: &[usize],
    k: usize,
    training: bool,
    backward: bool,
) -> Result<(f64, Option<smdk::autograd::Gradients<f64>>)> {
    let tape = Tape::new();
    let mut rng = RngStream::new(77, "gradcheck-noise");
    let mut ctx = if training {
        ForwardCtx::train(k, &mut rng)
    } else {
        ForwardCtx::eval(k)
    };
    let out = model.forward(&tape, tokens, 2, &mut ctx)?;
    let mut loss = out.logits.cross_entropy(targets)?;
    if let Some(b) = out.balance {
        loss = loss.add(&b.scale(0.01))?;
    }
    if let Some(c) = out.concrete_reg {
        loss = loss.add(&c)?;
    }
    let v = loss.item();
    let grads = if backward { Some(tape.backward(loss)?) } else { None };
    Ok((v, grads))
}

/// Largest relative error between tape gradients and central differences
/// over up to `per_param` coordinates of every trainable parameter.
pub fn model_gradcheck(method: Method, k: usize, training: bool, per_param: usize) -> f64 {
    let config = small_config(method);
    let mut model = Model::<f64>::new(config.clone(), 3).unwrap();
    let tokens: Vec<usize> = (0..12).map(|i| (i * 7 + 3) % config.vocab).collect();
    let targets: Vec<usize> = (0..12).map(|i| (i * 5 + 1) % config.vocab).collect();
    let (_, grads) = eval_loss(&model, &tokens, &targets, k, training, true).unwrap();
    let grads = grads.unwrap();
    let analytic: Vec<_> = grads.param_grads().map(|(id, g)| (id, g.clone())).collect();
    assert!(!analytic.is_empty());
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (id, g) in analytic {
        let base: Tensor<f64> = model.params.value(id).clone();
        let n = base.numel();
        let stride = n.div_ceil(per_param).max(1);
        for j in (0..n).step_by(stride) {
            let mut up = base.clone();
            up.data_mut()[j] += h;
            model.params.set_value(id, up).unwrap();
            let (lu, _) = eval_loss(&model, &tokens, &targets, k, training, false).unwrap();
            let mut down = base.clone();
            down.data_mut()[j] -= h;
            model.params.set_value(id, down).unwrap();
            let (ld, _) = eval_loss(&model, &tokens, &targets, k, training, false).unwrap();
            model.params.set_value(id, base.clone()).unwrap();
            let num = (lu - ld) / (2.0 * h);
            let a = g.data()[j];
            worst = worst.max((a - num).abs() / 1f64.max(a.abs()).max(num.abs()));
        }
    }
    worst
}

/// Paper-tiny shape shrunk for fast tests.
pub fn quick_train_config(method: Method, steps: usize, seed: u64) -> TrainConfig {
    let mut m = ModelConfig::tiny(method);
    m.d_model = 32;
    m.n_heads = 2;
    m.d_ff = 64;
    m.seq_len = 32;
    let mut c = TrainConfig::new(m, steps);
    c.ksched = smdk::training::default_ksched(method, 8, steps);
    c.lr0 = 2e-3;
    c.batch = 4;
    c.seed = seed;
    c.val_windows = 4;
    c
}

pub fn quick_corpus() -> Corpus {
    Corpus::split(&synthetic_corpus(32 * 1024, 1), 0.1).unwrap()
}

type OpFn = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
pub fn probe<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let n = y.value().numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    Ok(y.mul(&tape.constant(Tensor::new(y.shape(), w)?))?.sum())
}

fn concrete_op<'t>(tape: &'t Tape<f64>, v: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
    let mut s = RngStream::new(3, "concrete-noise");
    let noise: Vec<f64> = (0..12).map(|_| s.uniform_open()).collect();
    let (y, _) = concrete_mask(&v[0], &v[1], &noise, 0.5)?;
    probe(tape, y)
}

/// Every differentiable op with the input shapes it is checked at.
pub fn op_suite() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |t, v| probe(t, v[0].matmul(&v[1])?)),
        ("batched-matmul", vec![vec![2, 3, 4], vec![2, 4, 2]], |t, v| probe(t, v[0].matmul(&v[1])?)),
        ("add", vec![vec![3, 4], vec![4]], |t, v| probe(t, v[0].add(&v[1])?)),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| probe(t, v[0].sub(&v[1])?)),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| probe(t, v[0].mul(&v[1])?)),
        ("div", vec![vec![3, 4], vec![1]], |t, v| probe(t, v[0].div(&v[1].square().add_scalar(0.5))?)),
        ("neg-scale", vec![vec![5]], |t, v| probe(t, v[0].neg().scale(1.7).add_scalar(0.2))),
        ("exp", vec![vec![5]], |t, v| probe(t, v[0].scale(0.3).exp())),
        ("ln", vec![vec![5]], |t, v| probe(t, v[0].square().add_scalar(1.0).ln())),
        ("sigmoid", vec![vec![5]], |t, v| probe(t, v[0].sigmoid())),
        ("gelu", vec![vec![5]], |t, v| probe(t, v[0].gelu())),
        ("relu", vec![vec![5]], |t, v| probe(t, v[0].square().add_scalar(0.1).relu())),
        ("sum-mean", vec![vec![3, 4]], |_, v| Ok(v[0].square().mean().add(&v[0].sum())?)),
        ("mean-rows", vec![vec![3, 4]], |t, v| probe(t, v[0].mean_rows())),
        ("softmax", vec![vec![2, 3, 2]], |t, v| probe(t, v[0].softmax(1)?)),
        ("log-softmax", vec![vec![3, 5]], |t, v| probe(t, v[0].log_softmax())),
        ("layernorm", vec![vec![3, 6], vec![6], vec![6]], |t, v| probe(t, v[0].layernorm(&v[1], &v[2], 1e-5)?)),
        ("cross-entropy", vec![vec![4, 7]], |_, v| v[0].cross_entropy(&[0, 6, 3, 3])),
        ("embedding", vec![vec![5, 3]], |t, v| probe(t, v[0].embedding(&[4, 0, 4, 2])?)),
        ("index-rows", vec![vec![5, 3]], |t, v| probe(t, v[0].index_rows(&[1, 1, 3])?)),
        ("pick", vec![vec![3, 4]], |t, v| probe(t, v[0].pick(&[0, 5, 11])?)),
        ("mul-rows", vec![vec![3, 4], vec![3]], |t, v| probe(t, v[0].mul_rows(&v[1])?)),
        ("combine-rows", vec![vec![2, 3], vec![3, 3]], |t, v| {
            probe(t, combine_rows(t, 4, 3, &[(v[0], vec![3, 0]), (v[1], vec![0, 1, 3])])?)
        }),
        ("reshape", vec![vec![2, 6]], |t, v| probe(t, v[0].reshape(vec![3, 4])?)),
        ("attention", vec![vec![6, 4], vec![6, 4], vec![6, 4]], |t, v| {
            probe(t, v[0].causal_attention(&v[1], &v[2], 2, 3, 2)?)
        }),
        ("concrete", vec![vec![3, 4], vec![1]], concrete_op),
    ]
}

/// Worst relative error of each op over 10 random inputs.
pub fn run_op_suite() -> Vec<(&'static str, f64)> {
    op_suite()
        .into_iter()
        .map(|(name, shapes, f)| {
            let mut s = RngStream::new(1234, name);
            let mut worst: f64 = 0.0;
            for _ in 0..10 {
                let inputs: Vec<_> = shapes
                    .iter()
                    .map(|sh| Tensor::randn(sh.clone(), &mut s, 1.0).unwrap())
                    .collect();
                let r = check_gradients(&inputs, 1e-5, 64, f).unwrap();
                worst = worst.max(r.max_rel_error);
            }
            (name, worst)
        })
        .collect()
}

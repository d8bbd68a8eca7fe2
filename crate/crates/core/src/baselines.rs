//! Comparison methods: learnable routing with a balancing loss, THOR
//! random-pair routing with a consistency term, and three dropout variants.

use crate::autograd::{concrete_mask, Var};
use crate::error::{Error, Result};
use crate::moe::{route, RouterState, RoutingDecision};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

/// Floor applied to distributions before taking logs.
pub const KL_FLOOR: f64 = 1e-9;
/// Default balancing-loss weight.
pub const BALANCE_WEIGHT: f64 = 0.01;
/// Default consistency coefficient for THOR.
pub const THOR_COEF: f64 = 2.0;
/// Default Concrete temperature.
pub const CONCRETE_TEMP: f64 = 0.1;
pub const CONCRETE_WEIGHT_REG: f64 = 1e-6;
pub const CONCRETE_DROPOUT_REG: f64 = 1e-5;
/// Initial Concrete drop probability.
pub const CONCRETE_INIT_P: f64 = 0.1;

/// A router whose `G` is optimized with the rest of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableRouter<T> {
    pub g: Tensor<T>,
}

impl<T: Element> TrainableRouter<T> {
    /// Same initial weights as the frozen router of the same seed.
    pub fn from_state(state: &RouterState<T>) -> Self {
        Self {
            g: state.g.clone(),
        }
    }
}

/// Routing through a trainable `G`; identical forward math to [`route`].
pub fn learned_route<'t, T: Element>(
    x: &Var<'t, T>,
    g: &Var<'t, T>,
    k: usize,
) -> Result<(RoutingDecision<T>, Var<'t, T>)> {
    route(x, g, k)
}

/// Routed fractions `f` (top-k membership per token) and mean gate
/// probabilities `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceStats {
    pub f: Vec<f64>,
    pub p: Vec<f64>,
}

impl BalanceStats {
    pub fn from_routing<T: Element>(decision: &RoutingDecision<T>, probs: &Tensor<T>) -> Self {
        let n = decision.n_experts;
        let tokens = decision.tokens().max(1) as f64;
        let mut f = vec![0.0; n];
        for &e in &decision.indices {
            f[e] += 1.0 / tokens;
        }
        let mut p = vec![0.0; n];
        for r in 0..probs.rows() {
            for (acc, &x) in p.iter_mut().zip(probs.row(r)) {
                *acc += x.as_f64() / tokens;
            }
        }
        Self { f, p }
    }

    /// `f` rescaled to sum to 1.
    pub fn f_hat(&self) -> Vec<f64> {
        let s: f64 = self.f.iter().sum();
        if s == 0.0 {
            return self.f.clone();
        }
        self.f.iter().map(|x| x / s).collect()
    }
}

/// `N · Σ f̂_i · P_i`.
pub fn balance_loss(stats: &BalanceStats, n: usize) -> f64 {
    n as f64 * stats.f_hat().iter().zip(&stats.p).map(|(f, p)| f * p).sum::<f64>()
}

/// Differentiable balancing loss; gradients flow through `P` only.
pub fn balance_loss_var<'t, T: Element>(
    probs: &Var<'t, T>,
    decision: &RoutingDecision<T>,
) -> Result<Var<'t, T>> {
    let stats = BalanceStats::from_routing(decision, &probs.value());
    let f_hat: Vec<f64> = stats.f_hat();
    let n = f_hat.len();
    Ok(probs
        .mean_rows()
        .mul_const(Tensor::from_f64(vec![n], &f_hat)?)?
        .sum()
        .scale(n as f64))
}

/// A uniformly random pair of distinct experts.
pub fn thor_route(rng: &mut RngStream, n: usize) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "THOR needs at least 2 experts, got {n}"
        )));
    }
    let a = rng.below(n);
    let mut b = rng.below(n - 1);
    if b >= a {
        b += 1;
    }
    Ok((a, b))
}

/// `k` distinct experts drawn uniformly, in ascending order.
pub fn random_experts(rng: &mut RngStream, n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k={k} outside [1, {n}]")));
    }
    if k == 2 {
        let (a, b) = thor_route(rng, n)?;
        return Ok(vec![a.min(b), a.max(b)]);
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below(n - i);
        pool.swap(i, j);
    }
    let mut out = pool[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// `½(KL(p‖q) + KL(q‖p))` with both distributions floored at [`KL_FLOOR`].
pub fn thor_consistency(p: &[f64], q: &[f64]) -> f64 {
    let sum: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(KL_FLOOR), b.max(KL_FLOOR));
            (a - b) * (a.ln() - b.ln())
        })
        .sum();
    0.5 * sum
}

/// Row-mean symmetric KL between the softmaxes of two `[rows, V]` logits.
pub fn thor_consistency_logits<'t, T: Element>(
    a: &Var<'t, T>,
    b: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let rows = a.value().rows();
    let (la, lb) = (a.log_softmax(), b.log_softmax());
    let (pa, pb) = (la.exp(), lb.exp());
    Ok(pa
        .sub(&pb)?
        .mul(&la.sub(&lb)?)?
        .sum()
        .scale(0.5 / rows as f64))
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    Ok(())
}

/// Inverted-dropout mask: `0` or `1/(1-p)`.
pub fn dropout_mask<T: Element>(numel: usize, p: f64, rng: &mut RngStream) -> Result<Vec<T>> {
    check_p(p)?;
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    Ok((0..numel)
        .map(|_| if rng.uniform() < p { T::zero() } else { keep })
        .collect())
}

pub fn dropout<'t, T: Element>(
    x: &Var<'t, T>,
    p: f64,
    rng: &mut RngStream,
    training: bool,
) -> Result<Var<'t, T>> {
    check_p(p)?;
    if !training || p == 0.0 {
        return Ok(*x);
    }
    let v = x.value();
    let mask = dropout_mask(v.numel(), p, rng)?;
    x.mul_const(Tensor::new(v.shape().to_vec(), mask)?)
}

/// Concrete dropout with uniform noise drawn from `rng`. Returns the output
/// and the relaxed drop mask `z`.
pub fn concrete_dropout<'t, T: Element>(
    x: &Var<'t, T>,
    p_logit: &Var<'t, T>,
    temp: f64,
    rng: &mut RngStream,
) -> Result<(Var<'t, T>, Vec<T>)> {
    if !(temp > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "concrete temperature must be > 0, got {temp}"
        )));
    }
    let noise: Vec<T> = (0..x.value().numel())
        .map(|_| T::from_f64_lossy(rng.uniform()))
        .collect();
    concrete_mask(x, p_logit, &noise, temp)
}

/// `weight_reg · Σ‖W‖² / (1−p) + dropout_reg · input_dim · (p ln p + (1−p) ln(1−p))`
/// where the weights are every parameter of the layer after the dropout.
pub fn concrete_regularizer<'t, T: Element>(
    p_logit: &Var<'t, T>,
    next_layer: &[Var<'t, T>],
    input_dim: usize,
    weight_reg: f64,
    dropout_reg: f64,
) -> Result<Var<'t, T>> {
    let p = p_logit.sigmoid();
    let q = p_logit.neg().sigmoid();
    let mut sq: Option<Var<'t, T>> = None;
    for w in next_layer {
        let s = w.square().sum();
        sq = Some(match sq {
            Some(acc) => acc.add(&s)?,
            None => s,
        });
    }
    let entropy = p.mul(&p.ln())?.add(&q.mul(&q.ln())?)?;
    let dreg = entropy.scale(dropout_reg * input_dim as f64);
    match sq {
        Some(sq) => sq.div(&q)?.scale(weight_reg).add(&dreg),
        None => Ok(dreg),
    }
}

/// DropBlock keep-mask for `[rows, cols]`: Bernoulli(p) seeds widened by a
/// stride-1, same-padded max window of `block` along the feature axis, then
/// inverted.
pub fn dropblock_mask<T: Element>(
    rows: usize,
    cols: usize,
    p: f64,
    block: usize,
    rng: &mut RngStream,
) -> Result<Vec<T>> {
    if block == 0 || block % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "block_size must be odd and positive, got {block}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "drop probability must be in [0, 1], got {p}"
        )));
    }
    let half = block / 2;
    let mut mask = vec![T::one(); rows * cols];
    let mut seeds = vec![false; cols];
    for r in 0..rows {
        for s in seeds.iter_mut() {
            *s = rng.uniform() < p;
        }
        let row = &mut mask[r * cols..(r + 1) * cols];
        for (c, &hit) in seeds.iter().enumerate() {
            if hit {
                let lo = c.saturating_sub(half);
                let hi = (c + half + 1).min(cols);
                row[lo..hi].iter_mut().for_each(|m| *m = T::zero());
            }
        }
    }
    Ok(mask)
}

pub fn dropblock<'t, T: Element>(
    x: &Var<'t, T>,
    p: f64,
    block: usize,
    rng: &mut RngStream,
    training: bool,
) -> Result<Var<'t, T>> {
    let v = x.value();
    if !training {
        dropblock_mask::<T>(0, v.cols(), p, block, rng)?;
        return Ok(*x);
    }
    let mask = dropblock_mask(v.rows(), v.cols(), p, block, rng)?;
    x.mul_const(Tensor::new(v.shape().to_vec(), mask)?)
}

//! Modulization of a dense MLP into experts, the frozen random router, top-k
//! gating and the gate-weighted expert sum
//! `y = Σ_{j ∈ TopK} softmax(x·G)_j · E_j(x) + b2`.

use crate::autograd::{combine_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

/// The pre-split feed-forward block: `W2 · act(W1 · x + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMlp<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Element> DenseMlp<T> {
    /// Gaussian weights with standard deviation `scale`, zero biases.
    pub fn init(d_model: usize, d_ff: usize, rng: &mut RngStream, scale: f64) -> Result<Self> {
        Ok(Self {
            w1: Tensor::randn(vec![d_model, d_ff], rng, scale)?,
            b1: Tensor::zeros(vec![d_ff]),
            w2: Tensor::randn(vec![d_ff, d_model], rng, scale)?,
            b2: Tensor::zeros(vec![d_model]),
        })
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w1.cols()
    }

    /// `2·d_model·d_ff + d_ff + d_model`.
    pub fn param_count(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.numel()
    }

    /// Tape-free evaluation on `[rows, d_model]`.
    pub fn forward(&self, x: &Tensor<T>, act: Activation) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let c = |t: &Tensor<T>| tape.constant(t.clone());
        let y = crate::nn::dense_mlp_forward(
            &c(x),
            &c(&self.w1),
            &c(&self.b1),
            &c(&self.w2),
            &c(&self.b2),
            act,
        )?;
        Ok((*y.value()).clone())
    }
}

/// One slice of the source MLP. The output bias lives on the layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
}

impl<T: Element> Expert<T> {
    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertLayer<T> {
    pub experts: Vec<Expert<T>>,
    /// Shared output bias, added once after the expert sum.
    pub b2: Tensor<T>,
}

impl<T: Element> ExpertLayer<T> {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn param_count(&self) -> usize {
        self.experts.iter().map(Expert::param_count).sum::<usize>() + self.b2.numel()
    }

    /// Concatenates the experts back into one MLP, in index order.
    pub fn to_dense(&self) -> Result<DenseMlp<T>> {
        let d = self.b2.numel();
        let h: usize = self.experts.iter().map(Expert::hidden).sum();
        let mut w1 = Vec::with_capacity(d * h);
        for r in 0..d {
            for e in &self.experts {
                w1.extend_from_slice(e.w1.row(r));
            }
        }
        let b1 = self.experts.iter().flat_map(|e| e.b1.data().iter().copied()).collect();
        let w2 = self.experts.iter().flat_map(|e| e.w2.data().iter().copied()).collect();
        Ok(DenseMlp {
            w1: Tensor::new(vec![d, h], w1)?,
            b1: Tensor::new(vec![h], b1)?,
            w2: Tensor::new(vec![h, d], w2)?,
            b2: self.b2.clone(),
        })
    }

    /// Tape-free evaluation of the routed layer on `[rows, d_model]`.
    /// `unit_gates` replaces every selected gate by 1.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        router: &RouterState<T>,
        k: usize,
        unit_gates: bool,
        act: Activation,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(router.g.clone());
        let (decision, probs) = route(&xv, &g, k)?;
        let experts: Vec<ExpertVars<'_, T>> = self
            .experts
            .iter()
            .map(|e| ExpertVars {
                w1: tape.constant(e.w1.clone()),
                b1: tape.constant(e.b1.clone()),
                w2: tape.constant(e.w2.clone()),
            })
            .collect();
        let gates = if unit_gates {
            Gates::Unit
        } else {
            Gates::Probs(probs)
        };
        let b2 = tape.constant(self.b2.clone());
        let y = expert_layer_forward(&xv, &experts, &b2, &decision, &gates, act)?;
        Ok((*y.value()).clone())
    }
}

/// Splits the hidden units of `mlp` into `n` contiguous, equal slices.
pub fn modulize<T: Element>(mlp: &DenseMlp<T>, n: usize) -> Result<ExpertLayer<T>> {
    let (d, d_ff) = (mlp.d_model(), mlp.d_ff());
    if n == 0 || d_ff % n != 0 {
        return Err(Error::Config(format!(
            "d_ff={d_ff} is not divisible by N={n}"
        )));
    }
    let h = d_ff / n;
    let experts = (0..n)
        .map(|i| {
            let cols = i * h..(i + 1) * h;
            let w1 = (0..d)
                .flat_map(|r| mlp.w1.row(r)[cols.clone()].iter().copied())
                .collect();
            Ok(Expert {
                w1: Tensor::new(vec![d, h], w1)?,
                b1: Tensor::new(vec![h], mlp.b1.data()[cols.clone()].to_vec())?,
                w2: Tensor::new(vec![h, d], mlp.w2.data()[i * h * d..(i + 1) * h * d].to_vec())?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ExpertLayer {
        experts,
        b2: mlp.b2.clone(),
    })
}

/// Gating matrix `G` of shape `[d_model, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterState<T> {
    pub g: Tensor<T>,
    pub frozen: bool,
    pub init_seed: u64,
    pub init_scale: f64,
}

/// Draws `G` once with standard deviation `1/sqrt(d_model)` from the
/// `router-init` stream of `seed`.
pub fn router_init<T: Element>(d_model: usize, n: usize, seed: u64) -> Result<RouterState<T>> {
    router_from_stream(d_model, n, &mut RngStream::new(seed, "router-init"))
}

pub fn router_from_stream<T: Element>(
    d_model: usize,
    n: usize,
    rng: &mut RngStream,
) -> Result<RouterState<T>> {
    let init_scale = 1.0 / (d_model as f64).sqrt();
    Ok(RouterState {
        g: Tensor::randn(vec![d_model, n], rng, init_scale)?,
        frozen: true,
        init_seed: rng.seed(),
        init_scale,
    })
}

/// The `k` largest entries of `v`, largest first; ties go to the lower index.
pub fn topk_select<T: Element>(v: &[T], k: usize) -> Result<(Vec<usize>, Vec<T>)> {
    if k == 0 || k > v.len() {
        return Err(Error::InvalidArgument(format!(
            "k={k} outside [1, {}]",
            v.len()
        )));
    }
    let mut idx = Vec::with_capacity(k);
    let mut vals = Vec::with_capacity(k);
    topk_into(v, k, &mut idx);
    vals.extend(idx.iter().map(|&i| v[i]));
    Ok((idx, vals))
}

fn topk_into<T: Element>(v: &[T], k: usize, out: &mut Vec<usize>) {
    let start = out.len();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &x) in v.iter().enumerate() {
            if out[start..].contains(&i) {
                continue;
            }
            if best.is_none_or(|b| x > v[b]) {
                best = Some(i);
            }
        }
        out.push(best.expect("k <= len"));
    }
}

/// Per-token expert choices: `indices[t*k..(t+1)*k]` belong to token `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision<T> {
    pub k: usize,
    pub n_experts: usize,
    pub indices: Vec<usize>,
    pub gates: Vec<T>,
}

impl<T: Element> RoutingDecision<T> {
    /// Top-k of every row of a `[tokens, N]` probability matrix.
    pub fn from_probs(probs: &Tensor<T>, k: usize) -> Result<Self> {
        let n = probs.cols();
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!("k={k} outside [1, {n}]")));
        }
        let mut indices = Vec::with_capacity(probs.rows() * k);
        for r in 0..probs.rows() {
            topk_into(probs.row(r), k, &mut indices);
        }
        let gates = indices
            .iter()
            .enumerate()
            .map(|(i, &e)| probs.data()[(i / k) * n + e])
            .collect();
        Ok(Self {
            k,
            n_experts: n,
            indices,
            gates,
        })
    }

    /// The same expert set for whole runs of tokens, with constant gates.
    pub fn fixed(
        per_token: impl IntoIterator<Item = Vec<usize>>,
        n_experts: usize,
        gate: T,
    ) -> Result<Self> {
        let mut indices = Vec::new();
        let mut k = None;
        for set in per_token {
            if *k.get_or_insert(set.len()) != set.len() || set.iter().any(|&e| e >= n_experts) {
                return Err(Error::InvalidArgument("malformed fixed routing".into()));
            }
            indices.extend(set);
        }
        let k = k.ok_or_else(|| Error::InvalidArgument("no tokens to route".into()))?;
        let gates = vec![gate; indices.len()];
        Ok(Self {
            k,
            n_experts,
            indices,
            gates,
        })
    }

    pub fn tokens(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn token(&self, t: usize) -> &[usize] {
        &self.indices[t * self.k..(t + 1) * self.k]
    }

    /// Token rows routed to each expert, in token order.
    pub fn rows_per_expert(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.n_experts];
        for (i, &e) in self.indices.iter().enumerate() {
            rows[e].push(i / self.k);
        }
        rows
    }
}

/// `probs = softmax(x·G)` and its top-k decision. Gradients reach `x`
/// through `probs`; `G` receives one only if it was bound as trainable.
pub fn route<'t, T: Element>(
    x: &Var<'t, T>,
    g: &Var<'t, T>,
    k: usize,
) -> Result<(RoutingDecision<T>, Var<'t, T>)> {
    let probs = x.matmul(g)?.softmax(1)?;
    let decision = RoutingDecision::from_probs(&probs.value(), k)?;
    Ok((decision, probs))
}

/// Expert weights bound on a tape.
#[derive(Clone, Copy)]
pub struct ExpertVars<'t, T> {
    pub w1: Var<'t, T>,
    pub b1: Var<'t, T>,
    pub w2: Var<'t, T>,
}

impl<'t, T: Element> ExpertVars<'t, T> {
    pub fn forward(&self, x: &Var<'t, T>, act: Activation) -> Result<Var<'t, T>> {
        act.apply(&x.matmul(&self.w1)?.add(&self.b1)?).matmul(&self.w2)
    }
}

/// Where the mixture weights come from.
pub enum Gates<'t, T> {
    /// Router probabilities `[tokens, N]`; differentiable.
    Probs(Var<'t, T>),
    /// Every selected gate is 1.
    Unit,
    /// The gates stored in the decision, as constants.
    Fixed,
}

/// Evaluates only the selected experts of each token and sums their
/// gate-weighted outputs in expert index order, then adds `b2`.
pub fn expert_layer_forward<'t, T: Element>(
    x: &Var<'t, T>,
    experts: &[ExpertVars<'t, T>],
    b2: &Var<'t, T>,
    decision: &RoutingDecision<T>,
    gates: &Gates<'t, T>,
    act: Activation,
) -> Result<Var<'t, T>> {
    let (n, d) = {
        let v = x.value();
        (v.rows(), v.cols())
    };
    if decision.n_experts != experts.len() || decision.tokens() != n {
        return Err(Error::Shape(format!(
            "routing for {} tokens over {} experts, got {n} tokens and {} experts",
            decision.tokens(),
            decision.n_experts,
            experts.len()
        )));
    }
    let tape = x.tape();
    let ne = decision.n_experts;
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); ne];
    for (i, &e) in decision.indices.iter().enumerate() {
        slots[e].push(i);
    }
    let mut parts = Vec::new();
    for (e, slot) in slots.iter().enumerate() {
        if slot.is_empty() {
            continue;
        }
        let rows: Vec<usize> = slot.iter().map(|&i| i / decision.k).collect();
        let xe = x.index_rows(&rows)?;
        let ye = experts[e].forward(&xe, act)?;
        let ye = match gates {
            Gates::Unit => ye,
            Gates::Probs(p) => {
                let pos: Vec<usize> = rows.iter().map(|&r| r * ne + e).collect();
                ye.mul_rows(&p.pick(&pos)?)?
            }
            Gates::Fixed => {
                let g: Vec<T> = slot.iter().map(|&i| decision.gates[i]).collect();
                ye.mul_rows(&tape.constant(Tensor::new(vec![g.len()], g)?))?
            }
        };
        parts.push((ye, rows));
    }
    combine_rows(tape, n, d, &parts)?.add(b2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_examples() {
        let (i, v) = topk_select(&[0.1, 0.5, 0.4], 2).unwrap();
        assert_eq!(i, vec![1, 2]);
        assert_eq!(v, vec![0.5, 0.4]);
        let (i, _) = topk_select(&[0.3, 0.3, 0.2], 1).unwrap();
        assert_eq!(i, vec![0]);
        let (mut i, _) = topk_select(&[0.2, 0.9, 0.1, 0.4], 4).unwrap();
        i.sort();
        assert_eq!(i, vec![0, 1, 2, 3]);
        assert!(topk_select(&[1.0, 2.0], 0).is_err());
        assert!(topk_select(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn modulize_rejects_indivisible() {
        let mut rng = RngStream::new(0, "t");
        let mlp = DenseMlp::<f64>::init(4, 10, &mut rng, 0.1).unwrap();
        let err = modulize(&mlp, 4).unwrap_err().to_string();
        assert!(err.contains("d_ff=10") && err.contains("N=4"), "{err}");
    }

    #[test]
    fn paper_width_split() {
        let mut rng = RngStream::new(0, "t");
        let mlp = DenseMlp::<f32>::init(8, 8192, &mut rng, 0.02).unwrap();
        let layer = modulize(&mlp, 16).unwrap();
        assert_eq!(layer.n_experts(), 16);
        assert!(layer.experts.iter().all(|e| e.hidden() == 512));
        assert_eq!(layer.param_count(), mlp.param_count());
        assert_eq!(layer.to_dense().unwrap(), mlp);
    }

    #[test]
    fn single_expert_is_source() {
        let mut rng = RngStream::new(1, "t");
        let mlp = DenseMlp::<f64>::init(3, 6, &mut rng, 0.5).unwrap();
        let layer = modulize(&mlp, 1).unwrap();
        assert_eq!(layer.experts[0].w1, mlp.w1);
        assert_eq!(layer.experts[0].w2, mlp.w2);
        assert_eq!(layer.experts[0].b1, mlp.b1);
    }

    #[test]
    fn decision_gates_are_probabilities() {
        let probs = Tensor::<f64>::from_f64(vec![2, 3], &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
        let d = RoutingDecision::from_probs(&probs, 2).unwrap();
        assert_eq!(d.token(0), &[1, 2]);
        assert_eq!(d.token(1), &[0, 2]);
        assert_eq!(d.gates, vec![0.5, 0.3, 0.6, 0.3]);
        assert_eq!(d.rows_per_expert(), vec![vec![1], vec![0], vec![0, 1]]);
    }
}

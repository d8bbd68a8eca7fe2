//! Bias-corrected Adam and AdamW.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Weight decay, if any, is added to the gradient.
    Adam,
    /// Weight decay is applied directly to the weights.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments, indexed like the parameter store.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Element> AdamState<T> {
    pub fn new() -> Self {
        Self {
            moments: Vec::new(),
        }
    }
}

/// One update with learning rate `lr` at 1-based step `t`. Frozen parameters
/// and parameters without a gradient are left alone.
pub fn adam_step<T: Element>(
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
    lr: f64,
    t: usize,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("adam step counter starts at 1".into()));
    }
    if state.moments.len() < params.len() {
        state.moments.resize_with(params.len(), || None);
    }
    let f = T::from_f64_lossy;
    let (b1, b2) = (f(hyper.beta1), f(hyper.beta2));
    let (one_b1, one_b2) = (f(1.0 - hyper.beta1), f(1.0 - hyper.beta2));
    let c1 = f(1.0 / (1.0 - hyper.beta1.powi(t as i32)));
    let c2 = f(1.0 / (1.0 - hyper.beta2.powi(t as i32)));
    let (lr_t, eps) = (f(lr), f(hyper.eps));
    let wd = f(hyper.weight_decay);
    let decay = f(1.0 - lr * hyper.weight_decay);
    for (id, p) in params.iter_mut() {
        if p.frozen {
            continue;
        }
        let Some(g) = p.grad.as_ref() else { continue };
        if g.shape() != p.value.shape() {
            return Err(Error::Shape(format!(
                "gradient of {} has shape {:?}, value {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        let n = g.numel();
        let (m, v) = state.moments[id.0].get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        if m.len() != n {
            return Err(Error::Shape(format!("optimizer state of {} has wrong size", p.name)));
        }
        let w = Rc::make_mut(&mut p.value).data_mut();
        for i in 0..n {
            let mut gi = g.data()[i];
            if hyper.kind == OptimizerKind::Adam && hyper.weight_decay != 0.0 {
                gi = gi + wd * w[i];
            }
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            let mh = m[i] * c1;
            let vh = v[i] * c2;
            if hyper.kind == OptimizerKind::AdamW {
                w[i] = w[i] * decay;
            }
            w[i] = w[i] - lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, p) in params.iter() {
        if let Some(g) = &p.grad {
            sq += g.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for (_, p) in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|x| *x = *x * s);
            }
        }
    }
    norm
}

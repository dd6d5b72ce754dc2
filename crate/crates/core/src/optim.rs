//! Hand-designed optimizers: ADAM and plain gradient descent. ADAM doubles as
//! the trainer for the learned update rule's own weights.
//!
//! Both steps are pure: state in, state out. Gradients arrive as a slice
//! aligned with the parameter set's fixed order.

use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            ..Default::default()
        }
    }
}

/// First/second moment estimates mirroring a parameter set.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, hyper: AdamHyper) -> Self {
        AdamState {
            hyper,
            m: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

fn check_grads(params: &ParamSet, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() {
        let missing = params
            .iter()
            .nth(grads.len().min(params.len().saturating_sub(1)))
            .map(|e| e.name.clone())
            .unwrap_or_default();
        return Err(Error::MissingGradient(missing));
    }
    for (e, g) in params.iter().zip(grads) {
        if g.shape() != e.tensor.shape() {
            return Err(Error::MissingGradient(e.name.clone()));
        }
    }
    Ok(())
}

/// One ADAM step:
/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
/// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps), with bias-corrected
/// moment estimates.
pub fn adam_step(
    state: AdamState,
    params: &ParamSet,
    grads: &[Tensor],
) -> Result<(ParamSet, AdamState)> {
    check_grads(params, grads)?;
    let AdamHyper {
        lr,
        beta1,
        beta2,
        eps,
    } = state.hyper;
    let t = state.t + 1;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);

    let mut new_m = Vec::with_capacity(state.m.len());
    let mut new_v = Vec::with_capacity(state.v.len());
    let mut new_tensors = Vec::with_capacity(params.len());
    for ((entry, g), (m, v)) in params
        .iter()
        .zip(grads)
        .zip(state.m.iter().zip(state.v.iter()))
    {
        let m2 = m.zip_map(g, |m, g| beta1 * m + (1.0 - beta1) * g)?;
        let v2 = v.zip_map(g, |v, g| beta2 * v + (1.0 - beta2) * g * g)?;
        let td = entry.tensor.data();
        let (md, vd) = (m2.data(), v2.data());
        let updated: Vec<f64> = (0..td.len())
            .map(|i| {
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                td[i] - lr * m_hat / (v_hat.sqrt() + eps)
            })
            .collect();
        new_m.push(m2);
        new_v.push(v2);
        new_tensors.push(Tensor::new(entry.tensor.shape().to_vec(), updated)?);
    }
    let new_params = params.with_tensors(new_tensors)?;
    Ok((
        new_params,
        AdamState {
            hyper: state.hyper,
            m: new_m,
            v: new_v,
            t,
        },
    ))
}

/// theta <- theta - lr * g
pub fn sgd_step(params: &ParamSet, grads: &[Tensor], lr: f64) -> Result<ParamSet> {
    check_grads(params, grads)?;
    let tensors = params
        .tensors()
        .zip(grads)
        .map(|(t, g)| t.zip_map(g, |t, g| t - lr * g))
        .collect::<Result<Vec<_>>>()?;
    params.with_tensors(tensors)
}

use serde::{Deserialize, Serialize};

use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters. Weight decay is decoupled from the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Per-parameter learning-rate multiplier and weight-decay switch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamGroup {
    pub lr_scale: f64,
    pub decay: bool,
    /// Frozen parameters are skipped entirely (moments untouched).
    pub frozen: bool,
}

impl Default for ParamGroup {
    fn default() -> Self {
        ParamGroup {
            lr_scale: 1.0,
            decay: true,
            frozen: false,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay:
/// `p <- p - lr*wd*p`, then `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
///
/// `groups` may be empty (every parameter uses the defaults). Non-finite
/// gradients reject the whole step and leave parameters and state untouched.
pub fn adam_step<T: Element>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
    groups: &[ParamGroup],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !groups.is_empty() && groups.len() != params.len() {
        return Err(Error::invalid("adam_step: one group per parameter required"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of parameter #{i}"),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let default_group = ParamGroup::default();
    for (i, p) in params.iter_mut().enumerate() {
        let group = groups.get(i).unwrap_or(&default_group);
        if group.frozen {
            continue;
        }
        let lr_i = lr * group.lr_scale;
        let decay = if group.decay {
            T::from_f64(1.0 - lr_i * cfg.weight_decay)
        } else {
            T::one()
        };
        let step = T::from_f64(lr_i / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(cfg.eps);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(grads[i].data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mv = b1 * *mv + one_b1 * gv;
            *vv = b2 * *vv + one_b2 * gv * gv;
            *pv = *pv * decay - step * *mv / ((*vv * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

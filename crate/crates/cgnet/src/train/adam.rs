//! ADAM with classic L2 weight decay added to the gradient. BN gamma/beta
//! and PReLU slopes are exempt from decay.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::params::{ParamKind, ParamStore};
use crate::train::schedule::TrainConfig;

/// Optimizer progress; the per-parameter moments live in the store.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AdamState {
    /// Completed steps.
    pub t: u64,
}

/// One optimizer step over every learnable parameter; gradients are zeroed
/// afterwards. Fails on any non-finite gradient, naming the parameter.
pub fn adam_step<E: Element>(
    store: &mut ParamStore<E>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for p in store.iter() {
        if p.kind == ParamKind::Buffer {
            continue;
        }
        if p.grad.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = E::from_f64(cfg.beta1);
    let b2 = E::from_f64(cfg.beta2);
    let one = E::one();
    let bc1 = E::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = E::from_f64(1.0 - cfg.beta2.powi(t));
    let lr_e = E::from_f64(lr);
    let eps = E::from_f64(cfg.adam_eps);
    let wd = E::from_f64(cfg.weight_decay);

    for p in store.iter_mut() {
        if p.kind == ParamKind::Buffer {
            continue;
        }
        let decay = p.kind == ParamKind::Weight && cfg.weight_decay != 0.0;
        let n = p.value.len();
        for i in 0..n {
            let theta = p.value.data()[i];
            let mut g = p.grad.data()[i];
            if decay {
                g = g + wd * theta;
            }
            let m = b1 * p.m.data()[i] + (one - b1) * g;
            let v = b2 * p.v.data()[i] + (one - b2) * g * g;
            p.m.data_mut()[i] = m;
            p.v.data_mut()[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            p.value.data_mut()[i] = theta - lr_e * m_hat / (v_hat.sqrt() + eps);
            p.grad.data_mut()[i] = E::zero();
        }
        p.value.debug_check_finite();
    }
    Ok(())
}

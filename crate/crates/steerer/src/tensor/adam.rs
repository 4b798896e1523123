//! Bias-corrected Adam update.

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam hyperparameters other than the learning rate.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One in-place Adam step over every parameter in the store.
///
/// Gradients are cleared afterwards.
pub fn adam_step(store: &mut ParamStore, lr: f64, hyper: AdamHyper) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::invalid(
            "adam_step",
            format!("learning rate must be positive, got {lr}"),
        ));
    }
    let AdamHyper { beta1, beta2, eps } = hyper;
    for p in store.iter_mut() {
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let data = p.value.data_mut();
        for i in 0..data.len() {
            let g = p.grad[i];
            p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
            p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
            let mhat = p.m[i] / bc1;
            let vhat = p.v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        p.grad.iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(())
}

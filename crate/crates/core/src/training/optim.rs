use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update from the accumulated gradients.
///
/// Fails without touching any parameter when a gradient is not finite.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, lr: f64) -> Result<()> {
    for (name, p) in params.iter() {
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {name}[{i}] at step {}",
                params.step + 1
            )));
        }
    }
    params.step += 1;
    let t = params.step as i32;
    let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
    let c1 = T::of(1.0 - ADAM_BETA1.powi(t));
    let c2 = T::of(1.0 - ADAM_BETA2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(ADAM_EPS));
    for (_, p) in params.iter_mut() {
        let g = p.grad.data();
        let m = p.first_moment.data_mut();
        for (m, &g) in m.iter_mut().zip(g) {
            *m = b1 * *m + (T::one() - b1) * g;
        }
        let v = p.second_moment.data_mut();
        for (v, &g) in v.iter_mut().zip(p.grad.data()) {
            *v = b2 * *v + (T::one() - b2) * g * g;
        }
        let (m, v) = (p.first_moment.data(), p.second_moment.data());
        let upd: Vec<T> = m
            .iter()
            .zip(v)
            .map(|(&m, &v)| lr * (m / c1) / ((v / c2).sqrt() + eps))
            .collect();
        for (x, u) in p.value.data_mut().iter_mut().zip(upd) {
            *x -= u;
        }
    }
    Ok(())
}

/// Reduces the learning rate when the monitored metric stops improving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            lr,
            patience,
            factor,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records an epoch metric (higher is better); returns true when the rate was lowered.
    pub fn observe(&mut self, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

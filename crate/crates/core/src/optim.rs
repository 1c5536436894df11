//! SGD with momentum and a polynomial learning-rate schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Element;

/// `base * (1 - step / total)^power`, clamped at zero past the end.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = 1.0 - (step as f64 / total as f64).min(1.0);
    base * frac.powf(power)
}

/// Heavy-ball SGD: `v = mu * v + g; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<E> {
    pub momentum: f64,
    velocity: HashMap<ParamId, Vec<E>>,
}

impl<E: Element> Sgd<E> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// Applies one update. Refuses non-finite gradients without touching any
    /// parameter.
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &[(ParamId, Vec<E>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", store.get(*id).name)));
            }
        }
        let (mu, lr) = (E::of(self.momentum), E::of(lr));
        for (id, g) in grads {
            let p = store.value_mut(*id).data_mut();
            if self.momentum == 0.0 {
                p.iter_mut().zip(g).for_each(|(p, &g)| *p -= lr * g);
                continue;
            }
            let v = self.velocity.entry(*id).or_insert_with(|| vec![E::zero(); g.len()]);
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }

    /// Momentum buffers in parameter order, for checkpointing.
    pub fn velocity(&self, id: ParamId) -> Option<&[E]> {
        self.velocity.get(&id).map(Vec::as_slice)
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Vec<E>) {
        self.velocity.insert(id, v);
    }
}

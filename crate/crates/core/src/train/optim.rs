//! Adaptive-moment optimiser with decoupled weight decay.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::model::{Gradients, ParamStore};

/// Whether decoupled weight decay applies to a parameter.
///
/// Biases, modulation (gate) projections and the learned context offset are
/// exempt.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.contains(".mod.") || name.ends_with(".ctx"))
}

#[derive(Clone, Debug)]
struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Names of the parameters holding optimiser state.
    pub fn state_names(&self) -> impl Iterator<Item = &String> {
        self.state.keys()
    }

    /// Applies one update. Gradients for frozen or unknown parameters are an
    /// error; trainable parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for name in grads.keys() {
            if params.is_frozen(name) {
                return Err(Error::InvalidConfig(format!("gradient supplied for frozen `{name}`")));
            }
            let p = params.get(name)?;
            if p.raw_dim() != grads[name].raw_dim() {
                return Err(Error::ShapeMismatch(format!("gradient for `{name}`")));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Array2::zeros(g.raw_dim()),
                v: Array2::zeros(g.raw_dim()),
            });
            let shrink = if decays(name) {
                1.0 - lr * self.weight_decay
            } else {
                1.0
            };
            Zip::from(p)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p = *p * shrink - lr * update;
                });
        }
        Ok(())
    }
}

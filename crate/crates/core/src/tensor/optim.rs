use std::collections::BTreeMap;

use thiserror::Error;

use super::{ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("parameter `{0}` has a non-finite gradient")]
    NonFiniteGrad(String),
    #[error("moment state for `{0}` does not match the parameter shape")]
    StateShape(String),
}

/// SGD or Adam over the trainable tensors of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter and clears all
    /// gradients. Gradients are validated before anything is modified, so a
    /// failed step leaves the parameters untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, dir: Direction) -> Result<(), OptimError> {
        let names = params.trainable_names();
        for name in &names {
            let t = params.get(name).expect("name from store");
            let g = t.grad.as_ref().ok_or_else(|| OptimError::MissingGrad(name.clone()))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGrad(name.clone()));
            }
            if let Some(m) = self.m.get(name) {
                if m.len() != t.numel() {
                    return Err(OptimError::StateShape(name.clone()));
                }
            }
        }
        self.step_count += 1;
        let sign = match dir {
            Direction::Descent => -1.0,
            Direction::Ascent => 1.0,
        };
        let lr = T::of(sign * self.lr);
        let k = self.step_count as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(k));
        let c2 = T::of(1.0 - self.beta2.powi(k));
        let eps = T::of(self.eps);
        for name in &names {
            let t = params.get_mut(name).expect("name from store");
            let g = t.grad.take().expect("validated above");
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in t.data_mut().iter_mut().zip(&g) {
                        *p = *p + lr * *g;
                    }
                }
                OptimizerKind::Adam => {
                    let n = g.len();
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
                    for (i, p) in t.data_mut().iter_mut().enumerate() {
                        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        *p = *p + lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grads();
        Ok(())
    }
}

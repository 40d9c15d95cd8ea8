//! Stateful leaky integrate-and-fire neurons, one step at a time.

use super::NetError;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct LifState<T> {
    /// Membrane potential after the most recent reset.
    pub membrane: Vec<T>,
    pub tau: T,
    pub v_th: T,
    pub t: usize,
    pub steps: usize,
}

impl<T: Real> LifState<T> {
    pub fn new(len: usize, tau: f64, v_th: f64, steps: usize) -> Result<Self, NetError> {
        if v_th <= 0.0 {
            return Err(NetError::Config(format!("v_th must be positive, got {v_th}")));
        }
        Ok(Self {
            membrane: vec![T::zero(); len],
            tau: T::of(tau),
            v_th: T::of(v_th),
            t: 0,
            steps,
        })
    }
}

/// Integrates `input`, emits binary spikes and hard-resets fired neurons.
pub fn lif_step<T: Real>(input: &[T], state: &mut LifState<T>) -> Result<Vec<T>, NetError> {
    if state.t >= state.steps {
        return Err(NetError::Exhausted(state.steps));
    }
    if input.len() != state.membrane.len() {
        return Err(NetError::Config(format!(
            "input of {} values for {} neurons",
            input.len(),
            state.membrane.len()
        )));
    }
    let mut spikes = vec![T::zero(); input.len()];
    for ((u, s), i) in state.membrane.iter_mut().zip(spikes.iter_mut()).zip(input) {
        let v = state.tau * *u + *i;
        if v >= state.v_th {
            *s = T::one();
            *u = T::zero();
        } else {
            *u = v;
        }
    }
    state.t += 1;
    Ok(spikes)
}

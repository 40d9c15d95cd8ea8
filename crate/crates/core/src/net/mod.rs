//! The degradation classifier (generator) and the spiking dual-interaction
//! enhancer.

mod classifier;
mod enhancer;
pub mod lif;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Graph, LifParams, ParamStore, Real, Tensor, TensorError, Var};

pub use classifier::{classifier_forward, init_classifier};
pub use enhancer::{enhancer_forward, init_enhancer, ssm_forward, stm_forward, update_running_stats, Enhanced};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("non-finite activations in {0}")]
    NonFinite(&'static str),
    #[error("LIF state already ran all {0} time steps")]
    Exhausted(usize),
}

/// Architecture hyperparameters shared by both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature channels of the enhancer.
    pub width: usize,
    pub time_steps: usize,
    pub tau: f64,
    pub v_th: f64,
    /// Half-width of the rectangular surrogate window.
    pub surrogate_width: f64,
    pub classifier_widths: [usize; 3],
    pub slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 16,
            time_steps: 4,
            tau: 0.5,
            v_th: 1.0,
            surrogate_width: 0.5,
            classifier_widths: [8, 16, 16],
            slope: 0.1,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::Config(m.to_string()));
        if self.width == 0 || self.classifier_widths.contains(&0) {
            return bad("channel widths must be positive");
        }
        if self.time_steps == 0 {
            return bad("time_steps must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if self.v_th <= 0.0 {
            return bad("v_th must be positive");
        }
        if self.surrogate_width <= 0.0 {
            return bad("surrogate_width must be positive");
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn lif(&self) -> LifParams {
        LifParams {
            tau: self.tau,
            v_th: self.v_th,
            width: self.surrogate_width,
            steps: self.time_steps,
        }
    }
}

/// Whether parameters are differentiated and whether batch norm uses batch
/// statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub trainable: bool,
    pub train_bn: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        trainable: true,
        train_bn: true,
    };
    pub const FROZEN_TRAIN_BN: Pass = Pass {
        trainable: false,
        train_bn: true,
    };
    pub const EVAL: Pass = Pass {
        trainable: false,
        train_bn: false,
    };
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-uniform OIHW kernel for a leaky ReLU with the given slope.
    pub(crate) fn conv(&mut self, o: usize, i: usize, k: usize, slope: f64) -> Tensor<f32> {
        let fan_in = (i * k * k) as f64;
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
        let data = (0..o * i * k * k)
            .map(|_| self.rng.gen_range(-bound..bound) as f32)
            .collect();
        Tensor::new(vec![o, i, k, k], data).expect("sized").trainable()
    }
}

pub(crate) fn zeros(shape: &[usize]) -> Tensor<f32> {
    Tensor::zeros(shape).trainable()
}

pub(crate) fn conv<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
    trainable: bool,
) -> Result<Var, NetError> {
    let w = g.param(store, &format!("{name}.w"), trainable)?;
    let b_name = format!("{name}.b");
    let b = if store.contains(&b_name) {
        Some(g.param(store, &b_name, trainable)?)
    } else {
        None
    };
    Ok(g.conv2d(x, w, b, stride, pad)?)
}

pub(crate) fn check_finite<T: Real>(g: &Graph<T>, v: Var, what: &'static str) -> Result<(), NetError> {
    if g.data(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NetError::NonFinite(what))
    }
}

//! Alternating training of the enhancer (descent) and the degradation
//! classifier (ascent), plus evaluation of a trained enhancer.

mod config;
mod log;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::degrade::{compose, mix_seed, DegradationSpec, DegradeError};
use crate::image::{from_batch, to_batch, Image, ImageError};
use crate::io::{Checkpoint, IoError, Sample};
use crate::loss::{loss_generator, loss_total};
use crate::metrics::{MetricError, MetricReport, MetricRow};
use crate::net::{
    classifier_forward, enhancer_forward, init_classifier, init_enhancer, update_running_stats, NetError, Pass,
};
use crate::tensor::{Direction, Graph, OptimError, OptimizerState, ParamStore, Tensor, TensorError, Var};

pub use self::config::{default_warm_epochs, Strategy, TrainConfig};
pub use self::log::{Record, RunLog};

/// An epoch whose mean loss exceeds this multiple of the first epoch's counts
/// towards divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: usize = 3;

const CLASSIFIER_PREFIX: &str = "cls.";
const ENHANCER_PREFIX: &str = "enh.";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Degrade(#[from] DegradeError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("training diverged: epoch {epoch} mean loss {loss:.4e} exceeded {DIVERGENCE_FACTOR}x the initial {initial:.4e} for {DIVERGENCE_PATIENCE} epochs")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
    #[error("parameter `{0}` is shared by the enhancer and the classifier")]
    SharedParam(String),
    #[error("run log: {0}")]
    Log(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Outcome of one enhancer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DescentStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub psnr: f64,
}

/// Outcome of one classifier update. `objective` is the generator loss, so
/// the ascent lowers it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AscentStats {
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    /// Classifier parameters.
    pub theta: ParamStore<f32>,
    /// Enhancer parameters and batch-norm buffers.
    pub omega: ParamStore<f32>,
    pub opt_e: OptimizerState<f32>,
    pub opt_g: OptimizerState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub iteration: u64,
    pub log: RunLog,
    /// Written at the end of every epoch when set.
    pub checkpoint_path: Option<PathBuf>,
    initial_loss: Option<f64>,
    over_limit: usize,
}

fn disjoint(theta: &ParamStore<f32>, omega: &ParamStore<f32>) -> Result<()> {
    match theta.iter().find(|(n, _)| omega.contains(n)) {
        Some((n, _)) => Err(TrainError::SharedParam(n.to_string())),
        None => Ok(()),
    }
}

/// Stacks samples' clean images into `[N, 1, H, W]`.
fn clean_batch(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.clean).collect();
    Ok(to_batch(&images)?)
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate().map_err(TrainError::Config)?;
        let theta = init_classifier(&cfg.model, cfg.steps, cfg.bank.n_ops(), mix_seed(cfg.seed, 1));
        let omega = init_enhancer(&cfg.model, mix_seed(cfg.seed, 2));
        disjoint(&theta, &omega)?;
        Ok(Self {
            opt_e: OptimizerState::adam(cfg.gamma_e),
            opt_g: OptimizerState::sgd(cfg.gamma_g),
            cfg,
            theta,
            omega,
            epoch: 0,
            iteration: 0,
            log: RunLog::default(),
            checkpoint_path: None,
            initial_loss: None,
            over_limit: 0,
        })
    }

    /// Stripe patterns of iteration `it`.
    pub fn batch_seed(&self, it: u64) -> u64 {
        mix_seed(mix_seed(self.cfg.seed, 3), it)
    }

    /// Mixture weights `[N, steps, K]` for the current strategy, no gradient.
    pub fn weights(&self, x: &Tensor<f32>, batch_seed: u64) -> Result<Tensor<f32>> {
        let n = x.shape()[0];
        let (s, k) = (self.cfg.steps, self.cfg.bank.n_ops());
        if self.cfg.strategy == Strategy::Random {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(batch_seed, 4));
            let mut w = vec![0.0; n * s * k];
            for row in w.chunks_mut(k) {
                row[rng.gen_range(0..k)] = 1.0;
            }
            return Ok(Tensor::new(vec![n, s, k], w)?);
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = classifier_forward(&mut g, &self.theta, xv, &self.cfg.model, s, k, false)?;
        Ok(g.value(w).clone())
    }

    /// Degraded inputs produced by the current generator.
    pub fn generate(&self, x: &Tensor<f32>, batch_seed: u64) -> Result<Tensor<f32>> {
        let w = self.weights(x, batch_seed)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w);
        let xhat = compose(&mut g, xv, wv, &self.cfg.bank, batch_seed)?;
        Ok(g.value(xhat).clone())
    }

    /// One Adam step on the enhancer restoring `xhat` towards `y`. Batch norm
    /// runs on batch statistics and the running buffers are updated.
    pub fn descent_step(&mut self, xhat: &Tensor<f32>, y: &Tensor<f32>) -> Result<DescentStats> {
        let mut g = Graph::new();
        let xv = g.constant(xhat.clone());
        let yv = g.constant(y.clone());
        let out = enhancer_forward(&mut g, &self.omega, xv, &self.cfg.model, Pass::TRAIN)?;
        let loss = loss_total(&mut g, out.output, yv, self.cfg.loss)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: self.epoch,
                batch: 0,
            });
        }
        let psnr = batch_psnr(g.data(out.output), y.data());
        g.backward(loss)?;
        g.write_grads(&mut self.omega);
        let grad_norm = self.omega.grad_norm();
        self.opt_e.step(&mut self.omega, Direction::Descent)?;
        update_running_stats(&mut self.omega, &g, &out.norms, self.cfg.model.bn_momentum);
        Ok(DescentStats {
            loss: value,
            grad_norm,
            psnr,
        })
    }

    /// Enhancement loss on `(xhat, y)` without updating anything, with batch
    /// norm on batch statistics as in [`Trainer::descent_step`].
    pub fn descent_loss(&self, xhat: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(xhat.clone());
        let yv = g.constant(y.clone());
        let out = enhancer_forward(&mut g, &self.omega, xv, &self.cfg.model, Pass::FROZEN_TRAIN_BN)?;
        let loss = loss_total(&mut g, out.output, yv, self.cfg.loss)?;
        Ok(g.value(loss).item() as f64)
    }

    /// Builds `x -> classifier -> compose -> enhancer` with frozen enhancer
    /// weights and batch-statistics normalisation, returning the clean input,
    /// `xhat` and `yhat`.
    fn chain(&self, g: &mut Graph<f32>, x: &Tensor<f32>, batch_seed: u64) -> Result<(Var, Var, Var)> {
        let xv = g.constant(x.clone());
        let (s, k) = (self.cfg.steps, self.cfg.bank.n_ops());
        let w = classifier_forward(g, &self.theta, xv, &self.cfg.model, s, k, true)?;
        let xhat = compose(g, xv, w, &self.cfg.bank, batch_seed)?;
        let out = enhancer_forward(g, &self.omega, xhat, &self.cfg.model, Pass::FROZEN_TRAIN_BN)?;
        Ok((xv, xhat, out.output))
    }

    /// Enhancement loss of the generator-enhancer chain on clean batch `x`,
    /// with the enhancer and classifier as they stand.
    pub fn chain_loss(&self, x: &Tensor<f32>, batch_seed: u64) -> Result<f64> {
        let mut g = Graph::new();
        let (xv, _, yhat) = self.chain(&mut g, x, batch_seed)?;
        let l = loss_total(&mut g, yhat, xv, self.cfg.loss)?;
        Ok(g.value(l).item() as f64)
    }

    /// One SGD ascent step on the classifier: raises the enhancement loss of
    /// the degraded batch, penalised by `lambda_reg` times the distance of the
    /// degraded batch from the clean one.
    pub fn ascent_step(&mut self, x: &Tensor<f32>, batch_seed: u64) -> Result<AscentStats> {
        let mut g = Graph::new();
        let (xv, xhat, yhat) = self.chain(&mut g, x, batch_seed)?;
        let gen = loss_generator(&mut g, yhat, xv, xhat, xv, self.cfg.loss, self.cfg.lambda_reg)?;
        let objective = g.value(gen).item() as f64;
        if !objective.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: self.epoch,
                batch: 0,
            });
        }
        // Ascend on -gen, the regularised enhancement loss.
        let j = g.scale(gen, -1.0);
        g.backward(j)?;
        g.write_grads(&mut self.theta);
        let grad_norm = self.theta.grad_norm();
        self.opt_g.step(&mut self.theta, Direction::Ascent)?;
        Ok(AscentStats { objective, grad_norm })
    }

    pub fn in_warm_start(&self) -> bool {
        self.epoch < self.cfg.warm_epochs
    }

    /// Runs one epoch over `data`, returning its mean enhancement loss.
    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.cfg.seed, 5), self.epoch as u64)));
        let warm = self.in_warm_start();
        let adversarial = self.cfg.strategy == Strategy::Adversarial && !warm;
        let phase = if warm { "warm" } else { "main" };
        let (mut loss_sum, mut psnr_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            self.iteration += 1;
            let seed = self.batch_seed(self.iteration);
            let samples: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            let epoch = self.epoch;
            let at_batch = |e: TrainError| match e {
                TrainError::NonFiniteLoss { .. }
                | TrainError::Net(NetError::NonFinite(_))
                | TrainError::Optim(OptimError::NonFiniteGrad(_)) => TrainError::NonFiniteLoss { epoch, batch: b },
                e => e,
            };
            let x = clean_batch(&samples)?;
            let w = self.weights(&x, seed).map_err(at_batch)?;
            let xhat = self.generate(&x, seed).map_err(at_batch)?;
            let d = self.descent_step(&xhat, &x).map_err(at_batch)?;
            let a = if adversarial && self.iteration % self.cfg.ascent_every as u64 == 0 {
                Some(self.ascent_step(&x, seed).map_err(at_batch)?)
            } else {
                None
            };
            self.log.push(Record::Iteration {
                iteration: self.iteration,
                epoch: self.epoch,
                phase,
                enhancer_loss: d.loss,
                enhancer_grad_norm: d.grad_norm,
                generator_objective: a.map(|a| a.objective),
                generator_grad_norm: a.map(|a| a.grad_norm),
                weights: mean_weights(&w),
            })?;
            loss_sum += d.loss;
            psnr_sum += d.psnr;
            batches += 1;
        }
        let mean = loss_sum / batches as f64;
        self.log.push(Record::Epoch {
            epoch: self.epoch,
            mean_loss: mean,
            train_psnr: psnr_sum / batches as f64,
        })?;
        ::log::info!("epoch {} ({phase}): loss {mean:.5}", self.epoch);
        self.epoch += 1;
        self.guard(mean)?;
        if let Some(path) = &self.checkpoint_path {
            self.to_checkpoint().save(path)?;
        }
        Ok(mean)
    }

    fn guard(&mut self, mean: f64) -> Result<()> {
        let initial = *self.initial_loss.get_or_insert(mean);
        if mean > DIVERGENCE_FACTOR * initial {
            self.over_limit += 1;
            if self.over_limit >= DIVERGENCE_PATIENCE {
                return Err(TrainError::Diverged {
                    epoch: self.epoch - 1,
                    loss: mean,
                    initial,
                });
            }
        } else {
            self.over_limit = 0;
        }
        Ok(())
    }

    /// Supervised epochs against the frozen initial generator.
    pub fn warm_start(&mut self, data: &[Sample]) -> Result<()> {
        while self.in_warm_start() {
            self.train_epoch(data)?;
        }
        Ok(())
    }

    /// Trains until `total_epochs` epochs have completed.
    pub fn train(&mut self, data: &[Sample]) -> Result<()> {
        self.warm_start(data)?;
        while self.epoch < self.cfg.total_epochs {
            self.train_epoch(data)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = self.theta.clone();
        for (n, t) in self.omega.iter() {
            params.insert(n, t.clone());
        }
        Checkpoint {
            seed: self.cfg.seed,
            iteration: self.iteration,
            config: self.cfg.to_text(),
            state: vec![
                ("epoch".into(), self.epoch as f64),
                ("initial_loss".into(), self.initial_loss.unwrap_or(f64::NAN)),
                ("over_limit".into(), self.over_limit as f64),
            ],
            params,
            optimizers: vec![("enhancer".into(), self.opt_e.clone()), ("generator".into(), self.opt_g.clone())],
        }
    }

    /// Restores a run; training continues exactly where it stopped.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::parse(&ck.config)?;
        let mut t = Trainer::new(cfg)?;
        let mut theta = ck.params.clone();
        theta.retain(|n| n.starts_with(CLASSIFIER_PREFIX));
        let mut omega = ck.params.clone();
        omega.retain(|n| n.starts_with(ENHANCER_PREFIX));
        let missing = t
            .theta
            .iter()
            .chain(t.omega.iter())
            .find(|(n, tensor)| {
                let got = if n.starts_with(CLASSIFIER_PREFIX) { theta.get(n) } else { omega.get(n) };
                got.map_or(true, |g| g.shape() != tensor.shape())
            })
            .map(|(n, _)| n.to_string());
        if let Some(n) = missing {
            return Err(IoError::Checkpoint(format!("parameter `{n}` missing or mis-shaped")).into());
        }
        t.theta = theta;
        t.omega = omega;
        disjoint(&t.theta, &t.omega)?;
        for (name, slot) in [("enhancer", &mut t.opt_e), ("generator", &mut t.opt_g)] {
            *slot = ck
                .optimizer(name)
                .cloned()
                .ok_or_else(|| IoError::Checkpoint(format!("missing optimizer `{name}`")))?;
        }
        t.iteration = ck.iteration;
        t.epoch = ck.state_value("epoch").unwrap_or(0.0) as usize;
        t.initial_loss = ck.state_value("initial_loss").filter(|v| v.is_finite());
        t.over_limit = ck.state_value("over_limit").unwrap_or(0.0) as usize;
        Ok(t)
    }
}

/// Batch-mean weight per operator, averaged over composition steps.
fn mean_weights(w: &Tensor<f32>) -> Vec<f64> {
    let k = *w.shape().last().unwrap_or(&1);
    let rows = w.numel() / k;
    let mut out = vec![0.0; k];
    for row in w.data().chunks(k) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v as f64 / rows as f64;
        }
    }
    out
}

fn batch_psnr(a: &[f32], b: &[f32]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Runs the enhancer in inference mode on one image.
pub fn enhance(omega: &ParamStore<f32>, cfg: &crate::net::ModelConfig, x: &Image) -> Result<Image> {
    let mut g = Graph::new();
    let xv = g.constant(to_batch(&[x])?);
    let out = enhancer_forward(&mut g, omega, xv, cfg, Pass::EVAL)?;
    let t = g.value(out.output);
    Ok(from_batch(t.shape(), t.data())?.remove(0))
}

/// How evaluation inputs are produced.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalInput {
    /// Synthesised from the clean image, seeded per sample.
    Synthetic(DegradationSpec),
    /// The degraded image paired with each sample.
    Paired,
}

impl std::fmt::Display for EvalInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalInput::Synthetic(s) => write!(f, "{s}"),
            EvalInput::Paired => f.write_str("paired"),
        }
    }
}

/// Degrades (or loads) each sample, enhances it and scores the output
/// against the clean image.
pub fn evaluate(
    omega: &ParamStore<f32>,
    cfg: &crate::net::ModelConfig,
    samples: &[Sample],
    input: &EvalInput,
    seed: u64,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let degraded = match input {
            EvalInput::Synthetic(spec) => spec.apply(&s.clean, mix_seed(seed, i as u64))?,
            EvalInput::Paired => s
                .degraded
                .clone()
                .ok_or_else(|| TrainError::Config(format!("sample `{}` has no paired degraded image", s.name)))?,
        };
        let out = enhance(omega, cfg, &degraded)?;
        rows.push(MetricRow::compute(&s.name, &out, &s.clean, &degraded)?);
    }
    Ok(MetricReport {
        degradation: input.to_string(),
        rows,
    })
}

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::degrade::SeverityBank;
use crate::io::{config, IoError};
use crate::loss::LossWeights;
use crate::net::ModelConfig;

/// How degraded training inputs are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Classifier-generated mixtures, updated by gradient ascent.
    Adversarial,
    /// The untrained classifier's uniform mixture, never updated.
    Uniform,
    /// One operator per image and step, drawn at random.
    Random,
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adversarial" => Ok(Strategy::Adversarial),
            "uniform" => Ok(Strategy::Uniform),
            "random" => Ok(Strategy::Random),
            _ => Err(format!("unknown strategy `{s}` (adversarial, uniform, random)")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Adversarial => "adversarial",
            Strategy::Uniform => "uniform",
            Strategy::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Enhancer (Adam) learning rate.
    pub gamma_e: f64,
    /// Generator (SGD) learning rate.
    pub gamma_g: f64,
    pub warm_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub bank: SeverityBank,
    /// Composition steps.
    pub steps: usize,
    pub ascent_every: usize,
    pub lambda_reg: f64,
    pub strategy: Strategy,
    pub model: ModelConfig,
}

/// 5% of the schedule, at least one epoch, never more than all of it.
pub fn default_warm_epochs(total: usize) -> usize {
    ((total as f64 * 0.05).round() as usize).max(1).min(total)
}

impl Default for TrainConfig {
    fn default() -> Self {
        let total_epochs = 20;
        Self {
            gamma_e: 1e-4,
            gamma_g: 2e-4,
            warm_epochs: default_warm_epochs(total_epochs),
            total_epochs,
            batch_size: 4,
            seed: 0,
            loss: LossWeights::default(),
            bank: SeverityBank::default(),
            steps: 2,
            ascent_every: 1,
            lambda_reg: 0.1,
            strategy: Strategy::Adversarial,
            model: ModelConfig::default(),
        }
    }
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma_e > 0.0 && self.gamma_g > 0.0 && self.gamma_e.is_finite() && self.gamma_g.is_finite()) {
            return Err("learning rates must be positive".into());
        }
        if self.total_epochs == 0 {
            return Err("total_epochs must be at least 1".into());
        }
        if self.warm_epochs > self.total_epochs {
            return Err(format!(
                "warm_epochs ({}) exceeds total_epochs ({})",
                self.warm_epochs, self.total_epochs
            ));
        }
        if self.batch_size == 0 || self.steps == 0 || self.ascent_every == 0 {
            return Err("batch_size, steps and ascent_every must be positive".into());
        }
        if self.loss.alpha < 0.0 || self.loss.beta < 0.0 || self.lambda_reg < 0.0 {
            return Err("loss weights and lambda_reg must be non-negative".into());
        }
        self.bank.validate().map_err(|e| e.to_string())?;
        self.model.validate().map_err(|e| e.to_string())
    }

    /// Parses `[train]`, `[loss]`, `[bank]` and `[model]` sections. Keys not
    /// listed here are rejected with their line number.
    pub fn parse(text: &str) -> Result<Self, IoError> {
        let mut cfg = TrainConfig::default();
        let mut warm = None;
        for e in config::parse(text)? {
            match (e.section.as_str(), e.key.as_str()) {
                ("train", "gamma_e") => cfg.gamma_e = e.parse()?,
                ("train", "gamma_g") => cfg.gamma_g = e.parse()?,
                ("train", "warm_epochs") => warm = Some(e.parse()?),
                ("train", "total_epochs") => cfg.total_epochs = e.parse()?,
                ("train", "batch_size") => cfg.batch_size = e.parse()?,
                ("train", "seed") => cfg.seed = e.parse()?,
                ("train", "steps") => cfg.steps = e.parse()?,
                ("train", "ascent_every") => cfg.ascent_every = e.parse()?,
                ("train", "lambda_reg") => cfg.lambda_reg = e.parse()?,
                ("train", "strategy") => cfg.strategy = e.value.parse().map_err(|m: String| e.error(m))?,
                ("loss", "alpha") => cfg.loss.alpha = e.parse()?,
                ("loss", "beta") => cfg.loss.beta = e.parse()?,
                ("bank", "stripe_amplitudes") => cfg.bank.stripe = e.list()?,
                ("bank", "lowres_scales") => cfg.bank.lowres = e.list()?,
                ("bank", "contrast_levels") => {
                    cfg.bank.contrast = e
                        .list::<String>()?
                        .iter()
                        .map(|item| {
                            let (f, g) = item
                                .split_once(':')
                                .ok_or_else(|| e.error(format!("contrast level `{item}` is not FACTOR:GAMMA")))?;
                            match (f.trim().parse(), g.trim().parse()) {
                                (Ok(f), Ok(g)) => Ok((f, g)),
                                _ => Err(e.error(format!("contrast level `{item}` is not FACTOR:GAMMA"))),
                            }
                        })
                        .collect::<Result<_, _>>()?
                }
                ("model", "width") => cfg.model.width = e.parse()?,
                ("model", "time_steps") => cfg.model.time_steps = e.parse()?,
                ("model", "tau") => cfg.model.tau = e.parse()?,
                ("model", "v_th") => cfg.model.v_th = e.parse()?,
                ("model", "surrogate_width") => cfg.model.surrogate_width = e.parse()?,
                (s, k) => {
                    let full = if s.is_empty() { k.to_string() } else { format!("{s}.{k}") };
                    return Err(e.error(format!("unknown key `{full}`")));
                }
            }
        }
        cfg.warm_epochs = warm.unwrap_or_else(|| default_warm_epochs(cfg.total_epochs));
        cfg.validate().map_err(|msg| IoError::Config { line: 0, msg })?;
        Ok(cfg)
    }

    /// Inverse of [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "gamma_e = {}", self.gamma_e);
        let _ = writeln!(s, "gamma_g = {}", self.gamma_g);
        let _ = writeln!(s, "warm_epochs = {}", self.warm_epochs);
        let _ = writeln!(s, "total_epochs = {}", self.total_epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "ascent_every = {}", self.ascent_every);
        let _ = writeln!(s, "lambda_reg = {}", self.lambda_reg);
        let _ = writeln!(s, "strategy = {}", self.strategy);
        let _ = writeln!(s, "\n[loss]\nalpha = {}\nbeta = {}", self.loss.alpha, self.loss.beta);
        let contrast: Vec<String> = self.bank.contrast.iter().map(|(f, g)| format!("{f}:{g}")).collect();
        let _ = writeln!(
            s,
            "\n[bank]\nstripe_amplitudes = {}\nlowres_scales = {}\ncontrast_levels = {}",
            join(&self.bank.stripe),
            join(&self.bank.lowres),
            contrast.join(", ")
        );
        let m = &self.model;
        let _ = writeln!(
            s,
            "\n[model]\nwidth = {}\ntime_steps = {}\ntau = {}\nv_th = {}\nsurrogate_width = {}",
            m.width, m.time_steps, m.tau, m.v_th, m.surrogate_width
        );
        s
    }
}

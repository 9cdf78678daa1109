use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sobolev_autodiff::{AutodiffError, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd_momentum() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::SgdMomentum { .. } => "sgd_momentum",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::adam()),
            "sgd_momentum" => Ok(Self::sgd_momentum()),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Step decay: the rate is multiplied by `decay_factor` every `decay_every` steps (0 disables).
    #[serde(default)]
    pub decay_every: usize,
    #[serde(default = "unit")]
    pub decay_factor: f64,
}

fn unit() -> f64 {
    1.0
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::adam(), learning_rate, decay_every: 0, decay_factor: 1.0 }
    }

    pub fn sgd_momentum(learning_rate: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::sgd_momentum(), learning_rate, decay_every: 0, decay_factor: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        Ok(())
    }

    pub fn with_step_decay(mut self, every: usize, factor: f64) -> Self {
        self.decay_every = every;
        self.decay_factor = factor;
        self
    }

    /// Learning rate used by the update numbered `step` (counting from 1).
    pub fn rate_at(&self, step: u64) -> f64 {
        if self.decay_every == 0 {
            return self.learning_rate;
        }
        let drops = (step.saturating_sub(1) / self.decay_every as u64).min(i32::MAX as u64) as i32;
        self.learning_rate * self.decay_factor.powi(drops)
    }
}

/// First-order optimizer with lazily allocated per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step_count: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState { config, step_count: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(AutodiffError::DimensionMismatch { expected: params.len(), got: grads.len() }.into());
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "optimizer_step",
                    left: p.shape(),
                    right: g.shape(),
                }
                .into());
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            if matches!(self.config.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::Config("parameter shapes changed between optimizer steps".into()));
        }

        self.step_count += 1;
        let lr = self.config.rate_at(self.step_count);
        match self.config.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    let (p, g, buf) = (p.data_mut(), g.data(), buf.data_mut());
                    for i in 0..p.len() {
                        buf[i] = momentum * buf[i] + g[i];
                        p[i] -= lr * buf[i];
                    }
                }
            }
        }
        Ok(())
    }
}

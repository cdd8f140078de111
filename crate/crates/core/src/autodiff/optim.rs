use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    RmsProp,
    SgdMomentum,
}

/// Optimizer hyperparameters, including the step-decay learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Multiplier applied once per `decay_period` epochs.
    pub decay: f64,
    pub decay_period: usize,
    /// RMSProp smoothing constant.
    pub rho: f64,
    /// RMSProp denominator offset.
    pub eps: f64,
    /// SGD momentum coefficient.
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::RmsProp,
            lr: 0.001,
            decay: 0.5,
            decay_period: 60,
            rho: 0.9,
            eps: 1e-8,
            momentum: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("optimizer lr must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("optimizer decay must lie in (0, 1]");
        }
        if self.decay_period == 0 {
            return bad("optimizer decay_period must be at least 1");
        }
        if !(0.0..1.0).contains(&self.rho) || !(0.0..1.0).contains(&self.momentum) {
            return bad("rho and momentum must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("optimizer eps must be positive");
        }
        Ok(())
    }

    /// `lr * decay^floor(epoch / decay_period)`.
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch / self.decay_period) as i32)
    }
}

/// Per-parameter accumulators for one group of parameters.
///
/// Accumulators are allocated on the first step and must keep matching the
/// parameter shapes afterwards.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    accumulators: Vec<Vec<f64>>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, accumulators: Vec::new(), steps: 0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.accumulators
    }

    pub fn effective_lr(&self, epoch: usize) -> f64 {
        self.config.effective_lr(epoch)
    }

    /// Applies one update to every parameter and clears their gradients.
    ///
    /// Nothing is modified unless every parameter carries a gradient.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor2)], epoch: usize) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::State(format!("parameter `{name}` has no gradient")));
        }
        if self.accumulators.is_empty() {
            self.accumulators = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        }
        if self.accumulators.len() != params.len()
            || self.accumulators.iter().zip(params.iter()).any(|(a, (_, p))| a.len() != p.len())
        {
            return Err(Error::State("optimizer accumulators do not match the parameter shapes".into()));
        }
        let lr = self.effective_lr(epoch);
        let cfg = &self.config;
        for (acc, (_, param)) in self.accumulators.iter_mut().zip(params.iter_mut()) {
            let grad = param.take_grad().expect("checked above");
            let values = param.values_mut();
            match cfg.kind {
                OptimizerKind::RmsProp => {
                    for ((p, a), g) in values.iter_mut().zip(acc.iter_mut()).zip(&grad) {
                        *a = cfg.rho * *a + (1.0 - cfg.rho) * g * g;
                        *p -= lr * g / (*a + cfg.eps).sqrt();
                    }
                }
                OptimizerKind::SgdMomentum => {
                    for ((p, v), g) in values.iter_mut().zip(acc.iter_mut()).zip(&grad) {
                        *v = cfg.momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}

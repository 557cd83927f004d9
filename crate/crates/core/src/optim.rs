use candle_core::{backprop::GradStore, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, SGD};
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moment estimation without weight decay.
    Adam,
    /// Plain gradient descent.
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => param(format!("unknown optimizer {other:?} (expected adam or sgd)")),
        }
    }
}

pub(crate) fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() })?)
}

pub enum Opt {
    Adam(AdamW),
    Sgd(SGD),
}

impl Opt {
    pub fn new(kind: OptimizerKind, vars: Vec<Var>, lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return param(format!("learning rate must be finite and non-negative, got {lr}"));
        }
        Ok(match kind {
            OptimizerKind::Adam => Self::Adam(adam(vars, lr)?),
            OptimizerKind::Sgd => Self::Sgd(SGD::new(vars, lr)?),
        })
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        match self {
            Self::Adam(o) => o.step(grads)?,
            Self::Sgd(o) => o.step(grads)?,
        }
        Ok(())
    }
}

/// Per-step scalar losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog(Vec<f64>);

impl LossLog {
    pub fn push(&mut self, v: f64) {
        self.0.push(v);
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Mean of the first `window` entries.
    pub fn head_mean(&self, window: usize) -> Option<f64> {
        mean(&self.0[..window.min(self.0.len())])
    }

    /// Mean of the last `window` entries.
    pub fn tail_mean(&self, window: usize) -> Option<f64> {
        mean(&self.0[self.0.len().saturating_sub(window)..])
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

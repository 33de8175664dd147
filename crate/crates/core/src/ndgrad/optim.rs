use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Learning-rate schedule evaluated at an optimizer step index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate at step 0 to 0 at `total`.
    Cosine { total: u64 },
    /// Multiply by 0.5 after every `every` steps.
    Halving { every: u64 },
}

impl Schedule {
    pub fn lr(&self, base: f64, step: u64) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Cosine { total } => {
                if total == 0 {
                    return base;
                }
                let t = step.min(total) as f64 / total as f64;
                let lr = 0.5 * base * (1.0 + (PI * t).cos());
                if step >= total {
                    0.0
                } else {
                    lr
                }
            }
            Schedule::Halving { every } => {
                if every == 0 {
                    return base;
                }
                base * 0.5f64.powi((step / every) as i32)
            }
        }
    }
}

/// Optimizer hyperparameters and per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64, schedule: Schedule) -> Self {
        Self::new(OptimizerKind::SgdMomentum { momentum }, lr, weight_decay, schedule)
    }

    pub fn adam(lr: f64, weight_decay: f64, schedule: Schedule) -> Self {
        Self::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay,
            schedule,
        )
    }

    pub fn new(kind: OptimizerKind, base_lr: f64, weight_decay: f64, schedule: Schedule) -> Self {
        Self {
            kind,
            base_lr,
            weight_decay,
            schedule,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`apply_step`](Self::apply_step) will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.base_lr, self.step)
    }

    /// Updates every trainable parameter in place and clears its gradient.
    ///
    /// SGD: `v <- momentum*v + g + wd*p; p <- p - lr*v`.
    /// Adam: bias-corrected moments over `g + wd*p`.
    pub fn apply_step(&mut self, params: &mut ParamSet) -> Result<()> {
        for (name, t) in params.iter() {
            if t.requires_grad && t.grad.is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let t_step = self.step as i32;
        for (name, t) in params.iter_mut() {
            if !t.requires_grad {
                continue;
            }
            let grad = t.grad.take().expect("checked above");
            let n = t.len();
            let first = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            if first.len() != n {
                return Err(Error::shape("apply_step", &[first.len()], &[n]));
            }
            let data = t.data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    for i in 0..n {
                        let g = grad[i] + self.weight_decay * data[i];
                        first[i] = momentum * first[i] + g;
                        data[i] -= lr * first[i];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let second = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                    let c1 = 1.0 - beta1.powi(t_step);
                    let c2 = 1.0 - beta2.powi(t_step);
                    for i in 0..n {
                        let g = grad[i] + self.weight_decay * data[i];
                        first[i] = beta1 * first[i] + (1.0 - beta1) * g;
                        second[i] = beta2 * second[i] + (1.0 - beta2) * g * g;
                        let mh = first[i] / c1;
                        let vh = second[i] / c2;
                        data[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

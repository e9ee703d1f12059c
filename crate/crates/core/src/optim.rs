//! Adam with bias correction, and the learning-rate schedules used by the
//! training loops.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Real> AdamState<F> {
    pub fn new(len: usize) -> Self {
        Self::with_hyper(len, F::lit(0.9), F::lit(0.999), F::lit(1e-8))
    }

    pub fn with_hyper(len: usize, beta1: F, beta2: F, eps: F) -> Self {
        Self { m: vec![F::zero(); len], v: vec![F::zero(); len], t: 0, beta1, beta2, eps }
    }

    pub fn for_tensor(t: &Tensor<F>) -> Self {
        Self::new(t.numel())
    }

    /// Applies one update to `values` given `grad`.
    pub fn update(&mut self, values: &mut [F], grad: &[F], lr: F) -> Result<()> {
        ensure!(
            values.len() == self.m.len() && grad.len() == self.m.len(),
            Shape,
            "adam state holds {} entries, param {} grad {}",
            self.m.len(),
            values.len(),
            grad.len()
        );
        self.t += 1;
        let t = self.t as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for i in 0..values.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (F::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (F::one() - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// One Adam step on `param` from its stored gradient. The gradient is left
/// in place; callers clear it.
pub fn adam_step<F: Real>(param: &mut Tensor<F>, state: &mut AdamState<F>, lr: F) -> Result<()> {
    let (values, grad) = param.values_and_grad_mut();
    let grad = grad.ok_or_else(|| Error::Precondition("adam step on a parameter without gradient".into()))?;
    state.update(values, grad, lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    Fixed,
    WarmupLinearDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_proportion: f64,
    pub total_steps: usize,
    pub mode: ScheduleMode,
}

impl LrSchedule {
    pub fn fixed(base_lr: f64) -> Self {
        Self { base_lr, warmup_proportion: 0.0, total_steps: 0, mode: ScheduleMode::Fixed }
    }

    pub fn warmup_linear(base_lr: f64, warmup_proportion: f64, total_steps: usize) -> Self {
        Self { base_lr, warmup_proportion, total_steps, mode: ScheduleMode::WarmupLinearDecay }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_lr >= 0.0 && self.base_lr.is_finite(), Config, "base_lr must be finite and >= 0");
        ensure!(
            (0.0..=1.0).contains(&self.warmup_proportion),
            Config,
            "warmup_proportion must lie in [0, 1], got {}",
            self.warmup_proportion
        );
        Ok(())
    }

    /// Learning rate for a 0-based step index. Clamps outside `[0, total]`.
    pub fn lr(&self, step: usize) -> f64 {
        match self.mode {
            ScheduleMode::Fixed => self.base_lr,
            ScheduleMode::WarmupLinearDecay => {
                let total = self.total_steps as f64;
                let warmup = self.warmup_proportion * total;
                let s = (step as f64).min(total);
                let lr = if s < warmup {
                    self.base_lr * s / warmup
                } else if total > warmup {
                    self.base_lr * (total - s) / (total - warmup)
                } else {
                    self.base_lr
                };
                lr.max(0.0)
            }
        }
    }
}

pub fn schedule_lr(sched: &LrSchedule, step: usize) -> f64 {
    sched.lr(step)
}

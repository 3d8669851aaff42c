//! AdamW with cosine annealing, and the EMA teacher update.

use std::f64::consts::PI;

use super::NetParams;
use crate::error::{Error, Result};

/// Adaptive-moment state with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates applied so far (drives bias correction).
    pub step: u64,
    /// Schedule position of this optimizer's first update.
    pub schedule_offset: u64,
    pub total_steps: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptState {
    pub fn new(len: usize, total_steps: u64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            schedule_offset: 0,
            total_steps: total_steps.max(1),
            base_lr: 5e-3,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Starts the cosine schedule at global step `offset`.
    pub fn starting_at(mut self, offset: u64) -> Self {
        self.schedule_offset = offset;
        self
    }

    /// Learning rate for the next update: cosine from `base_lr` toward 0.
    pub fn current_lr(&self) -> f64 {
        let t = (self.schedule_offset + self.step).min(self.total_steps) as f64;
        0.5 * self.base_lr * (1.0 + (PI * t / self.total_steps as f64).cos())
    }
}

/// One AdamW update. Non-finite gradients are refused without touching the
/// parameters or the optimizer state.
pub fn optimizer_step(params: &mut NetParams, grads: &[f64], opt: &mut OptState) -> Result<()> {
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer lengths: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            opt.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let lr = opt.current_lr();
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let (b1, b2, eps, wd) = (opt.beta1, opt.beta2, opt.eps, opt.weight_decay);
    let values = params.values_mut();
    for i in 0..values.len() {
        let g = grads[i];
        opt.m[i] = b1 * opt.m[i] + (1.0 - b1) * g;
        opt.v[i] = b2 * opt.v[i] + (1.0 - b2) * g * g;
        let m_hat = opt.m[i] / bc1;
        let v_hat = opt.v[i] / bc2;
        values[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * values[i]);
    }
    Ok(())
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`.
pub fn ema_update(teacher: &mut NetParams, student: &NetParams, alpha: f64) -> Result<()> {
    if teacher.config() != student.config() {
        return Err(Error::ShapeMismatch("EMA between different layouts".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("EMA alpha {alpha}")));
    }
    let beta = 1.0 - alpha;
    for (t, s) in teacher.values_mut().iter_mut().zip(student.values()) {
        *t = alpha * *t + beta * s;
    }
    Ok(())
}

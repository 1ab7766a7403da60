//! Adam with decoupled weight decay and the cosine one-cycle schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    /// Fraction of steps spent warming up.
    pub pct_start: f64,
    /// `lr(0) = max_lr / div_factor`.
    pub div_factor: f64,
    /// `lr(T - 1) = max_lr / final_div_factor`.
    pub final_div_factor: f64,
    pub base_momentum: f64,
    pub max_momentum: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 10_000.0,
            base_momentum: 0.85,
            max_momentum: 0.95,
        }
    }

    /// `(learning rate, momentum)` at `step`. The learning rate rises from
    /// `max_lr / 25` to `max_lr` at step `0.3 T` and anneals to
    /// `max_lr / 10000` at step `T - 1`; momentum moves the opposite way
    /// between 0.95 and 0.85. Steps past the end clamp to the final values.
    pub fn at(&self, step: usize) -> (f64, f64) {
        let initial = self.max_lr / self.div_factor;
        let last = self.max_lr / self.final_div_factor;
        let peak = self.pct_start * self.total_steps as f64;
        let end = self.total_steps.saturating_sub(1) as f64;
        let step = (step as f64).min(end);
        if step <= peak && peak > 0.0 {
            let pct = step / peak;
            (
                cos_anneal(initial, self.max_lr, pct),
                cos_anneal(self.max_momentum, self.base_momentum, pct),
            )
        } else {
            let span = end - peak;
            let pct = if span > 0.0 {
                (step - peak) / span
            } else {
                1.0
            };
            (
                cos_anneal(self.max_lr, last, pct),
                cos_anneal(self.base_momentum, self.max_momentum, pct),
            )
        }
    }
}

fn cos_anneal(start: f64, end: f64, pct: f64) -> f64 {
    end + (start - end) / 2.0 * (1.0 + (PI * pct).cos())
}

pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64) -> (f64, f64) {
    OneCycle::new(max_lr, total_steps).at(step)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Weight decay is decoupled
/// (`p -= lr * wd * p`) and applied only when `decay` is set, i.e. to
/// weights but not biases. `beta1` overrides the configured value when the
/// schedule cycles momentum.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
    beta1: Option<f64>,
    decay: bool,
) {
    assert_eq!(
        params.len(),
        grads.len(),
        "parameter/gradient length mismatch"
    );
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    let beta1 = beta1.unwrap_or(cfg.beta1);
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let shrink = if decay {
        1.0 - lr * cfg.weight_decay
    } else {
        1.0
    };
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *p *= shrink;
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

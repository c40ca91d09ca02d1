use crate::tensor::{Result, Tensor, TensorError};
use std::f64::consts::PI;

/// Adam with decoupled weight decay. `weight_decay` is the coefficient used
/// by the next step; training loops update it with [`cosine_decay`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Result<Self> {
        let s = Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() };
        s.validate()?;
        Ok(s)
    }

    /// lr = 0 is accepted so a loop can be run as a no-op control.
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument(format!("adam hyperparameters {self:?}")))
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores a state saved from `step` and `moments`.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(TensorError::InvalidArgument("moment arrays disagree".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Cosine schedule from `max` at epoch 0 down to 0 at `total`.
pub fn cosine_decay(max: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return max;
    }
    let frac = (epoch.min(total) as f64) / total as f64;
    0.5 * max * (1.0 + (PI * frac).cos())
}

/// One bias-corrected Adam update over `params`. Gradients are left in place.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Tensor]) -> Result<()> {
    state.validate()?;
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(TensorError::MissingGradient { index: i });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
        return Err(TensorError::InvalidArgument("parameter list changed between steps".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (lr, b1, b2, eps, wd) = (state.lr, state.beta1, state.beta2, state.eps, state.weight_decay);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad().expect("checked above").to_vec();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *x -= lr * (mh / (vh.sqrt() + eps) + wd * *x);
        }
    }
    Ok(())
}

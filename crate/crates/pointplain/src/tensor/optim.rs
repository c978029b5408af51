//! AdamW with decoupled weight decay, global gradient-norm clipping, and the
//! linear-warmup + cosine-annealing learning-rate schedule.

use std::collections::BTreeMap;

use super::store::ParameterStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct OptimizerState {
    /// First-moment estimates, keyed like the parameter store.
    m: BTreeMap<String, Vec<f64>>,
    /// Second-moment estimates.
    v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Global L2 gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(base_lr: f64) -> Self {
        OptimizerState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            base_lr,
            weight_decay: 0.01,
            clip_norm: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = clip;
        self
    }
}

/// Scales all gradients so their joint L2 norm does not exceed `clip`.
/// Identity when the norm is already within bounds or `clip` is 0. Returns
/// the pre-clip norm.
pub fn clip_grad_norm(store: &mut ParameterStore, clip: f64) -> Result<f64> {
    let mut sq = 0.0;
    for name in store.trainable_names() {
        let t = store.get(&name)?;
        let g = t
            .grad
            .as_ref()
            .ok_or_else(|| Error::MissingGrad(name.clone()))?;
        sq += g.iter().map(|&x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if clip > 0.0 && norm > clip {
        let s = clip / norm;
        for name in store.trainable_names() {
            let t = store.get_mut(&name)?;
            if let Some(g) = t.grad.as_mut() {
                for x in g.iter_mut() {
                    *x *= s;
                }
            }
        }
    }
    Ok(norm)
}

/// One AdamW step over every trainable parameter.
///
/// Order of operations: global norm clipping first, then moment updates with
/// bias correction, then the decoupled weight-decay term. Gradients must be
/// populated for every trainable parameter.
pub fn adamw_step(store: &mut ParameterStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::invalid(format!(
            "adamw_step: bad learning rate {lr}"
        )));
    }
    let names = store.trainable_names();
    for name in &names {
        if store.get(name)?.grad.is_none() {
            return Err(Error::MissingGrad(name.clone()));
        }
    }

    clip_grad_norm(store, state.clip_norm)?;

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for name in &names {
        let tensor = store.get_mut(name)?;
        let numel = tensor.numel();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; numel]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; numel]);
        if m.len() != numel || v.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: tensor.shape().to_vec(),
                rhs: vec![m.len()],
            });
        }
        let grad = tensor.grad.take().expect("checked above");
        let data = tensor.data_mut();
        for i in 0..numel {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let update = mhat / (vhat.sqrt() + state.epsilon) + state.weight_decay * data[i];
            data[i] -= lr * update;
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`. `step` is clamped into `[0, total_steps]`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    debug_assert!(warmup_steps < total_steps);
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

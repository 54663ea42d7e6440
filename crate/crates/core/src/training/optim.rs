use serde::{Deserialize, Serialize};

use crate::error::{NseError, Result};
use crate::numerics::{GradBuf, Gradients, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    #[default]
    GlobalNorm,
    Elementwise,
}

/// Rescales all gradients by `threshold / norm` when their joint L2 norm
/// exceeds `threshold`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(NseError::invalid(format!("clip threshold must be positive, got {threshold}")));
    }
    let norm = grads.global_norm();
    if norm > threshold {
        grads.scale(threshold / norm);
    }
    Ok(norm)
}

/// Clamps every gradient value to `[-threshold, threshold]`. Returns the
/// norm before clipping.
pub fn clip_elementwise(grads: &mut Gradients, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(NseError::invalid(format!("clip threshold must be positive, got {threshold}")));
    }
    let norm = grads.global_norm();
    grads.for_each_value_mut(|x| *x = x.clamp(-threshold, threshold));
    Ok(norm)
}

pub fn clip(grads: &mut Gradients, mode: ClipMode, threshold: f64) -> Result<f64> {
    match mode {
        ClipMode::GlobalNorm => clip_global_norm(grads, threshold),
        ClipMode::Elementwise => clip_elementwise(grads, threshold),
    }
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        OptimizerState {
            step: 0,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .all(|(id, _, t)| self.m[id.index()].len() == t.len() && self.v[id.index()].len() == t.len())
    }
}

fn check_grad_shape(buf: &GradBuf, len: usize, name: &str) -> Result<()> {
    let ok = match buf {
        GradBuf::Dense(v) => v.len() == len,
        GradBuf::Rows { width, rows } => *width > 0 && len % width == 0 && rows.keys().all(|r| (r + 1) * width <= len),
    };
    if ok {
        Ok(())
    } else {
        Err(NseError::invalid(format!("gradient for {name} does not match its parameter shape")))
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if grads.num_params() != store.len() || !state.matches(store) {
        return Err(NseError::invalid("gradients, optimizer state and parameters disagree in shape"));
    }
    for id in store.ids().collect::<Vec<_>>() {
        if let Some(buf) = grads.get(id) {
            check_grad_shape(buf, store.get(id).len(), store.name(id))?;
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for id in store.ids().collect::<Vec<_>>() {
        let len = store.get(id).len();
        let g = grads.dense(id, len);
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        let p = store.get_mut(id).data_mut();
        for i in 0..len {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

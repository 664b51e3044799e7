//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use super::params::ModelParams;
use crate::error::{Error, Result};

/// First/second moment estimates per parameter plus a global step counter.
/// Moment buffers are created lazily the first time a parameter is updated.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        AdamState {
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: BTreeMap::new(),
        }
    }
}

/// One Adam update over every trainable parameter. Every trainable entry
/// must carry a populated gradient; gradients are left untouched (the
/// caller zeros them).
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState) -> Result<()> {
    let names = params.trainable_names();
    adam_step_subset(params, state, &names)
}

/// Adam update restricted to `names`. Parameters outside the subset keep
/// their values and moment estimates; the step counter still advances once.
/// Used when part of the model was unreachable in a step (absent modality)
/// so that untouched encoders stay exactly frozen.
pub fn adam_step_subset(params: &mut ModelParams, state: &mut AdamState, names: &[String]) -> Result<()> {
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - (state.beta1 as f64).powf(t);
    let bc2 = 1.0 - (state.beta2 as f64).powf(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for name in names {
        let entry = params.get_mut(name)?;
        if !entry.trainable {
            return Err(Error::Contract(format!("adam_step over non-trainable parameter '{name}'")));
        }
        let numel = entry.tensor.numel();
        let grad = entry
            .tensor
            .grad
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("parameter '{name}' has no gradient")))?
            .clone();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; numel], vec![0.0; numel]));
        if m.len() != numel {
            return Err(Error::Contract(format!(
                "moment shape for '{name}' is {} but parameter has {numel} values",
                m.len()
            )));
        }
        let w = entry.tensor.data_mut();
        for i in 0..numel {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] as f64 / bc1;
            let vhat = v[i] as f64 / bc2;
            w[i] -= (state.lr as f64 * mhat / (vhat.sqrt() + state.eps as f64)) as f32;
        }
    }
    Ok(())
}

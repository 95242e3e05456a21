//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vl_core::nn::ParamStore;

use crate::error::{Result, TrainError};
use crate::groups::ParamGroup;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; None disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: Some(1.0) }
    }
}

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub hyper: OptimHyper,
    pub step: usize,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Biases and layer-norm parameters do not decay.
fn decays(path: &str) -> bool {
    !(path.ends_with(".b") || path.ends_with(".g"))
}

impl AdamW {
    pub fn new(store: &ParamStore, hyper: OptimHyper) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (path, p) in store.iter() {
            m.insert(path.clone(), vec![0.0; p.tensor.numel()]);
            v.insert(path.clone(), vec![0.0; p.tensor.numel()]);
        }
        AdamW { hyper, step: 0, m, v }
    }

    /// Applies one update from the gradients accumulated in the store,
    /// with the given per-group learning rates (parallel to `groups`).
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        groups: &[ParamGroup],
        lrs: &[f64],
    ) -> Result<()> {
        debug_assert_eq!(groups.len(), lrs.len());
        // global gradient norm for clipping
        let scale = if let Some(clip) = self.hyper.clip_norm {
            let mut sq = 0.0;
            for (_, p) in store.iter() {
                if let Some(g) = &p.tensor.grad {
                    sq += g.iter().map(|x| x * x).sum::<f64>();
                }
            }
            let norm = sq.sqrt();
            if norm > clip {
                clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.hyper.beta1, self.hyper.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (group, &lr) in groups.iter().zip(lrs) {
            for path in &group.paths {
                let param = store.get_mut(path);
                let Some(grad) = param.tensor.grad.clone() else {
                    continue;
                };
                let m = self.m.get_mut(path).expect("moment buffer exists");
                let v = self.v.get_mut(path).expect("moment buffer exists");
                let wd = if decays(path) { self.hyper.weight_decay } else { 0.0 };
                for i in 0..grad.len() {
                    let g = grad[i] * scale;
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    let p = &mut param.tensor.data[i];
                    *p -= lr * (mhat / (vhat.sqrt() + self.hyper.eps) + wd * *p);
                    if !p.is_finite() {
                        return Err(TrainError::NonFiniteLoss { batch_id: format!("update of {path}") });
                    }
                }
            }
        }
        Ok(())
    }
}

use std::ops::Range;

use super::{Gradients, NumericError, ParamId, ParamStore, Tensor};

/// Inverse-square-root schedule with linear warmup:
/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> Result<f64, NumericError> {
    if step == 0 || warmup == 0 {
        return Err(NumericError::InvalidStep { step, warmup });
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * f64::min(s.powf(-0.5), s * w.powf(-1.5)))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

/// Which entries of a parameter an update may touch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UpdateMask {
    Train,
    Frozen,
    /// Only the listed rows of a matrix.
    Rows(Range<usize>),
}

/// Adam moments plus the global step counter that drives the schedule.
///
/// Bias correction uses the number of updates each parameter actually
/// received, so a table that was frozen for a while starts from a fresh
/// correction when it is released.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub config: AdamConfig,
    pub d_model: usize,
    pub warmup_steps: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    updates: Vec<u64>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig, d_model: usize, warmup_steps: u64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            config,
            d_model,
            warmup_steps,
            second_moment: zeros.clone(),
            first_moment: zeros,
            updates: vec![0; store.len()],
        }
    }

    /// Schedule value for the next update.
    pub fn next_lr(&self) -> Result<f64, NumericError> {
        noam_lr(self.step + 1, self.d_model, self.warmup_steps)
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor {
        &self.first_moment[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor {
        &self.second_moment[id.index()]
    }

    /// One bias-corrected Adam update of every unmasked parameter.
    pub fn adam_step(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
        masks: &[UpdateMask],
    ) -> Result<(), NumericError> {
        if params.len() != self.first_moment.len() || masks.len() != params.len() {
            return Err(NumericError::LengthMismatch {
                op: "adam_step",
                expected: self.first_moment.len(),
                actual: params.len(),
            });
        }
        for id in params.ids() {
            let p = params.get(id);
            let g = grads.get(id);
            if p.shape() != g.shape() || p.shape() != self.first_moment[id.index()].shape() {
                return Err(NumericError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        for id in params.ids() {
            let i = id.index();
            let range = match &masks[i] {
                UpdateMask::Frozen => continue,
                UpdateMask::Train => 0..params.get(id).len(),
                UpdateMask::Rows(rows) => {
                    let c = params.get(id).cols();
                    rows.start * c..rows.end * c
                }
            };
            self.updates[i] += 1;
            let t = self.updates[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let g = &grads.get(id).data()[range.clone()];
            let m = &mut self.first_moment[i].data_mut()[range.clone()];
            let v = &mut self.second_moment[i].data_mut()[range.clone()];
            let p = &mut params.get_mut(id).data_mut()[range];
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

//! Decoupled-weight-decay Adam and the linear warmup/decay schedule.

use super::TrainError;
use crate::model::Param;
use crate::tensor::{Tape, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment state, one pair of buffers per parameter tensor.
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &[Param], weight_decay: f64) -> Self {
        AdamW {
            m: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            step: 0,
            weight_decay,
        }
    }

    /// One update over every parameter, reading gradients straight off the
    /// tape (missing gradients count as zero). `grad_scale` rescales
    /// gradients before the moment update (global-norm clipping).
    pub fn step_from_tape(
        &mut self,
        params: &mut [Param],
        tape: &Tape,
        mounted: &[Var],
        lr: f64,
        grad_scale: f64,
    ) -> Result<(), TrainError> {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for ((param, var), (m, v)) in params
            .iter_mut()
            .zip(mounted)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let grad = tape.grad(*var);
            if let Some(g) = grad {
                if g.iter().any(|g| !g.is_finite()) {
                    return Err(TrainError::NonFiniteGrad {
                        name: param.name.clone(),
                    });
                }
            }
            let theta = param.tensor.values_mut();
            let wd = self.weight_decay;
            match grad {
                Some(g) => {
                    for i in 0..theta.len() {
                        let g = g[i] * grad_scale;
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        theta[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * theta[i]);
                    }
                }
                // Nothing flowed here this step; moments still decay.
                None => {
                    for i in 0..theta.len() {
                        m[i] *= ADAM_BETA1;
                        v[i] *= ADAM_BETA2;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        theta[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * theta[i]);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over `warmup_steps`, then linear decay to zero
/// at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    base_lr * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64
}

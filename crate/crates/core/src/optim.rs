//! Optimizers and the learning-rate schedule.
//!
//! A parameter is updated only in steps where it actually received a
//! gradient; untouched parameters keep their bytes (sampled training
//! relies on this). Moment state is stored f32, update arithmetic runs
//! in f64, and each slot keeps its own step count for bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    SgdMomentum,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adamw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Cosine
    }
}

/// Learning rate at `step` of `total_steps`.
pub fn lr_at(schedule: Schedule, base: f64, step: u64, total_steps: u64) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let t = (step as f64 / total_steps.max(1) as f64).min(1.0);
            base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SGD_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
struct Slot {
    t: u64,
    m: Vec<f32>,
    v: Vec<f32>, // unused for SGD
}

pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    slots: Vec<Slot>,
}

impl Optimizer {
    /// Slots align with the parameter list order; the same order must be
    /// used for every later call.
    pub fn new(kind: OptimizerKind, weight_decay: f64, params: &[(String, Tensor)]) -> Optimizer {
        let slots = params
            .iter()
            .map(|(_, p)| Slot {
                t: 0,
                m: vec![0.0; p.numel()],
                v: match kind {
                    OptimizerKind::Adamw => vec![0.0; p.numel()],
                    OptimizerKind::SgdMomentum => Vec::new(),
                },
            })
            .collect();
        Optimizer { kind, weight_decay, slots }
    }

    /// Apply one update using each parameter's accumulated gradient, then
    /// leave the gradients in place (the caller clears them).
    pub fn step(
        &mut self,
        params: &[(String, Tensor)],
        lr: f64,
        grad_clip: Option<f64>,
    ) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(Error::Usage(format!(
                "optimizer has {} slots but was given {} parameters",
                self.slots.len(),
                params.len()
            )));
        }
        let scale = match grad_clip {
            Some(max_norm) => {
                let mut sq = 0f64;
                for (_, p) in params {
                    if let Some(g) = p.grad() {
                        for v in g {
                            sq += v as f64 * v as f64;
                        }
                    }
                }
                let norm = sq.sqrt();
                if norm > max_norm { max_norm / norm } else { 1.0 }
            }
            None => 1.0,
        };
        for (slot, (_, p)) in self.slots.iter_mut().zip(params) {
            let Some(grad) = p.grad() else { continue };
            slot.t += 1;
            let mut data = p.to_vec();
            match self.kind {
                OptimizerKind::Adamw => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(slot.t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(slot.t as i32);
                    for i in 0..data.len() {
                        let g = grad[i] as f64 * scale;
                        let m = ADAM_BETA1 * slot.m[i] as f64 + (1.0 - ADAM_BETA1) * g;
                        let v = ADAM_BETA2 * slot.v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
                        slot.m[i] = m as f32;
                        slot.v[i] = v as f32;
                        let m_hat = m / bc1;
                        let v_hat = v / bc2;
                        let theta = data[i] as f64;
                        data[i] = (theta
                            - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)
                            - lr * self.weight_decay * theta) as f32;
                    }
                }
                OptimizerKind::SgdMomentum => {
                    for i in 0..data.len() {
                        let g = grad[i] as f64 * scale + self.weight_decay * data[i] as f64;
                        let vel = SGD_MOMENTUM * slot.m[i] as f64 + g;
                        slot.m[i] = vel as f32;
                        data[i] = (data[i] as f64 - lr * vel) as f32;
                    }
                }
            }
            p.set_data(data)?;
        }
        Ok(())
    }

    pub fn slot_steps(&self) -> Vec<u64> {
        self.slots.iter().map(|s| s.t).collect()
    }

    /// Moment state as named tensors for checkpointing, aligned with the
    /// parameter list.
    pub fn state_tensors(&self, params: &[(String, Tensor)]) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for (slot, (name, p)) in self.slots.iter().zip(params) {
            out.push((format!("optim.m.{name}"), p.shape(), slot.m.clone()));
            if self.kind == OptimizerKind::Adamw {
                out.push((format!("optim.v.{name}"), p.shape(), slot.v.clone()));
            }
        }
        out
    }

    pub fn restore(
        &mut self,
        slot_steps: &[u64],
        mut lookup: impl FnMut(&str) -> Result<Vec<f32>>,
        params: &[(String, Tensor)],
    ) -> Result<()> {
        if slot_steps.len() != self.slots.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint has {} optimizer slots, model needs {}",
                slot_steps.len(),
                self.slots.len()
            )));
        }
        for ((slot, &t), (name, p)) in self.slots.iter_mut().zip(slot_steps).zip(params) {
            slot.t = t;
            let m = lookup(&format!("optim.m.{name}"))?;
            if m.len() != p.numel() {
                return Err(Error::Corrupt(format!("optimizer state size mismatch for {name}")));
            }
            slot.m = m;
            if self.kind == OptimizerKind::Adamw {
                let v = lookup(&format!("optim.v.{name}"))?;
                if v.len() != p.numel() {
                    return Err(Error::Corrupt(format!("optimizer state size mismatch for {name}")));
                }
                slot.v = v;
            }
        }
        Ok(())
    }
}

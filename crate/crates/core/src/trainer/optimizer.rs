//! Gradient application. Only tensors that received a gradient in the
//! current batch are stepped, so untouched partitions stay bitwise
//! unchanged; with adaptive moments each tensor keeps its own step counter
//! for bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradStore, ParameterStore};

use super::TrainingConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Optimizer {
    pub fn validate(&self) -> Result<()> {
        if let Optimizer::Adam { beta1, beta2, epsilon } = self {
            if !(0.0..1.0).contains(beta1) || !(0.0..1.0).contains(beta2) || !(*epsilon > 0.0) {
                return Err(Error::Config(format!(
                    "bad adam parameters ({beta1}, {beta2}, {epsilon})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Per-tensor optimizer accumulators, keyed like the parameter store.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    slots: BTreeMap<String, AdamSlot>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(
        &mut self,
        store: &mut ParameterStore,
        grads: &GradStore,
        config: &TrainingConfig,
    ) -> Result<()> {
        let lr = config.learning_rate;
        for (name, g) in grads.iter() {
            let tensor = store.get_mut(name)?;
            match config.optimizer {
                Optimizer::Sgd => {
                    for (p, gi) in tensor.data.iter_mut().zip(g) {
                        *p -= lr * gi;
                    }
                }
                Optimizer::Adam { beta1, beta2, epsilon } => {
                    let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                        step: 0,
                    });
                    slot.step += 1;
                    let bc1 = 1.0 - beta1.powi(slot.step as i32);
                    let bc2 = 1.0 - beta2.powi(slot.step as i32);
                    for ((p, gi), (m, v)) in tensor
                        .data
                        .iter_mut()
                        .zip(g)
                        .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
                    {
                        *m = beta1 * *m + (1.0 - beta1) * gi;
                        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

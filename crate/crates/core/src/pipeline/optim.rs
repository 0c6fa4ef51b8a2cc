//! Nadam and the plateau learning-rate / early-stopping schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{OptimizerState, ParameterStore};
use crate::nn::Tensor;

/// Adam with Nesterov momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct Nadam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimizerState,
}

impl Nadam {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros = || -> BTreeMap<String, Tensor> {
            store.iter().map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape()))).collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: OptimizerState {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    pub fn from_state(state: OptimizerState) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state,
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c1_next, c2) = (1.0 - b1.powi(t), 1.0 - b1.powi(t + 1), 1.0 - b2.powi(t));
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            let m = self.state.m.get_mut(name).expect("moments follow parameters");
            let v = self.state.v.get_mut(name).expect("moments follow parameters");
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient shape for {name}")));
            }
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gv = gv as f64;
                let mn = b1 * *mv as f64 + (1.0 - b1) * gv;
                let vn = b2 * *vv as f64 + (1.0 - b2) * gv * gv;
                *mv = mn as f32;
                *vv = vn as f32;
                let m_hat = b1 * mn / c1_next + (1.0 - b1) * gv / c1;
                let v_hat = vn / c2;
                *pv = (*pv as f64 - lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }
}

/// What the schedule decided after one validation result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleEvent {
    pub improved: bool,
    /// Learning rate was multiplied by the factor at this epoch.
    pub reduced: bool,
    pub stop: bool,
    pub learning_rate: f64,
}

/// Reduce-on-plateau plus early stopping, both counting epochs without a
/// strict improvement of the validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub patience: usize,
    pub stop_patience: usize,
    pub learning_rate: f64,
    pub best: Option<f64>,
    /// Stagnant epochs since the last improvement or reduction.
    pub wait: usize,
    /// Stagnant epochs since the last improvement.
    pub stale: usize,
}

impl PlateauSchedule {
    pub fn new(learning_rate: f64, factor: f64, patience: usize, stop_patience: usize) -> Self {
        Self {
            factor,
            patience,
            stop_patience,
            learning_rate,
            best: None,
            wait: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> ScheduleEvent {
        let improved = self.best.is_none_or(|b| val_loss < b);
        let mut reduced = false;
        if improved {
            self.best = Some(val_loss);
            self.wait = 0;
            self.stale = 0;
        } else {
            self.wait += 1;
            self.stale += 1;
            if self.wait >= self.patience {
                self.learning_rate *= self.factor;
                self.wait = 0;
                reduced = true;
            }
        }
        ScheduleEvent {
            improved,
            reduced,
            stop: self.stale >= self.stop_patience,
            learning_rate: self.learning_rate,
        }
    }
}

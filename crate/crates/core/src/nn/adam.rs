//! Adam optimizer with per-name first and second moment state.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::nn::param::HasParams;
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. Parameters without a gradient entry are
    /// left untouched and do not advance their moment state.
    pub fn step(&mut self, model: &mut dyn HasParams, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let t = self.t as f64;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let mut err: Option<CoreError> = None;

        model.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            let Some(g) = grads.get(&p.name) else {
                return;
            };
            if g.shape() != p.value.shape() {
                err = Some(CoreError::ShapeMismatch(format!(
                    "adam: gradient shape {:?} vs parameter {:?} for {}",
                    g.shape(),
                    p.value.shape(),
                    p.name
                )));
                return;
            }
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            let vals = p.value.data_mut();
            for i in 0..vals.len() {
                let gi = g.data()[i];
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                vals[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

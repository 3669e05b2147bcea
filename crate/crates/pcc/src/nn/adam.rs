//! Adam optimizer over a [`ParamSet`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with per-parameter first/second moment estimates and bias correction.
/// The learning rate is passed per step so schedules live in the caller.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Moment estimates, for checkpointing: (first, second).
    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    /// Rebuild an optimizer mid-run from checkpointed state.
    pub fn from_state(
        config: AdamConfig,
        step: u64,
        m: BTreeMap<String, Tensor>,
        v: BTreeMap<String, Tensor>,
    ) -> Self {
        Adam { config, step, m, v }
    }

    /// Apply one update. `grads` must hold a gradient for every parameter
    /// it names; parameters without a gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        for (name, grad) in grads.iter() {
            let param = params.get_mut(name);
            assert_eq!(
                param.shape(),
                grad.shape(),
                "gradient shape mismatch for {name}"
            );
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.rows(), grad.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.rows(), grad.cols()));

            let pd = param.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let g = grad.data()[i] + c.weight_decay * pd[i];
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * g;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * g * g;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

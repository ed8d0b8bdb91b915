use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a fixed group of parameters.
///
/// Frozen parameters (`requires_grad == false`) are skipped and keep their
/// moments untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    params: Vec<ParamId>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: Vec<ParamId>, store: &ParamStore) -> Self {
        let zeros = |id: &ParamId| vec![0.0; store.get(*id).len()];
        Self {
            config,
            step_count: 0,
            first_moment: params.iter().map(zeros).collect(),
            second_moment: params.iter().map(zeros).collect(),
            params,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update and clears the group's gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for &id in &self.params {
            let t = store.get(id);
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::contract(format!(
                    "adam_step: parameter `{}` has no gradient",
                    store.name(id)
                )));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step_count as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (k, &id) in self.params.iter().enumerate() {
            let p = store.get_mut(id);
            if !p.requires_grad() {
                continue;
            }
            let g = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first_moment[k], &mut self.second_moment[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }

    /// Moment buffers as `(name, m, v)` for persistence.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(k, &id)| {
                (
                    store.name(id).to_string(),
                    self.first_moment[k].clone(),
                    self.second_moment[k].clone(),
                )
            })
            .collect()
    }

    pub fn import(
        &mut self,
        store: &ParamStore,
        moments: &[(String, Vec<f64>, Vec<f64>)],
    ) -> Result<()> {
        for (name, m, v) in moments {
            let k = self
                .params
                .iter()
                .position(|&id| store.name(id) == name)
                .ok_or_else(|| Error::contract(format!("optimizer has no parameter `{name}`")))?;
            if m.len() != self.first_moment[k].len() || v.len() != self.second_moment[k].len() {
                return Err(Error::dim(
                    "adam_import",
                    &[m.len()],
                    &[self.first_moment[k].len()],
                ));
            }
            self.first_moment[k].clone_from(m);
            self.second_moment[k].clone_from(v);
        }
        Ok(())
    }
}

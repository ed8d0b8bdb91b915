use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// Named trainable tensors of one model.
///
/// Every mutation bumps `version`, which caches derived from parameter values
/// (e.g. precomputed search embeddings) use to detect staleness.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            tensor: tensor.with_requires_grad(true),
        });
        self.version += 1;
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.version += 1;
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.name(id).starts_with(prefix))
            .collect()
    }

    /// Toggles `requires_grad` on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, on: bool) {
        for e in self
            .entries
            .iter_mut()
            .filter(|e| e.name.starts_with(prefix))
        {
            e.tensor.set_requires_grad(on);
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Adds the gradients of every bound, trainable parameter.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.param_grads() {
            let t = &mut self.entries[id.0].tensor;
            if t.requires_grad() {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Overwrites values from `other`, matching entries by name and shape.
    pub fn load_from(&mut self, other: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        for (name, shape, data) in other {
            let id = self
                .find(name)
                .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
            let t = self.get_mut(id);
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("load_params", t.shape(), shape));
            }
            t.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    /// Copies every parameter under `prefix` from `other` (same names and
    /// shapes required); returns how many were copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let src: Vec<_> = other
            .entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| {
                (
                    e.name.clone(),
                    e.tensor.shape().to_vec(),
                    e.tensor.data().to_vec(),
                )
            })
            .collect();
        if src.is_empty() {
            return Err(Error::contract(format!(
                "no parameters under `{prefix}` to copy"
            )));
        }
        self.load_from(&src)?;
        Ok(src.len())
    }

    pub fn export(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.entries
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    e.tensor.shape().to_vec(),
                    e.tensor.data().to_vec(),
                )
            })
            .collect()
    }
}

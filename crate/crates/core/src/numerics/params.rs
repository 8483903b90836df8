use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a parameter registered in a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    value: Arc<Tensor>,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Per-parameter gradient slots. `None` marks a slot that was never zeroed
/// nor reached by a backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradBuffer {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradBuffer {
    /// Zero-filled buffer matching the store's parameter shapes.
    pub fn zeros_like(store: &ParameterStore) -> Self {
        GradBuffer {
            slots: store.params.iter().map(|p| Some(vec![0.0; p.value.numel()])).collect(),
        }
    }

    pub fn empty(len: usize) -> Self {
        GradBuffer { slots: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(slot) => {
                for (s, g) in slot.iter_mut().zip(grad) {
                    *s += g;
                }
            }
            empty => *empty = Some(grad.to_vec()),
        }
    }

    /// Adds every populated slot of `other` into `self`.
    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (i, slot) in other.slots.iter().enumerate() {
            if let Some(g) = slot {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn slots(&self) -> &[Option<Vec<f64>>] {
        &self.slots
    }
}

/// All trainable weights, addressed by id or by name, with one gradient
/// slot per parameter.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
    grads: GradBuffer,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
        });
        self.grads.slots.push(None);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    /// Mutable access to a parameter's values. Copies the buffer if a live
    /// graph still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn grads(&self) -> &GradBuffer {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut GradBuffer {
        &mut self.grads
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id)
    }

    pub fn zero_grad(&mut self) {
        self.grads = GradBuffer::zeros_like(self);
    }

    /// Drops all gradient slots back to the unpopulated state.
    pub fn clear_grad(&mut self) {
        self.grads = GradBuffer::empty(self.params.len());
    }
}

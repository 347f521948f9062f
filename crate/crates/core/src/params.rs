use crate::autodiff::{Tape, VarId};
use crate::error::Error;
use crate::tensor::Tensor;
use crate::Result;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// One named learnable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Vec<f64>,
}

/// Ordered collection of every learnable tensor of a model.
///
/// Order is construction order and is load-bearing: checkpoints, Adam state
/// and gradient harvesting all walk entries by index.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let grad = vec![0.0; tensor.numel()];
        self.entries.push(ParamEntry { name, tensor, grad });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Register every entry as a leaf on `tape`; result is indexable by
    /// [`ParamId`].
    pub fn bind(&self, tape: &mut Tape) -> Vec<VarId> {
        self.entries
            .iter()
            .map(|e| tape.leaf(e.tensor.clone()))
            .collect()
    }

    /// Add the gradients a finished backward pass left on `tape` into the
    /// store's accumulators. Entries the tape never touched contribute
    /// nothing.
    pub fn harvest(&mut self, tape: &Tape, binding: &[VarId]) {
        debug_assert_eq!(binding.len(), self.entries.len());
        for (entry, &id) in self.entries.iter_mut().zip(binding) {
            if let Some(g) = tape.grad(id) {
                for (acc, gv) in entry.grad.iter_mut().zip(g) {
                    *acc += gv;
                }
            }
        }
    }
}

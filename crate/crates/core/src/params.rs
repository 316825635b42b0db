//! Named parameter storage.
//!
//! Every model parameter lives in a flat [`ParamSet`] arena under a unique
//! dotted name; layers hold [`ParamId`] indices. The arena is the single
//! source of truth for serialization, optimization, and quantization.

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// What a parameter is, which decides whether post-training quantization
/// may convert it to i8 (conv/linear weights) or must keep it float
/// (biases, norms, state-matrix logs).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    Norm,
    Other,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Default, Clone)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, tensor, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn dtype(&self) -> DType {
        self.entries
            .first()
            .map(|e| e.tensor.dtype())
            .unwrap_or(DType::F64)
    }

    /// Replace a parameter's values, keeping shape.
    pub fn set_values(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::NamedTensor(format!("unknown parameter {name}")))?;
        let t = self.get_mut(id);
        if t.len() != values.len() {
            return Err(Error::NamedTensor(format!(
                "parameter {name} has {} values, got {}",
                t.len(),
                values.len()
            )));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }
}

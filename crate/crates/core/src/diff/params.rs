use crate::diff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Non-trainable state such as batchnorm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered collection of named tensors; ids index registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Parameter { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn trainable(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.register(name, ParamKind::Trainable, value)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.register(name, ParamKind::Buffer, value)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(i, _)| ParamId(i))
    }

    pub fn entries(&self) -> &[Parameter] {
        &self.entries
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Replaces every value with the same-named entry of `other`, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for entry in &mut self.entries {
            let src = other
                .find(&entry.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", entry.name)))?;
            if src.value.shape() != entry.value.shape() || src.kind != entry.kind {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    entry.name,
                    src.value.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = src.value.clone();
        }
        Ok(())
    }
}

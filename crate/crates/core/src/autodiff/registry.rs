use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;

use super::scalar::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter store. Iteration order is insertion order, which fixes
/// the order of every downstream traversal (serialization, optimizer steps,
/// gradient reduction), so results are reproducible run to run.
#[derive(Debug, Default, Clone)]
pub struct ParamRegistry {
    entries: IndexMap<String, Tensor>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Shape(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Accumulates a gradient batch into the tensors' grad buffers.
    pub fn accumulate_grads(&mut self, grads: &[(String, Vec<f32>)]) -> Result<()> {
        for (name, g) in grads {
            self.get_mut(name)?.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    /// Immutable value snapshot shared across the graphs of one step.
    pub fn snapshot<T: Real>(&self) -> Arc<ParamSnapshot<T>> {
        let mut map = HashMap::with_capacity(self.entries.len());
        for (name, tensor) in &self.entries {
            let data: Arc<[T]> = tensor.data().iter().map(|&v| T::from_f32(v)).collect();
            map.insert(name.clone(), SnapshotEntry { shape: tensor.shape().to_vec(), data });
        }
        Arc::new(ParamSnapshot { map })
    }
}

#[derive(Debug, Clone)]
pub struct SnapshotEntry<T> {
    pub shape: Vec<usize>,
    pub data: Arc<[T]>,
}

/// Read-only parameter values captured from a registry. Graphs reference the
/// shared buffers instead of copying per graph.
#[derive(Debug)]
pub struct ParamSnapshot<T> {
    map: HashMap<String, SnapshotEntry<T>>,
}

impl<T: Real> ParamSnapshot<T> {
    pub fn empty() -> Arc<Self> {
        Arc::new(ParamSnapshot { map: HashMap::new() })
    }

    pub fn get(&self, name: &str) -> Result<&SnapshotEntry<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name:?}")))
    }

    /// Copy with one coordinate nudged; used by finite-difference probing.
    pub fn with_perturbed(&self, name: &str, index: usize, delta: T) -> Result<Self> {
        let entry = self.get(name)?;
        if index >= entry.data.len() {
            return Err(Error::Shape(format!(
                "coordinate {index} out of range for {name:?} ({} values)",
                entry.data.len()
            )));
        }
        let mut map = self.map.clone();
        let mut data: Vec<T> = entry.data.to_vec();
        data[index] += delta;
        map.insert(
            name.to_string(),
            SnapshotEntry { shape: entry.shape.clone(), data: data.into() },
        );
        Ok(ParamSnapshot { map })
    }
}

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::{MathError, Result, Tensor};

static NEXT_STORE_TAG: AtomicU64 = AtomicU64::new(1);

fn fresh_tag() -> u64 {
    NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
///
/// Every store carries a process-unique tag so that gradients recorded on a
/// graph can be routed back to the right store even when a graph reads
/// parameters from several stores. Cloning a store yields an independent
/// copy with a new tag.
#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            tag: fresh_tag(),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            tag: fresh_tag(),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub(crate) fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// `self ← (1 − rate)·self + rate·other`, the exponential moving
    /// average used for target networks.
    pub fn blend_from(&mut self, other: &ParamStore, rate: f64) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = (1.0 - rate) * *d + rate * s;
            }
        }
        Ok(())
    }

    /// Replaces values from `(name, tensor)` records, matching by name.
    /// Every parameter must be present with the exact same shape.
    pub fn load_records(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        if records.len() != self.values.len() {
            return Err(MathError::Checkpoint(format!(
                "expected {} records, found {}",
                self.values.len(),
                records.len()
            )));
        }
        for (name, tensor) in records {
            let idx = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| MathError::Checkpoint(format!("unknown parameter `{name}`")))?;
            if self.values[idx].shape() != tensor.shape() {
                return Err(MathError::ShapeMismatch {
                    op: "load_records",
                    left: self.values[idx].shape().to_vec(),
                    right: tensor.shape().to_vec(),
                });
            }
            self.values[idx] = tensor;
        }
        Ok(())
    }

    /// Bitwise equality of names, shapes and values.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(MathError::InvalidArgument {
                op: "param layout",
                reason: format!("{} vs {} parameters", self.values.len(), other.values.len()),
            });
        }
        for (a, b) in self.values.iter().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(MathError::ShapeMismatch {
                    op: "param layout",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

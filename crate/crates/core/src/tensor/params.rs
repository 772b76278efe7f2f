//! Named parameter store shared by the encoder, reasoner, and optimizer.
//!
//! Registration order is the canonical order for checkpoint serialization and
//! gradient layout, so model construction must register parameters in a fixed
//! sequence.

use std::collections::HashMap;

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter '{name}' registered twice"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.to_string(), id.0);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(self.tensors.iter())
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Concatenate all parameter values in registration order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_values());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrite all parameter values from a flat buffer in registration order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_values() {
            return Err(Error::Incompatible(format!(
                "flat parameter buffer has {} values, store holds {}",
                flat.len(),
                self.total_values()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Per-parameter gradients produced by one backward pass, aligned with a
/// `ParamStore`. Parameters not reached by the loss hold `None`, read as zero.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub(crate) by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Gradients {
            by_param: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param[id.0].as_ref()
    }

    /// Gradient tensor for a parameter, materializing zeros if unreached.
    pub fn get_or_zeros(&self, store: &ParamStore, id: ParamId) -> Tensor {
        match &self.by_param[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros_like(store.get(id)),
        }
    }

    /// Overwrite one parameter's gradient entry.
    pub fn set(&mut self, id: ParamId, t: Tensor) {
        self.by_param[id.0] = Some(t);
    }

    /// self += other, elementwise per parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (dst, src) in self.by_param.iter_mut().zip(other.by_param.iter()) {
            if let Some(s) = src {
                match dst {
                    Some(d) => {
                        for (a, b) in d.data_mut().iter_mut().zip(s.data().iter()) {
                            *a += b;
                        }
                    }
                    None => *dst = Some(s.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.by_param.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn has_non_finite(&self) -> Option<usize> {
        for (i, g) in self.by_param.iter().enumerate() {
            if let Some(t) = g {
                if !t.all_finite() {
                    return Some(i);
                }
            }
        }
        None
    }
}

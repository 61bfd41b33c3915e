//! Named, ordered parameter storage.
//!
//! Parameters live outside the per-pass tape. Each forward pass clones
//! values onto a fresh graph as leaves tagged with their `ParamId`; after
//! backward, `accumulate` folds the leaf gradients back into the store.
//! Gradient lifecycle: `None` until something accumulates, then `Some`
//! until `sgd_step` consumes it and resets to `None`. A step with any
//! missing gradient is an error, so a forgotten backward cannot silently
//! train a subset of the model.

use alloc::string::String;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::num;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.id(name).is_some() {
            return Err(Error::Parameter(alloc::format!(
                "duplicate parameter name {name}"
            )));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: None,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Overwrite a parameter's value; the shape must match.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape != value.shape {
            return Err(Error::Parameter(alloc::format!(
                "{}: shape {:?} cannot replace {:?}",
                e.name,
                value.shape,
                e.value.shape
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Direct mutable access, used by finite-difference probes.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Put a parameter's current value on the tape.
    pub fn on_graph(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(self.entries[id.0].value.clone(), id)
    }

    /// Fold one backward pass's leaf gradients into the store.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Grads) {
        for (var, id) in graph.param_leaves() {
            let Some(dg) = grads.get(var) else { continue };
            let entry = &mut self.entries[id.0];
            let buf = entry
                .grad
                .get_or_insert_with(|| vec![0.0; entry.value.len()]);
            for (b, &v) in buf.iter_mut().zip(dg) {
                *b += v;
            }
        }
    }

    /// p <- p - lr * (grad + weight_decay * p), then clear all gradients.
    pub fn sgd_step(&mut self, lr: f64, weight_decay: f64) -> Result<()> {
        for e in &self.entries {
            if e.grad.is_none() {
                return Err(Error::Parameter(alloc::format!(
                    "sgd_step: no gradient accumulated for {}",
                    e.name
                )));
            }
        }
        for e in &mut self.entries {
            let grad = e.grad.take().unwrap();
            for (p, gv) in e.value.data.iter_mut().zip(&grad) {
                *p -= lr * (gv + weight_decay * *p);
                }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }
}

/// He-normal init: N(0, sqrt(2 / fan_in)). Used for conv kernels feeding
/// rectifiers.
pub fn he_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = num::sqrt(2.0 / fan_in as f64);
    let data = (0..shape.iter().product())
        .map(|_| rng.normal_scaled(std))
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Xavier-normal init: N(0, sqrt(2 / (fan_in + fan_out))). Used for linear
/// maps.
pub fn xavier_normal(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let std = num::sqrt(2.0 / (fan_in + fan_out) as f64);
    let data = (0..shape.iter().product())
        .map(|_| rng.normal_scaled(std))
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// N(0, 0.02), the usual scale for class and position embeddings.
pub fn normal_002(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let data = (0..shape.iter().product())
        .map(|_| rng.normal_scaled(0.02))
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

//! Named parameter storage: master copies of trainable tensors plus
//! non-trainable buffers (batch-norm running statistics). Each training step
//! copies parameters onto a fresh tape as gradient-requiring leaves.

use alloc::string::String;
use alloc::vec::Vec;

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{shape_err, Tape, TensorError, Var};

#[derive(Clone)]
pub struct ParamEntry<S> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<S>,
    pub trainable: bool,
}

/// Ordered collection of named tensors; iteration order is insertion order,
/// which keeps optimizer updates and checkpoints deterministic.
#[derive(Clone, Default)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, dims: &[usize], data: Vec<S>, trainable: bool) {
        debug_assert!(self.index_of(name).is_none(), "duplicate parameter {name}");
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.entries.push(ParamEntry {
            name: String::from(name),
            dims: dims.to_vec(),
            data,
            trainable,
        });
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<S>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<S>> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    /// Total trainable element count.
    pub fn total_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.data.len()).sum()
    }

    /// Trainable element count grouped by the prefix before the first dot.
    pub fn breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for e in self.entries.iter().filter(|e| e.trainable) {
            let prefix = e.name.split('.').next().unwrap_or(&e.name);
            match groups.iter_mut().find(|(g, _)| g == prefix) {
                Some((_, n)) => *n += e.data.len(),
                None => groups.push((String::from(prefix), e.data.len())),
            }
        }
        groups
    }

    /// Insert every trainable parameter as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Result<BoundParams, TensorError> {
        let mut vars = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.trainable {
                vars.push(Some(tape.leaf(e.data.clone(), &e.dims, true)?));
            } else {
                vars.push(None);
            }
        }
        Ok(BoundParams { vars })
    }

    /// Convert every buffer to another precision (used by the 64-bit check mode).
    pub fn convert<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    dims: e.dims.clone(),
                    data: e.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// Tape handles for one binding of a [`ParamStore`]; indices parallel the
/// store's entry order.
pub struct BoundParams {
    vars: Vec<Option<Var>>,
}

impl BoundParams {
    pub fn var<S: Scalar>(&self, store: &ParamStore<S>, name: &str) -> Result<Var, TensorError> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| shape_err!("unknown parameter {name}"))?;
        self.vars[idx].ok_or_else(|| shape_err!("parameter {name} is not trainable"))
    }

    /// Gradients per trainable entry after `backward`, in store order.
    pub fn gradients<S: Scalar>(&self, tape: &Tape<S>) -> Vec<Option<Vec<S>>> {
        self.vars
            .iter()
            .map(|v| v.map(|var| tape.grad(var).expect("gradient after backward").to_vec()))
            .collect()
    }
}

/// Uniform Kaiming-style fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform_fanin<S: Scalar>(rng: &mut Rng, n: usize, fan_in: usize) -> Vec<S> {
    use num_traits::Float;
    let bound = 1.0 / Float::sqrt(fan_in as f64);
    (0..n).map(|_| S::from_f64(rng.uniform(-bound, bound))).collect()
}

/// Standard normal scaled by `std`; used for capsule vote transforms.
pub fn init_normal<S: Scalar>(rng: &mut Rng, n: usize, std: f64) -> Vec<S> {
    (0..n).map(|_| S::from_f64(rng.normal() * std)).collect()
}

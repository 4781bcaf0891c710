//! Named learnable tensors with per-tensor freeze flags.

use alloc::{string::String, vec::Vec};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Ordered collection of parameters. Order is insertion order and is what
/// optimizer state and checkpoints are keyed on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape handles for every parameter of a store, index-aligned with it.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if let Some(p) = self.params.iter_mut().find(|p| p.name == name) {
            p.value = value;
        } else {
            self.params.push(Param { name, value, frozen: false });
        }
    }

    /// Uniform Kaiming-style weight `[fan_in, fan_out]` in `±sqrt(6 / fan_in)`.
    pub fn init_weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let bound = crate::math::sqrt(6.0 / fan_in as f64);
        let w = Tensor::from_fn([fan_in, fan_out], |_| rng::uniform_range(rng, -bound, bound));
        self.insert(name, w);
    }

    pub fn init_const(&mut self, name: impl Into<String>, len: usize, value: f64) {
        self.insert(name, Tensor::from_fn([len], |_| value));
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn contains_prefix(&self, prefix: &str) -> bool {
        self.params.iter().any(|p| p.name.starts_with(prefix))
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies every parameter onto `tape`; frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone(), !p.frozen)).collect(),
        }
    }

    /// Appends every parameter of `other`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamStore) {
        for p in other.params {
            match self.params.iter_mut().find(|q| q.name == p.name) {
                Some(q) => *q = p,
                None => self.params.push(p),
            }
        }
    }

    /// Gradients read back from `tape`, index-aligned with the store.
    /// Frozen or unreached parameters get zeros.
    pub fn gradients(&self, tape: &Tape, bound: &Bound) -> Gradients {
        Gradients {
            values: self
                .params
                .iter()
                .zip(&bound.vars)
                .map(|(p, &v)| match tape.grad(v) {
                    Some(g) if !p.frozen => g.to_vec(),
                    _ => alloc::vec![0.0; p.value.len()],
                })
                .collect(),
        }
    }

    /// Order-sensitive 64-bit FNV-1a digest of names and value bits under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            p.name.bytes().for_each(&mut eat);
            for v in p.value.data() {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

impl Bound {
    /// Binding over variables the caller already placed on a tape, one per
    /// store entry in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, store: &ParamStore, name: &str) -> Result<Var> {
        store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::MissingParam(name.into()))
    }
}

/// Per-parameter gradient buffers, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { values: store.iter().map(|p| alloc::vec![0.0; p.value.len()]).collect() }
    }

    /// Adds `other` in place. Reduction order is the caller's.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

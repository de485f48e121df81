//! Named parameter storage and the per-forward [`Session`] that binds
//! parameters onto a tape.

use std::ops::{Deref, DerefMut};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn add_randn(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>, std: f64, rng: &mut Rng) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::DimMismatch {
                op: "ParamStore::set",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces all values at once; shapes must match one for one.
    pub fn replace_all(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameters, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (i, v) in values.into_iter().enumerate() {
            self.set(ParamId(i), v)?;
        }
        Ok(())
    }
}

/// One forward pass over a parameter store. Parameters are copied onto the
/// tape the first time they are used, so every use of a parameter shares a
/// single leaf and its gradient accumulates there.
pub struct Session<'t, 'p, T> {
    tape: &'t mut Tape<T>,
    store: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'t, 'p, T: Scalar> Session<'t, 'p, T> {
    pub fn new(tape: &'t mut Tape<T>, store: &'p ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
        }
    }

    /// Session whose parameters are already on the tape as `leaves`, one per
    /// store entry in order. Used by gradient checking.
    pub fn with_leaves(tape: &'t mut Tape<T>, store: &'p ParamStore<T>, leaves: &[Var]) -> Result<Self> {
        if leaves.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} leaves for {} parameters",
                leaves.len(),
                store.len()
            )));
        }
        Ok(Self {
            tape,
            store,
            bound: leaves.iter().copied().map(Some).collect(),
        })
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    /// Gradient per parameter, aligned with the store; zeros for parameters
    /// this pass never touched.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.bound
            .iter()
            .zip(self.store.values())
            .map(|(b, v)| match b {
                Some(var) => grads.get(*var),
                None => Tensor::zeros(v.shape().to_vec()),
            })
            .collect()
    }
}

impl<T> Deref for Session<'_, '_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        self.tape
    }
}

impl<T> DerefMut for Session<'_, '_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        self.tape
    }
}

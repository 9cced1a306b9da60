use std::ops::{Deref, DerefMut};

use super::{Gradients, Scalar, Tape, TensorBase, Var};
use crate::error::{bail, Result};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<TensorBase<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: TensorBase<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &TensorBase<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut TensorBase<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorBase<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut TensorBase<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(TensorBase::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(TensorBase::zero_grad);
    }

    /// Adds per-parameter gradients (as returned by [`Graph::param_grads`]).
    pub fn accumulate(&mut self, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != self.tensors.len() {
            bail!(
                State,
                "gradient list of length {} for {} parameters",
                grads.len(),
                self.tensors.len()
            );
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if let Some(g) = g {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_same_layout(&self, other: &Self) -> Result<()> {
        if self.names != other.names {
            bail!(State, "parameter trees differ in names or order");
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                bail!(
                    State,
                    "parameter {name} has shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                );
            }
        }
        Ok(())
    }

    /// Same names with new values; shapes must match.
    pub fn with_values(&self, values: &[TensorBase<T>]) -> Result<Self> {
        if values.len() != self.tensors.len() {
            bail!(State, "{} values for {} parameters", values.len(), self.tensors.len());
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(values)) {
            if a.shape() != b.shape() {
                bail!(State, "parameter {name} has shape {:?} vs {:?}", a.shape(), b.shape());
            }
        }
        Ok(Self {
            names: self.names.clone(),
            tensors: values.iter().map(|t| t.clone().with_requires_grad(true)).collect(),
        })
    }

    pub fn values(&self) -> Vec<TensorBase<T>> {
        self.tensors.clone()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.cast::<U>().with_requires_grad(true))
                .collect(),
        }
    }
}

/// A tape bound to a parameter set. Parameters are registered lazily and at
/// most once per pass; frozen graphs record them as untracked leaves.
pub struct Graph<'a, T: Scalar> {
    tape: Tape<'a, T>,
    params: &'a ParamSet<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(params: &'a ParamSet<T>, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.borrowed(self.params.get(id), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn params(&self) -> &'a ParamSet<T> {
        self.params
    }

    /// Gradient of every parameter touched by the pass, in parameter order.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Vec<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

impl<'a, T: Scalar> Deref for Graph<'a, T> {
    type Target = Tape<'a, T>;

    fn deref(&self) -> &Self::Target {
        &self.tape
    }
}

impl<T: Scalar> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.tape
    }
}

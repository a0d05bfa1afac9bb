//! Dense arrays with tape-based reverse-mode differentiation.
//!
//! Learned tensors live in a [`ParamSet`]. A [`Graph`] borrows the set,
//! records every operation applied to it, and [`Graph::backward`] writes
//! the gradient of a scalar loss into a [`Gradients`] buffer aligned with
//! the set. Parameters are never copied onto the tape, so one set can
//! back many graphs (one per training instance, or one per thread during
//! inference).
//!
//! Everything is generic over [`Real`] so the same model code runs in
//! single precision for training and in double precision for gradient
//! checking.

mod check;
mod graph;
mod optim;

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use check::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::{Graph, Var, NLL_FLOOR};
pub use optim::{clip_global_norm, Adam, AdamConfig};

/// Floating point element type of tensors.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: row {row} has every entry masked")]
    AllMasked { op: &'static str, row: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// A dense row-major array. Rank 0 (scalar), 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.len() > 2 {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(x: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], range: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.gen_range(-range..=range)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum()
    }
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of gradient-tracked leaf tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor. Panics on duplicate names, which would be a
    /// layout bug rather than a runtime condition.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        let id = ParamId(self.tensors.len());
        let previous = self.by_name.insert(name.clone(), id);
        assert!(previous.is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Gradient buffers aligned one-to-one with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            grads: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.grads.iter_mut()
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(T::zero()));
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x = *x * factor);
        }
    }

    /// Global L2 norm across every buffer, accumulated in double precision.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(Tensor::squared_norm)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .all(|g| g.data().iter().all(|x| x.is_finite()))
    }
}

impl<T: Real> FromIterator<Tensor<T>> for Gradients<T> {
    fn from_iter<I: IntoIterator<Item = Tensor<T>>>(iter: I) -> Self {
        Self {
            grads: iter.into_iter().collect(),
        }
    }
}

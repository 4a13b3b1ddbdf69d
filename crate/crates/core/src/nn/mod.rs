//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The engine is deliberately small: vectors and matrices only, no
//! broadcasting, one sequence at a time. Models bind their parameters onto a
//! [`Tape`], build the forward graph with tape methods, and call
//! [`Tape::backward`] to accumulate gradients into a [`ParamStore`].

mod adam;
mod checkpoint;
mod layers;
mod tape;

pub use adam::Adam;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use layers::{BiGru, BoundBiGru, BoundGru, BoundLinear, BoundLstm, GruCell, Linear, LstmCell, StackedLstm};
pub use tape::{softmax, Tape, Var};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NnError {
    NnError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameters with gradient accumulators of matching shape.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Adds a parameter drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-s..=s)).collect();
        self.add(
            name,
            Tensor {
                shape: shape.to_vec(),
                data,
            },
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub(crate) fn values_and_grads(&mut self) -> (&mut [Tensor], &[Tensor]) {
        (&mut self.values, &self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Multiplies every accumulated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Adds another store's gradients (same layout) into this one.
    pub fn add_grads_from(&mut self, other: &ParamStore) {
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            g.data.iter_mut().zip(&o.data).for_each(|(a, b)| *a += b);
        }
    }

    /// Flat copy of all parameter values, in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in &mut self.values {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Sets every parameter to zero.
    pub fn zero_values(&mut self) {
        self.values.iter_mut().for_each(|t| t.fill(0.0));
    }

    /// Copies values by name from `other`; every parameter here must exist there
    /// with the same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let src = other
                .id(name)
                .ok_or_else(|| NnError::UnknownParam(name.clone()))?;
            let src = other.value(src);
            if src.shape != self.values[i].shape {
                return Err(shape_err(
                    "load",
                    format!("{name}: {:?} vs {:?}", src.shape, self.values[i].shape),
                ));
            }
            self.values[i].data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

//! Dense row-major tensors and the reverse-mode differentiation graph.
//!
//! A [`Tensor`] is a plain value: shape plus a flat `f64` buffer. It carries
//! no graph machinery of its own, so it is cheap to move between threads.
//! All differentiable computation happens on a [`Graph`], a per-forward-pass
//! tape that records operations and replays them in reverse for gradients.

mod graph;

pub use graph::{Graph, NodeId};

use crate::error::{Error, Result};
use rand::Rng;

/// Product of a shape's dimensions.
pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn all_finite(data: &[f64]) -> bool {
    data.iter().all(|v| v.is_finite())
}

/// Dense N-dimensional array of `f64`, row-major.
///
/// Invariants maintained by the constructors: `data.len()` equals the shape
/// product, every dimension is positive, and every stored value is finite.
/// `data_mut` exposes the buffer for in-place parameter updates; it cannot
/// change the length, and the optimizer re-checks finiteness on its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Whether gradients should flow to this tensor when it is used as a
    /// graph leaf.
    pub requires_grad: bool,
    /// Populated from a graph after `backward`, same layout as `data`.
    pub grad: Option<Vec<f64>>,
    /// Handle of the leaf node this tensor was last bound to, if any.
    pub node_id: Option<NodeId>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if data.len() != numel_of(shape) {
            return Err(Error::dim(
                "tensor",
                format!("data length {} does not match shape {:?}", data.len(), shape),
            ));
        }
        if !all_finite(&data) {
            return Err(Error::numeric("tensor", "non-finite value in constructor"));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
            node_id: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel_of(shape)],
            requires_grad: false,
            grad: None,
            node_id: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Tensor::new(vec![value; numel_of(shape)], shape)
    }

    /// Rank-1 tensor holding a single value.
    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![value], &[1])
    }

    /// Uniform random values in `[lo, hi)`, consuming `numel` draws from `rng`.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
            node_id: None,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }
}

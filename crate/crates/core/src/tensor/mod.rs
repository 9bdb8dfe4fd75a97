//! Dense f64 tensors with a define-by-run reverse-mode tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append nodes in execution order, so the record is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.

mod gradcheck;
pub(crate) mod kernels;
mod rng;
mod tape;

pub use gradcheck::{finite_difference_check, relative_error, DEFAULT_FD_EPS};
pub use rng::{mix64, CounterRng};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Input(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = if std == 0.0 {
            vec![0.0; numel]
        } else {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..numel).map(|_| normal.sample(rng)).collect()
        };
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self
            .shape
            .last()
            .expect("tensors have at least one dimension")
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows of the tensor viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.last_dim())
    }

    /// Copy with the two trailing axes exchanged.
    pub fn transposed(&self) -> Self {
        let r = self.ndim();
        if r < 2 {
            return self.detached();
        }
        let (data, shape) = kernels::swap_axes(&self.data, &self.shape, r - 2, r - 1);
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same tensor without autograd state.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Numerically stable softmax over the trailing dimension of a value tensor.
pub fn softmax_last_dim(x: &Tensor) -> Tensor {
    let mut out = x.detached();
    let n = x.last_dim();
    for row in out.data.chunks_exact_mut(n) {
        kernels::softmax_in_place(row);
    }
    out
}

/// Plain-value matrix product with the same broadcasting rules as
/// [`Tape::matmul`].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let av = tape.constant(a.detached());
    let bv = tape.constant(b.detached());
    let c = tape.matmul(av, bv)?;
    Ok(tape.take_value(c))
}

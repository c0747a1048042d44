//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Graph`] records every primitive as it executes. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns a [`Gradients`] set, which can then be accumulated into the
//! [`ParamStore`] the graph was reading from.
//!
//! ```
//! use mimn_core::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.input(Tensor::from_vec(vec![3.0], &[1]).unwrap(), true);
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.input_grad(x).unwrap(), &[6.0]);
//! ```

mod graph;
mod params;
mod wide;

pub use graph::{Activation, BackwardFault, Gradients, Graph, OpKind, ReduceKind, Var};
pub use params::{ParamId, ParamStore};

use std::fmt::{Debug, Display};

use num_traits::{Float, NumCast, ToPrimitive};
use twofloat::TwoFloat;

use crate::error::{Error, Result};

/// Floating point element type. Training runs in `f32`; gradient checks in `f64`.
pub trait Scalar: Float + ToPrimitive + Debug + Display + Send + Sync + 'static {
    const NAME: &'static str;

    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    // The graph calls these rather than `Float`'s and `/`, so a wide type can
    // bring its own, as accurate as the rest of its arithmetic.
    fn exp(self) -> Self {
        Float::exp(self)
    }

    fn ln(self) -> Self {
        Float::ln(self)
    }

    fn tanh(self) -> Self {
        Float::tanh(self)
    }

    fn div(self, rhs: Self) -> Self {
        self / rhs
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Double-double, for finite differences below the f64 rounding floor.
impl Scalar for TwoFloat {
    const NAME: &'static str = "f64x2";

    fn exp(self) -> Self {
        wide::exp(self)
    }

    fn ln(self) -> Self {
        wide::ln(self)
    }

    fn tanh(self) -> Self {
        wide::tanh(self)
    }

    fn div(self, rhs: Self) -> Self {
        wide::div(self, rhs)
    }
}

/// A dense tensor with optional gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(vec![F::zero(); numel], shape).expect("zeros with positive extents")
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(vec![value; numel], shape).expect("full with positive extents")
    }

    pub fn scalar(value: F) -> Self {
        Self::from_vec(vec![value], &[1]).expect("scalar")
    }

    /// Builds a `rows × cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::from_vec(rows.concat(), &[rows.len(), cols])
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Resets the gradient buffer to zeros (only for tensors that require grad).
    pub fn zero_grad(&mut self) {
        if self.requires_grad {
            match &mut self.grad {
                Some(g) => g.iter_mut().for_each(|v| *v = F::zero()),
                None => self.grad = Some(vec![F::zero(); self.data.len()]),
            }
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it if needed.
    pub fn accumulate_grad(&mut self, delta: &[F]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        let grad = self.grad.get_or_insert_with(|| vec![F::zero(); delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at row `r`, column `c` of a rank-2 tensor.
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.shape[1] + c]
    }

    /// Converts the element type, keeping shape and grad flag.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.to_f64_lossy())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

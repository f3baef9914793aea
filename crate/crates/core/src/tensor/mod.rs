//! Dense tensors, trainable parameters, and the autodiff graph.
//!
//! [`Tensor`] is a dense row-major array of `f32` or `f64`. [`Graph`] is a
//! tape of operations built during a forward pass; calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every bound [`Param`]. The element type is generic so the same
//! code path trains in `f32` and gradient-checks in `f64`.

mod adam;
mod graph;
pub(crate) mod kernels;

pub use adam::AdamState;
pub use graph::{Graph, Mode, NodeId};

use std::cell::{Ref, RefCell, RefMut};
use std::fmt::{Debug, Display};
use std::rc::Rc;

use crate::error::{Error, Result};

/// Element types the engine can compute with.
///
/// Implemented for `f32` (training) and `f64` (gradient checking, PCA).
/// The `gemm` hook dispatches to an architecture-optimized matrix multiply
/// kernel for each width.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    /// `C = alpha * A·B + beta * C` with explicit element strides.
    ///
    /// `A` is `m x k` with strides `(rsa, csa)`, `B` is `k x n` with strides
    /// `(rsb, csb)`, `C` is `m x n` with strides `(rsc, csc)`.
    ///
    /// # Safety
    /// Every index reachable from the given dimensions and strides must be
    /// in bounds for the corresponding allocation, and `C` must not alias
    /// `A` or `B`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense row-major tensor.
///
/// Invariant: `data.len() == shape.iter().product()`, and `grad` is
/// `Some` exactly when `requires_grad` is true (same length as `data`).
/// A zero-rank shape (`[]`) denotes a scalar with one element.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from a shape and matching flat data.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "tensor data has {} elements but shape {:?} implies {}",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel], requires_grad: false, grad: None }
    }

    /// Zero-rank scalar tensor.
    pub fn scalar(v: T) -> Self {
        Tensor { shape: Vec::new(), data: vec![v], requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a zero-rank (or single-element) tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!("item() on tensor with {} elements", self.data.len())))
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turn gradient tracking on, allocating a zeroed accumulator.
    pub fn enable_grad(&mut self) {
        if !self.requires_grad {
            self.requires_grad = true;
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Add `delta` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        let g = self.grad.as_mut().ok_or_else(|| {
            Error::Invariant("gradient accumulated into tensor without requires_grad".into())
        })?;
        if g.len() != delta.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match tensor length {}",
                delta.len(),
                g.len()
            )));
        }
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Reinterpret the flat data under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({})",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        })
    }

    /// Convert elementwise to another scalar width.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|v| U::from_f64(v.as_f64())).collect();
        Tensor { shape: self.shape.clone(), data, requires_grad: false, grad: None }
    }
}

/// A trainable parameter: a shared, mutable tensor with `requires_grad` set.
///
/// Cloning a `Param` clones the handle, not the storage; the same parameter
/// can be bound into many graphs and receives accumulated gradients from
/// each backward pass until [`Param::zero_grad`] is called.
#[derive(Clone, Debug)]
pub struct Param<T>(Rc<RefCell<Tensor<T>>>);

impl<T: Scalar> Param<T> {
    pub fn new(mut t: Tensor<T>) -> Self {
        t.enable_grad();
        Param(Rc::new(RefCell::new(t)))
    }

    pub fn borrow(&self) -> Ref<'_, Tensor<T>> {
        self.0.borrow()
    }

    pub fn borrow_mut(&self) -> RefMut<'_, Tensor<T>> {
        self.0.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().numel()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().zero_grad();
    }

    /// True when both handles refer to the same storage.
    pub fn same_storage(&self, other: &Param<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// Running batch-norm statistics (one entry per channel), kept outside the
/// graph because they persist across steps. Moments are accumulated in f64
/// regardless of the compute width.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    /// Number of training batches folded in (0 means "fresh": running
    /// statistics are still the init values of mean 0, var 1).
    pub batches_seen: u64,
}

impl BnState {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
            batches_seen: 0,
        }
    }
}

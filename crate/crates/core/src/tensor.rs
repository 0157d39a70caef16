//! Dense N-D tensor with optional gradient accumulator.
//!
//! Feature maps use channels-first layout `[C, H, W]`, convolution kernels
//! `[Cout, Cin, kh, kw]`, per-channel biases `[C]`, scalars `[1]`. Values
//! produced by an op are immutable; only parameter tensors (created with
//! [`Tensor::param`]) are updated in place by the optimizer between passes.
//! Training and inference run in `f32`; `f64` exists for gradient and
//! oracle verification.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

/// Element type of a tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub type TensorId = u64;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> TensorId {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

struct Inner<T> {
    id: TensorId,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: Mutex<Option<Vec<T>>>,
    requires_grad: bool,
}

/// Cheaply clonable handle to shared tensor storage.
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, param={})",
            self.inner.id,
            self.inner.shape,
            self.inner.requires_grad
        )
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero extent in {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} wants {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad,
            }),
        })
    }

    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::build(shape.to_vec(), data, false)
    }

    /// Leaf tensor that accumulates gradients (a learnable parameter).
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::build(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![T::zero(); n], false).expect("valid shape")
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![v; n], false).expect("valid shape")
    }

    pub fn scalar(v: T) -> Self {
        Self::full(&[1], v)
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // zero extents are rejected at construction
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Interpret the shape as `[C, H, W]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(
                "tensor",
                format!("expected [C,H,W], got {:?}", self.shape()),
            )),
        }
    }

    /// Interpret the shape as `[Cout, Cin, kh, kw]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [o, i, kh, kw] => Ok((o, i, kh, kw)),
            _ => Err(Error::invalid(
                "tensor",
                format!("expected [Cout,Cin,kh,kw], got {:?}", self.shape()),
            )),
        }
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.inner.data.read().expect("tensor lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    /// Value of a `[1]` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1);
        self.data()[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// In-place update of the stored values; used by the optimizer and by
    /// finite-difference probes. The shape is fixed.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        let mut guard = self.inner.data.write().expect("tensor lock poisoned");
        f(&mut guard);
    }

    pub fn accumulate_grad(&self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.len());
        let mut guard = self.inner.grad.lock().expect("grad lock poisoned");
        match guard.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *guard = Some(delta.to_vec()),
        }
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Copy into the other element type (verification helper).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::from_f64(v.to_f64())).collect();
        Tensor::build(self.shape().to_vec(), data, self.requires_grad()).expect("same shape")
    }
}

/// Max-abs difference between two same-shaped tensors (test/report helper).
pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let t = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 1.0]);
        t.accumulate_grad(&[0.5, -1.0]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 0.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn update_data_keeps_shape() {
        let t = Tensor::<f32>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        t.update_data(|d| d.iter_mut().for_each(|v| *v *= 2.0));
        assert_eq!(t.to_vec(), vec![2.0, 4.0, 6.0]);
        assert_eq!(t.shape(), &[3]);
    }
}

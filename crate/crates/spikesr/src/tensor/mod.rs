//! Dense tensors with reverse-mode differentiation.
//!
//! Tensors are plain row-major buffers of up to five axes. The convention
//! throughout the crate is (T, B, C, H, W) for spike sequences and
//! (B, C, H, W) for single-step feature maps; time is handled by slicing the
//! leading axis so the spatial kernels stay 4-D.
//!
//! Differentiation is tape-style: a [`Graph`] records every operation whose
//! inputs carry gradient, and [`Graph::backward`] replays the tape in reverse.
//! In inference mode nothing is recorded and intermediate buffers are freed by
//! ordinary scoping.

mod graph;
mod kernels;

pub use graph::{Grads, Graph, Var};
pub use kernels::Padding;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type for all tensor math: f64 in test/check mode, f32 in training.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an f64 constant into the active element type.
#[inline]
pub fn num<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("constant not representable")
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape {:?} -> {:?}: element count differs", self.shape, shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Expect exactly two axes.
    pub fn d2(&self) -> (usize, usize) {
        assert_eq!(self.rank(), 2, "expected rank-2 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn d3(&self) -> (usize, usize, usize) {
        assert_eq!(self.rank(), 3, "expected rank-3 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn d4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.rank(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn d5(&self) -> (usize, usize, usize, usize, usize) {
        assert_eq!(self.rank(), 5, "expected rank-5 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3], self.shape[4])
    }

    /// Lossy conversion to f32 (checkpoint storage format).
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Tensor::new(shape, data.iter().map(|&x| num::<T>(x as f64)).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_agree() {
        let t = Tensor::<f64>::new(&[2, 3], vec![1.0; 6]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn length_mismatch_panics() {
        let _ = Tensor::<f64>::new(&[2, 3], vec![1.0; 5]);
    }

    #[test]
    fn reshape_preserves_count() {
        let t = Tensor::<f64>::from_fn(&[2, 6], |i| i as f64).reshaped(&[3, 4]);
        assert_eq!(t.shape(), &[3, 4]);
        assert_eq!(t.data()[11], 11.0);
    }
}

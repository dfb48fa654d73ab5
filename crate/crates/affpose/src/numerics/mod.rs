//! Dense-array numerics with reverse-mode differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` for production models,
//! `f64` for gradient checking). Arrays are row-major and dense; the
//! compute graph in [`graph`] records operations for reverse-mode
//! gradient accumulation into a [`ParamStore`].

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod params;
pub mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, FdReport};
pub use graph::{Graph, VarId};
pub use params::{init_linear, ParamStore};

use crate::error::{Error, Result};

/// Floating-point element type for arrays and graphs.
///
/// `f32` is the production type; `f64` backs gradient checking so that
/// finite-difference noise stays well below the comparison tolerance.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn into_f32(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x
    }
    #[inline]
    fn into_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn into_f32(self) -> f32 {
        self as f32
    }
}

/// Row-major 2-D dense array.
///
/// All graph values are 2-D; vectors are `1 x d` or `n x 1`, scalars are
/// `1 x 1`. Shape is `(rows, cols)` and the data length always equals
/// `rows * cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseArray<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> DenseArray<S> {
    /// Build from explicit data; errors if the length does not match.
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "DenseArray::new",
                format!("{rows}x{cols} needs {} elems, got {}", rows * cols, data.len()),
            ));
        }
        Ok(DenseArray { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseArray {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: S) -> Self {
        DenseArray {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// A `1 x 1` array.
    pub fn scalar(value: S) -> Self {
        DenseArray {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// A `1 x d` row vector.
    pub fn row(values: &[S]) -> Self {
        DenseArray {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row_slice(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single element of a `1 x 1` array.
    pub fn item(&self) -> Result<S> {
        if self.rows * self.cols != 1 {
            return Err(Error::shape(
                "DenseArray::item",
                format!("expected 1x1, got {}x{}", self.rows, self.cols),
            ));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast elementwise to another scalar type through `f64`.
    pub fn cast<T: Scalar>(&self) -> DenseArray<T> {
        DenseArray {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64(v.into_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_array_shape_checked() {
        assert!(DenseArray::<f32>::new(2, 3, vec![0.0; 6]).is_ok());
        assert!(DenseArray::<f32>::new(2, 3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn dense_array_accessors() {
        let mut a = DenseArray::<f64>::zeros(2, 2);
        a.set(1, 0, 3.5);
        assert_eq!(a.get(1, 0), 3.5);
        assert_eq!(a.row_slice(1), &[3.5, 0.0]);
        assert!(a.all_finite());
        a.set(0, 1, f64::NAN);
        assert!(!a.all_finite());
    }

    #[test]
    fn scalar_item() {
        assert_eq!(DenseArray::scalar(2.0f32).item().unwrap(), 2.0);
        assert!(DenseArray::<f32>::zeros(1, 2).item().is_err());
    }
}

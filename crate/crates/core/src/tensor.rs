//! Dense rank-4 tensors in row-major NCHW layout.
//!
//! Everything in the crate moves activations and gradients around as a
//! [`Tensor`]. The element type is generic so the verification harnesses can
//! run the exact same kernels in double precision; training uses `f32`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Scalar type usable for tensor storage.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every Real")
    }
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    dims: [usize; 4],
    data: Vec<T>,
}

fn element_count(dims: [usize; 4]) -> Result<usize> {
    if dims.contains(&0) {
        return Err(Error::InvalidDims(dims));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= isize::MAX as usize / std::mem::size_of::<f64>())
        .ok_or(Error::InvalidDims(dims))
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        let len = element_count(dims)?;
        Ok(Self {
            dims,
            data: vec![T::zero(); len],
        })
    }

    pub fn filled(dims: [usize; 4], value: T) -> Result<Self> {
        let len = element_count(dims)?;
        Ok(Self {
            dims,
            data: vec![value; len],
        })
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected = element_count(dims)?;
        if data.len() != expected {
            return Err(Error::DataLength {
                dims,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        let [n, c, h, w] = dims;
        let mut i = 0;
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[i] = f(b, ch, y, x);
                        i += 1;
                    }
                }
            }
        }
        Ok(t)
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Elements in one `(H, W)` plane.
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    /// Elements in one sample (`C * H * W`).
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.plane_len()
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, h, w] = self.dims;
        ((n * cs + c) * h + y) * w + x
    }

    /// Inverse of [`Tensor::offset`].
    pub fn index_of(&self, offset: usize) -> [usize; 4] {
        let [_, c, h, w] = self.dims;
        let x = offset % w;
        let y = (offset / w) % h;
        let ch = (offset / (w * h)) % c;
        let n = offset / (w * h * c);
        [n, ch, y, x]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let start = self.offset(n, c, 0, 0);
        &self.data[start..start + self.plane_len()]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let start = self.offset(n, c, 0, 0);
        let len = self.plane_len();
        &mut self.data[start..start + len]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    /// Copies the listed samples into a new batch.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidDims([0, self.dims[1], self.dims[2], self.dims[3]]));
        }
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.batch() {
                return Err(Error::Shape(format!("sample {i} out of range for batch {}", self.batch())));
            }
            data.extend_from_slice(self.sample(i));
        }
        Self::from_vec([indices.len(), self.dims[1], self.dims[2], self.dims[3]], data)
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(&self, other: &Self) -> Result<Self> {
        if self.dims[1..] != other.dims[1..] {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                self.dims, other.dims
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::from_vec([self.dims[0] + other.dims[0], self.dims[1], self.dims[2], self.dims[3]], data)
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

pub fn elementwise_relu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given the forward input.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.dims(), data).expect("same dims as input")
}

/// Per-`(n, c)` sum over the spatial plane, returned as `[n][c]`.
pub fn reduce_sum_spatial<T: Real>(t: &Tensor<T>) -> Vec<Vec<T>> {
    (0..t.batch())
        .map(|n| (0..t.channels()).map(|c| t.plane(n, c).iter().copied().sum()).collect())
        .collect()
}

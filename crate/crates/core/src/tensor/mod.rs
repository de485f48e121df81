//! Dense row-major tensors and the forward kernels every other module is
//! built from. Tensors are immutable values once constructed; all shape
//! operations copy.

mod blob;
mod kernels;
mod scalar;

pub use blob::{read_blob, write_blob, BLOB_MAGIC, BLOB_VERSION};
pub use kernels::{broadcast_shape, sum_to_shape, EPS};
pub(crate) use kernels::{
    bce_backward, conv2d_backward, dynamic_filter_backward, l2_normalize_backward,
    layer_norm_backward, masked_max, softmax_backward, upsample2x_backward,
};
pub use scalar::{DType, Scalar};

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::trace;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        validate_shape("from_vec", &shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {shape:?} holds {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self::raw(shape, data))
    }

    /// Construction without validation; callers guarantee the invariants.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(!shape.is_empty());
        trace::note(&shape);
        Self { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        validate_shape("full", &shape).expect("positive extents");
        let n = shape.iter().product();
        Self::raw(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::raw(vec![1], vec![value])
    }

    /// Builds a tensor from a function of the multi-index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> T) -> Self {
        let shape = shape.into();
        validate_shape("from_fn", &shape).expect("positive extents");
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            advance(&mut idx, &shape);
        }
        Self::raw(shape, data)
    }

    /// Gaussian draws with the given standard deviation.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut Rng) -> Self {
        let shape = shape.into();
        validate_shape("randn", &shape).expect("positive extents");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.normal() * std)).collect();
        Self::raw(shape, data)
    }

    /// Uniform draws in `[lo, hi)`.
    pub fn rand_uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let shape = shape.into();
        validate_shape("rand_uniform", &shape).expect("positive extents");
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(lo + (hi - lo) * rng.uniform()))
            .collect();
        Self::raw(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (i, (&ix, &n)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < n, "index {index:?} out of bounds on axis {i} for {:?}", self.shape);
            off = off * n + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on a tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::raw(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Copy with `data[offset]` replaced.
    pub fn with_value_at(&self, offset: usize, value: T) -> Self {
        let mut data = self.data.clone();
        data[offset] = value;
        Self::raw(self.shape.clone(), data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// Boolean validity mask, broadcast against tensors like any other operand.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, bits: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        validate_shape("mask", &shape)?;
        if shape.iter().product::<usize>() != bits.len() {
            return Err(shape_err(
                "mask",
                format!("shape {shape:?} does not hold {} bits", bits.len()),
            ));
        }
        Ok(Self { shape, bits })
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        let n = bits.len();
        Self::new(vec![n], bits).expect("non-empty mask")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.bits.clone())
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Expands the mask to `shape` under broadcasting.
    pub(crate) fn expand(&self, shape: &[usize]) -> Result<Vec<bool>> {
        let out = broadcast_shape(&self.shape, shape).filter(|s| s.as_slice() == shape);
        if out.is_none() {
            return Err(Error::DimMismatch {
                op: "mask",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let strides = kernels::broadcast_strides(&self.shape, shape);
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut bits = Vec::with_capacity(n);
        for _ in 0..n {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            bits.push(self.bits[off]);
            advance(&mut idx, shape);
        }
        Ok(bits)
    }
}

fn validate_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(shape_err(op, "rank must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(shape_err(op, format!("zero extent in {shape:?}")));
    }
    Ok(())
}

/// Row-major odometer increment.
pub(crate) fn advance(idx: &mut [usize], shape: &[usize]) {
    for ax in (0..shape.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
    }
}

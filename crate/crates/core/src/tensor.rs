//! Dense row-major tensors and the scalar types they hold.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{config_err, data_err, Result};

/// Element type of a tensor. Experiments run in `f32`; `f64` exists for
/// gradient verification.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Code written into checkpoint tensor records.
    const DTYPE_CODE: u8;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize conversion")
    }
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 0;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 1;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense N-dimensional array with shape `(batch, channel, spatial...)` by
/// convention. An empty shape denotes a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(config_err!("tensor dimensions must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(config_err!(
                "shape {shape:?} holds {n} elements but {} were provided",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Converts from an `f64` literal slice; convenient in tests.
    pub fn from_f64s(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(config_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Element count along `axes`, also validating them.
    fn reduced_count(&self, axes: &[usize]) -> Result<usize> {
        let mut seen = vec![false; self.rank()];
        for &a in axes {
            if a >= self.rank() || seen[a] {
                return Err(config_err!(
                    "invalid reduction axes {axes:?} for shape {:?}",
                    self.shape
                ));
            }
            seen[a] = true;
        }
        Ok(axes.iter().map(|&a| self.shape[a]).product())
    }
}

/// Per-index statistics over a set of reduced axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub mean: Tensor<T>,
    /// Population variance (divisor N).
    pub var: Tensor<T>,
    pub mean_square: Tensor<T>,
    /// Number of elements reduced into each entry.
    pub count: usize,
}

/// Mean, population variance and mean square of `x` over `axes`, one value
/// per remaining index. The result shape keeps the non-reduced axes in order.
pub fn moment_stats<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Moments<T>> {
    let count = x.reduced_count(axes)?;
    if axes.is_empty() {
        return Err(data_err!("empty reduction: no axes selected"));
    }
    let rank = x.rank();
    let kept: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&a| x.shape[a]).collect();
    let out_len: usize = out_shape.iter().product();

    // Output stride of every input axis (0 for reduced axes).
    let mut out_stride = vec![0usize; rank];
    let mut s = 1;
    for &a in kept.iter().rev() {
        out_stride[a] = s;
        s *= x.shape[a];
    }
    let targets = flat_targets(&x.shape, &out_stride);

    let n = T::from_usize_lossy(count);
    let mut sum = vec![T::zero(); out_len];
    let mut sum_sq = vec![T::zero(); out_len];
    for (&v, &t) in x.data.iter().zip(&targets) {
        sum[t] = sum[t] + v;
        sum_sq[t] = sum_sq[t] + v * v;
    }
    let mean: Vec<T> = sum.iter().map(|&v| v / n).collect();
    let mut dev = vec![T::zero(); out_len];
    for (&v, &t) in x.data.iter().zip(&targets) {
        let d = v - mean[t];
        dev[t] = dev[t] + d * d;
    }
    let var = dev.into_iter().map(|v| v / n).collect();
    let mean_square = sum_sq.into_iter().map(|v| v / n).collect();
    Ok(Moments {
        mean: Tensor {
            shape: out_shape.clone(),
            data: mean,
        },
        var: Tensor {
            shape: out_shape.clone(),
            data: var,
        },
        mean_square: Tensor {
            shape: out_shape,
            data: mean_square,
        },
        count,
    })
}

/// Output offset of every input element under a per-axis output stride.
fn flat_targets(shape: &[usize], out_stride: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    let mut targets = Vec::with_capacity(n);
    let mut t = 0usize;
    for _ in 0..n {
        targets.push(t);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            t += out_stride[a];
            if idx[a] < shape[a] {
                break;
            }
            t -= out_stride[a] * shape[a];
            idx[a] = 0;
        }
    }
    targets
}

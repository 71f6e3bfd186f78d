//! Dense tensors with emulated 32-bit arithmetic and controllable reduction order.
//!
//! Elements are stored as `f64`. A tensor tagged [`Precision::Single`] keeps
//! every element representable as `f32`, and every arithmetic result produced
//! by the kernels here is rounded to `f32` before it is stored or accumulated.
//! This reproduces IEEE single-precision results bit for bit while letting
//! metric code read values without conversion.

mod conv;
mod reduce;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conv::{conv2d, conv2d_batch, conv2d_grad_input, conv2d_grad_weight, Boundary, ConvGeometry};
pub use reduce::{hash2, mix64, reduce_sum, CounterRng, ReductionMode, ReductionPolicy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid stride {stride} for extent {extent} with periodic boundary")]
    InvalidStride { stride: usize, extent: usize },
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    #[inline(always)]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Single => x as f32 as f64,
            Precision::Double => x,
        }
    }
}

/// Pointwise maps available to [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarMap {
    Identity,
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    Neg,
    Scale {
        factor: f64,
    },
    /// Derivative of ReLU.
    Step,
    /// Derivative of LeakyReLU.
    LeakyStep {
        slope: f64,
    },
}

impl ScalarMap {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ScalarMap::Identity => x,
            ScalarMap::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            ScalarMap::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            ScalarMap::Tanh => x.tanh(),
            ScalarMap::Neg => -x,
            ScalarMap::Scale { factor } => factor * x,
            ScalarMap::Step => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ScalarMap::LeakyStep { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    /// Build a tensor, rounding `data` to `precision`.
    pub fn new(shape: &[usize], data: Vec<f64>, precision: Precision) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        let mut t = Self {
            shape: shape.to_vec(),
            data,
            precision,
        };
        t.round_in_place();
        Ok(t)
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Self {
        Self::full(shape, 0.0, precision)
    }

    pub fn full(shape: &[usize], value: f64, precision: Precision) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![precision.round(value); n],
            precision,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw mutable access. Values written here are not rounded; call
    /// [`Tensor::round_in_place`] afterwards if they may not be representable.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn round_in_place(&mut self) {
        if self.precision == Precision::Single {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn to_precision(&self, precision: Precision) -> Self {
        let mut t = Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            precision,
        };
        t.round_in_place();
        t
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            precision: self.precision,
        })
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            off = off * dim + ix;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = self.precision.round(value);
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "transpose2 needs rank 2, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
            precision: self.precision,
        })
    }

    pub fn scale(&self, factor: f64) -> Self {
        let p = self.precision;
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| p.round(v * factor)).collect(),
            precision: p,
        }
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let p = self.precision;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| p.round(f(a, b)))
                .collect(),
            precision: p,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn elementwise(map: ScalarMap, t: &Tensor) -> Tensor {
    let p = t.precision;
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| p.round(map.apply(v))).collect(),
        precision: p,
    }
}

/// Frobenius inner product, accumulated in order in 64-bit.
pub fn frobenius_dot(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch(format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

pub fn frobenius_norm(a: &Tensor) -> f64 {
    a.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `A[m,k] · B[k,n]` with each output entry reduced under `policy`.
pub fn matmul(a: &Tensor, b: &Tensor, policy: &ReductionPolicy) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::ShapeMismatch(format!(
            "matmul {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let p = policy.precision;
    let mut out = vec![0.0; m * n];
    if policy.is_ordered() {
        for i in 0..m {
            let row = &a.data[i * k..(i + 1) * k];
            let acc = &mut out[i * n..(i + 1) * n];
            for (l, &av) in row.iter().enumerate() {
                let brow = &b.data[l * n..(l + 1) * n];
                for (o, &bv) in acc.iter_mut().zip(brow) {
                    *o = p.round(*o + p.round(av * bv));
                }
            }
        }
    } else {
        let mut terms = vec![0.0; k];
        for i in 0..m {
            for j in 0..n {
                for (l, t) in terms.iter_mut().enumerate() {
                    *t = p.round(a.data[i * k + l] * b.data[l * n + j]);
                }
                out[i * n + j] = policy.sum_terms(&mut terms, (i * n + j) as u64);
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
        precision: p,
    })
}

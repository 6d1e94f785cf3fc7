//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable row-major value; cloning shares the underlying
//! buffer. Gradients are computed by recording operations on a [`Tape`]
//! (see [`autograd`]) and walking the record backwards. Everything is f64:
//! the models here are small enough that numerical fidelity is worth more
//! than speed.

mod autograd;
mod named;

pub use autograd::{mix64, DropoutKey, Gradients, Tape, Var};
pub use named::{NamedTensors, NamedVars};

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported shape {shape:?}")]
    BadShape { op: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward on a detached tensor: no tape recorded this value")]
    Detached,
    #[error("operands belong to different tapes")]
    TapeMismatch,
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("dropout probability {0} outside [0, 1]")]
    BadProbability(f64),
}

/// Immutable dense tensor, row-major, f64.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                len: values.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(values),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; shape.iter().product()]),
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; shape.iter().product()]),
        }
    }

    /// 0-dimensional tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    /// Samples every element from N(0, std²).
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..shape.iter().product())
            .map(|_| dist.sample(rng))
            .collect();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    /// Copy with one element replaced; used by finite-difference oracles.
    pub fn with_value_at(&self, flat: usize, value: f64) -> Self {
        let mut data = self.data.as_ref().clone();
        data[flat] = value;
        Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// In-place elementwise update; copies the buffer only if it is shared.
    pub fn update(&mut self, f: impl Fn(f64) -> f64) {
        let data = Arc::make_mut(&mut self.data);
        for v in data.iter_mut() {
            *v = f(*v);
        }
    }

    /// In-place `self[i] = f(self[i], other[i])`.
    pub fn zip_update(&mut self, other: &Tensor, f: impl Fn(f64, f64) -> f64) {
        assert_eq!(self.shape, other.shape, "zip_update shape mismatch");
        let data = Arc::make_mut(&mut self.data);
        for (v, &o) in data.iter_mut().zip(other.data.iter()) {
            *v = f(*v, o);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 8 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?} [{}, {}, ... ({} values)]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

impl Serialize for Tensor {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            shape: &'a [usize],
            values: &'a [f64],
        }
        Repr {
            shape: &self.shape,
            values: &self.data,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            shape: Vec<usize>,
            values: Vec<f64>,
        }
        let repr = Repr::deserialize(deserializer)?;
        Tensor::from_vec(&repr.shape, repr.values).map_err(D::Error::custom)
    }
}

// ---- raw kernels shared by forward and backward paths ----

/// out += a(m,k) · b(k,n)
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out += a(m,k) · b(n,k)ᵀ
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out += a(m,k)ᵀ · b(m,n)
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for l in 0..m {
        let a_row = &a[l * k..(l + 1) * k];
        let b_row = &b[l * n..(l + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn scalar_is_zero_dimensional() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn reshape_shares_data() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4]).is_err());
    }

    #[test]
    fn mm_kernels_agree_on_small_case() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut nn = [0.0; 4];
        mm_nn(&a, &b, 2, 2, 2, &mut nn);
        assert_eq!(nn, [19.0, 22.0, 43.0, 50.0]);

        // a · bᵀ
        let mut nt = [0.0; 4];
        mm_nt(&a, &b, 2, 2, 2, &mut nt);
        assert_eq!(nt, [17.0, 23.0, 39.0, 53.0]);

        // aᵀ · b
        let mut tn = [0.0; 4];
        mm_tn(&a, &b, 2, 2, 2, &mut tn);
        assert_eq!(tn, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn serde_round_trip() {
        let t = Tensor::from_vec(&[2, 2], vec![1.5, -2.0, 0.0, 4.25]).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: Tensor = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }
}

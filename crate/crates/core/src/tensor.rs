//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a plain value: it owns its buffer and carries no gradient
//! state. Gradient bookkeeping lives on the [`Tape`](crate::autodiff::Tape),
//! and trainable tensors are wrapped in [`Parameter`](crate::nn::Parameter).

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?} [{}, {}, ... {} values]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

impl Tensor {
    /// Builds a tensor, rejecting zero extents, length mismatches and
    /// non-finite values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::shape("tensor must have at least one axis"));
        }
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for op outputs whose shape is already known to
    /// be consistent.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_raw(vec![1], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_raw(shape.to_vec(), vec![value; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_raw(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    /// Normal samples via Box-Muller, so the stream depends only on `rng`.
    pub fn rand_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        Tensor::from_fn(shape, |_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen::<f64>();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    pub fn eye(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(self.strides()).map(|(&i, s)| i * s).sum()
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// The only scalar of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor::from_raw(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor::from_raw(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies out the sub-tensor at `index` along axis 0.
    pub fn index_axis0(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape[1..].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::from_raw(
            shape,
            self.data[index * inner..(index + 1) * inner].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(format!(
                    "stack of mismatched shapes {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_raw(shape, data))
    }

    /// General axis permutation; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        if perm.len() != nd {
            return Err(Error::shape(format!(
                "permutation {perm:?} does not match rank {nd}"
            )));
        }
        let mut seen = vec![false; nd];
        for &p in perm {
            if p >= nd || seen[p] {
                return Err(Error::shape(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = self.strides();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; nd];
        let mut src = 0usize;
        for _ in 0..self.numel() {
            out.push(self.data[src]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor::from_raw(out_shape, out))
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Inverse of a permutation.
pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

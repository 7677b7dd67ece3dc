//! Dense row-major `f64` tensors and the seeded random stream used
//! everywhere else.
//!
//! Reductions and matrix products always accumulate in ascending index
//! order, so results are reproducible bit-for-bit across runs.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Mean,
    Max,
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, length mismatches
    /// and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("dimensions must be positive, got {shape:?}")));
        }
        if shape_len(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} values, got {}",
                shape_len(&shape),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value {} at index {i}", data[i])));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape_len(shape)],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data: Vec<f64> = (0..shape_len(shape)).map(&mut f).collect();
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Internal constructor for kernels that guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape_len(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape_len(shape) != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of `[m, k]` by `[k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        map_elementwise(self, f)
    }

    pub fn reduce(&self, axes: &[usize], mode: ReduceMode) -> Result<Tensor> {
        reduce(self, axes, mode)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise operands differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        s => return Err(Error::Shape(format!("matmul lhs must be 2-d, got {s:?}"))),
    };
    let (k2, n) = match b.shape() {
        [k2, n] => (*k2, *n),
        s => return Err(Error::Shape(format!("matmul rhs must be 2-d, got {s:?}"))),
    };
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    // i-k-j order keeps the per-output accumulation ascending in k.
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a.data[i * k + kk];
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn map_elementwise(t: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(t.len());
    for (i, &v) in t.data.iter().enumerate() {
        let y = f(v);
        if !y.is_finite() {
            return Err(Error::Numeric(format!(
                "elementwise map produced {y} at index {i} (input {v})"
            )));
        }
        data.push(y);
    }
    Ok(Tensor::from_parts(t.shape.clone(), data))
}

/// Reduces over `axes`, dropping them from the shape. Reducing every axis
/// yields a shape-`[1]` tensor.
pub fn reduce(t: &Tensor, axes: &[usize], mode: ReduceMode) -> Result<Tensor> {
    let rank = t.shape.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::Shape(format!("axis {a} out of range for shape {:?}", t.shape)));
        }
        reduced[a] = true;
    }
    let extent: usize = (0..rank).filter(|&d| reduced[d]).map(|d| t.shape[d]).product();
    if axes.is_empty() || extent == 0 {
        return Err(Error::Shape(format!(
            "empty reduction over axes {axes:?} of shape {:?}",
            t.shape
        )));
    }
    let mut out_shape: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).map(|d| t.shape[d]).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let out_len = shape_len(&out_shape);
    let init = match mode {
        ReduceMode::Mean => 0.0,
        ReduceMode::Max => f64::NEG_INFINITY,
    };
    let mut acc = vec![init; out_len];

    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * t.shape[d + 1];
    }
    // Flat input index -> flat output index, walking input in row-major order.
    for (flat, &v) in t.data.iter().enumerate() {
        let mut out_idx = 0;
        for d in 0..rank {
            if !reduced[d] {
                let coord = (flat / strides[d]) % t.shape[d];
                out_idx = out_idx * t.shape[d] + coord;
            }
        }
        match mode {
            ReduceMode::Mean => acc[out_idx] += v,
            ReduceMode::Max => acc[out_idx] = acc[out_idx].max(v),
        }
    }
    if mode == ReduceMode::Mean {
        let n = extent as f64;
        acc.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(out_shape, acc)
}

/// Deterministic random stream backed by ChaCha8 seeded from a `u64`.
///
/// Child streams are derived from `(seed, label)` via SHA-256, so a
/// child's values do not depend on how much of the parent has been
/// consumed.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// First eight bytes (little-endian) of `SHA-256(seed_le || label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fork(&self, label: &str) -> Rng {
        Rng::new(derive_seed(self.seed, label))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            lo
        } else {
            lo + (hi - lo) * self.uniform()
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

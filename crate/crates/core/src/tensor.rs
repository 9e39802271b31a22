//! Dense row-major tensors and the handful of kernels the attention and MLP
//! blocks need.
//!
//! Every operation is pure. Matrix products accumulate over the inner
//! dimension in ascending order starting from zero, so results are
//! reproducible bit for bit against a naive triple loop.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "shape must be a non-empty list of positive sizes, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), vec![T::zero(); numel(shape)])
    }

    /// Builds a tensor by evaluating `f` at every flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        Self::new(shape.to_vec(), (0..numel(shape)).map(f).collect())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            data.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        )
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(
            &[n, n],
            |i| {
                if i / n == i % n {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor rank is at least one")
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        if index.len() != self.rank() || index.iter().zip(&self.shape).any(|(&i, &d)| i >= d) {
            return Err(Error::Shape(format!(
                "index {index:?} out of bounds for {:?}",
                self.shape
            )));
        }
        let flat = index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i);
        Ok(self.data[flat])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn div_scalar(&self, s: T) -> Self {
        self.map(|x| x / s)
    }

    /// Sums a non-empty list of equally shaped tensors in list order.
    pub fn sum_ordered<'a>(terms: impl IntoIterator<Item = &'a Self>) -> Result<Self> {
        let mut iter = terms.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Shape("cannot sum an empty list of tensors".into()))?;
        iter.try_fold(first.clone(), |acc, t| acc.add(t))
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::Shape(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape
            )));
        }
        let r = self.rank();
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.len() / (m * n);
        let mut data = Vec::with_capacity(self.len());
        for b in 0..batch {
            let base = b * m * n;
            for j in 0..n {
                for i in 0..m {
                    data.push(self.data[base + i * n + j]);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Self::new(shape, data)
    }

    /// Matrix product over the last two axes.
    ///
    /// Leading axes must agree, or one operand may be a plain matrix that is
    /// broadcast across the other's leading axes.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || rb < 2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (k2, n) = (other.shape[rb - 2], other.shape[rb - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let lead_a = &self.shape[..ra - 2];
        let lead_b = &other.shape[..rb - 2];
        let lead: Vec<usize> = if lead_a == lead_b || lead_b.is_empty() {
            lead_a.to_vec()
        } else if lead_a.is_empty() {
            lead_b.to_vec()
        } else {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        };
        let batch = numel(&lead);
        let a_stride = if lead_a.is_empty() { 0 } else { m * k };
        let b_stride = if lead_b.is_empty() { 0 } else { k * n };

        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let a = &self.data[bi * a_stride..bi * a_stride + m * k];
            let b = &other.data[bi * b_stride..bi * b_stride + k * n];
            let c = &mut out[bi * m * n..(bi + 1) * m * n];
            // i-p-j order: each c[i][j] still accumulates p = 0..k ascending.
            for i in 0..m {
                let c_row = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let a_ip = a[i * k + p];
                    let b_row = &b[p * n..(p + 1) * n];
                    for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                        *cj = *cj + a_ip * bj;
                    }
                }
            }
        }
        let mut shape = lead;
        shape.extend([m, n]);
        Self::new(shape, out)
    }

    /// Row-wise softmax over the last axis, stabilised by subtracting the row
    /// maximum.
    pub fn softmax_rows(&self) -> Result<Self> {
        if !self.all_finite() {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let n = self.last_dim();
        let mut data = Vec::with_capacity(self.len());
        for row in self.data.chunks(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
            let sum = exps.iter().fold(T::zero(), |s, &e| s + e);
            data.extend(exps.into_iter().map(|e| e / sum));
        }
        Self::new(self.shape.clone(), data)
    }

    /// Sum over the last axis; the result keeps that axis with extent one.
    pub fn row_sums(&self) -> Self {
        let n = self.last_dim();
        let data = self
            .data
            .chunks(n)
            .map(|row| row.iter().fold(T::zero(), |s, &x| s + x))
            .collect();
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("non-empty shape") = 1;
        Self { shape, data }
    }

    /// Subtracts a per-row value (shape `[..., 1]`) from every row.
    pub fn sub_rows(&self, rows: &Self) -> Result<Self> {
        let n = self.last_dim();
        let mut expected = self.shape.clone();
        *expected.last_mut().expect("non-empty shape") = 1;
        if rows.shape != expected {
            return Err(Error::dim("sub_rows", &self.shape, &rows.shape));
        }
        let data = self
            .data
            .chunks(n)
            .zip(&rows.data)
            .flat_map(|(row, &r)| row.iter().map(move |&x| x - r))
            .collect();
        Self::new(self.shape.clone(), data)
    }

    /// Exact GeLU, `x * Phi(x)` with the Gaussian CDF written through erf.
    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }

    /// `[B, S, Z*A] -> [B, Z, S, A]`.
    pub fn split_heads(&self, heads: usize) -> Result<Self> {
        if self.rank() != 3 || heads == 0 || !self.shape[2].is_multiple_of(heads) {
            return Err(Error::Shape(format!(
                "cannot split {:?} into {heads} heads",
                self.shape
            )));
        }
        let (b, s, h) = (self.shape[0], self.shape[1], self.shape[2]);
        let a = h / heads;
        let mut data = Vec::with_capacity(self.len());
        for bi in 0..b {
            for z in 0..heads {
                for si in 0..s {
                    let base = (bi * s + si) * h + z * a;
                    data.extend_from_slice(&self.data[base..base + a]);
                }
            }
        }
        Self::new(vec![b, heads, s, a], data)
    }

    /// `[B, Z, S, A] -> [B, S, Z*A]`, the inverse of [`split_heads`](Self::split_heads).
    pub fn merge_heads(&self) -> Result<Self> {
        if self.rank() != 4 {
            return Err(Error::Shape(format!(
                "merge_heads needs rank 4, got {:?}",
                self.shape
            )));
        }
        let (b, heads, s, a) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let mut data = Vec::with_capacity(self.len());
        for bi in 0..b {
            for si in 0..s {
                for z in 0..heads {
                    let base = ((bi * heads + z) * s + si) * a;
                    data.extend_from_slice(&self.data[base..base + a]);
                }
            }
        }
        Self::new(vec![b, s, heads * a], data)
    }

    /// Copies `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::Shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape
            )));
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let d = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * d + start) * inner;
            data.extend_from_slice(&self.data[from..from + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self::new(shape, data)
    }

    /// Splits `axis` into `parts` equal pieces.
    pub fn chunk(&self, axis: usize, parts: usize) -> Result<Vec<Self>> {
        if axis >= self.rank() || parts == 0 || !self.shape[axis].is_multiple_of(parts) {
            return Err(Error::Shape(format!(
                "cannot split axis {axis} of {:?} into {parts} parts",
                self.shape
            )));
        }
        let len = self.shape[axis] / parts;
        (0..parts)
            .map(|i| self.narrow(axis, i * len, len))
            .collect()
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of range for {:?}",
                first.shape
            )));
        }
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &first.shape, &p.shape));
            }
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let span = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * span..(o + 1) * span]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Self::new(shape, data)
    }

    /// Collapses all leading axes into one, giving a matrix of the trailing axis.
    pub fn flatten_rows(&self) -> Self {
        let n = self.last_dim();
        Self {
            shape: vec![self.len() / n, n],
            data: self.data.clone(),
        }
    }
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let sqrt2 = T::from_f64_lossy(std::f64::consts::SQRT_2);
    half * x * (T::one() + (x / sqrt2).erf())
}

/// Seeded generator for reproducible fixtures.
///
/// Backed by ChaCha8 seeded through `seed_from_u64`; a uniform draw takes the
/// top 53 bits of one `u64` output. The stream is identical on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next_unit() * (hi - lo + 1) as f64) as usize
    }

    /// Tensor with entries uniform in `[-1, 1)`.
    pub fn tensor<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        Tensor::from_fn(shape, |_| T::from_f64_lossy(2.0 * self.next_unit() - 1.0))
    }
}

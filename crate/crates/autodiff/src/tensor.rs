//! Dense row-major `f64` tensors.
//!
//! `Tensor` is a plain value type with no graph attached. All the numeric
//! kernels used by [`crate::Var`] live here.

use std::fmt;

use crate::error::{Result, ShapeError};

/// Sentinel in gather maps: the output element is zero.
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Result shape of numpy-style broadcasting.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(ShapeError::Broadcast(a.to_vec(), b.to_vec()));
        };
    }
    Ok(out)
}

/// Strides that read `shape` as if broadcast to `target` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = target.len() - shape.len();
    (0..target.len()).map(|i| if i < off || shape[i - off] == 1 { 0 } else { own[i - off] }).collect()
}

/// Walks every multi-index of `shape` in row-major order, yielding the
/// linear offset under each of the given stride sets.
fn for_each_offset<const K: usize>(shape: &[usize], strides: [&[usize]; K], mut f: impl FnMut([usize; K])) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = [0usize; K];
    for _ in 0..total {
        f(off);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            for k in 0..K {
                off[k] += strides[k][d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for k in 0..K {
                off[k] -= strides[k][d] * shape[d];
            }
            idx[d] = 0;
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(ShapeError::DataLength { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Panicking constructor for internal use where the length is known.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn randn(shape: &[usize], rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let data = (0..numel(shape)).map(|_| StandardNormal.sample(rng)).collect();
        Self::from_parts(shape.to_vec(), data)
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Broadcasting binary elementwise op.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self::from_parts(self.shape.clone(), data));
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let so = strides(&out_shape);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for_each_offset(&out_shape, [&sa, &sb, &so], |[ia, ib, _]| {
            data.push(f(self.data[ia], other.data[ib]));
        });
        Ok(Self::from_parts(out_shape, data))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(ShapeError::Reshape(self.shape.clone(), shape.to_vec()));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(ShapeError::Axes(self.shape.clone(), axes.to_vec()));
        }
        let src = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
        let mut data = Vec::with_capacity(self.numel());
        for_each_offset(&out_shape, [&perm_strides], |[i]| data.push(self.data[i]));
        Ok(Self::from_parts(out_shape, data))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(ShapeError::Rank { expected: 2, got: self.shape.clone() });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let check = broadcast_shape(shape, &self.shape)?;
        if check != self.shape {
            return Err(ShapeError::Broadcast(self.shape.clone(), shape.to_vec()));
        }
        let dst = broadcast_strides(shape, &self.shape);
        let src = strides(&self.shape);
        let mut out = vec![0.0; numel(shape)];
        for_each_offset(&self.shape, [&src, &dst], |[i, o]| out[o] += self.data[i]);
        Ok(Self::from_parts(shape.to_vec(), out))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let check = broadcast_shape(&self.shape, shape)?;
        if check != shape {
            return Err(ShapeError::Broadcast(self.shape.clone(), shape.to_vec()));
        }
        let src = broadcast_strides(&self.shape, shape);
        let mut data = Vec::with_capacity(numel(shape));
        for_each_offset(shape, [&src], |[i]| data.push(self.data[i]));
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || start + len > self.shape[axis] {
            return Err(ShapeError::Narrow { shape: self.shape.clone(), axis, start, len });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self::from_parts(shape, data))
    }

    /// Inverse of `narrow`: embeds self at `start` along `axis` in a zero tensor of size `full`.
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Result<Self> {
        let len =
            *self.shape.get(axis).ok_or_else(|| ShapeError::Rank { expected: axis + 1, got: self.shape.clone() })?;
        if start + len > full {
            return Err(ShapeError::Narrow { shape: self.shape.clone(), axis, start, len: full });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = full;
        let mut data = vec![0.0; outer * full * inner];
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        Ok(Self::from_parts(shape, data))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(ShapeError::Empty)?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(ShapeError::Rank { expected: axis + 1, got: first.shape.clone() });
        }
        let mut total = 0;
        for p in parts {
            let ok = p.ndim() == nd && (0..nd).all(|d| d == axis || p.shape[d] == first.shape[d]);
            if !ok {
                return Err(ShapeError::Concat(first.shape.clone(), p.shape.clone()));
            }
            total += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self::from_parts(shape, data))
    }

    /// `out[i] = self[map[i]]`, or zero where `map[i] == GATHER_ZERO`.
    pub fn gather(&self, map: &[u32], out_shape: &[usize]) -> Result<Self> {
        if numel(out_shape) != map.len() {
            return Err(ShapeError::DataLength { shape: out_shape.to_vec(), len: map.len() });
        }
        let data = map.iter().map(|&m| if m == GATHER_ZERO { 0.0 } else { self.data[m as usize] }).collect();
        Ok(Self::from_parts(out_shape.to_vec(), data))
    }

    /// Adjoint of `gather`: `out[map[i]] += self[i]`.
    pub fn scatter_add(&self, map: &[u32], out_shape: &[usize]) -> Result<Self> {
        if self.numel() != map.len() {
            return Err(ShapeError::DataLength { shape: self.shape.clone(), len: map.len() });
        }
        let mut out = vec![0.0; numel(out_shape)];
        for (&m, &v) in map.iter().zip(&self.data) {
            if m != GATHER_ZERO {
                out[m as usize] += v;
            }
        }
        Ok(Self::from_parts(out_shape.to_vec(), out))
    }

    /// Matrix product over the last two axes. Either both operands have the
    /// same leading (batch) axes, or `rhs` is 2-D and shared across the batch.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        let (a, b) = (&self.shape, &rhs.shape);
        if a.len() < 2 || b.len() < 2 {
            return Err(ShapeError::Matmul(a.clone(), b.clone()));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(ShapeError::Matmul(a.clone(), b.clone()));
        }
        let batch_a: usize = a[..a.len() - 2].iter().product();
        let shared_rhs = b.len() == 2;
        if !shared_rhs && a[..a.len() - 2] != b[..b.len() - 2] {
            return Err(ShapeError::Matmul(a.clone(), b.clone()));
        }
        let mut out_shape = a[..a.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch_a * m * n];
        if shared_rhs {
            gemm(batch_a * m, k, n, &self.data, &rhs.data, &mut out);
        } else {
            for bi in 0..batch_a {
                gemm(
                    m,
                    k,
                    n,
                    &self.data[bi * m * k..(bi + 1) * m * k],
                    &rhs.data[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        Ok(Self::from_parts(out_shape, out))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Row-major `c = a(m×k) · b(k×n)`.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    // SAFETY: slices are exactly m*k, k*n and m*n long with row-major strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_vec(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a tensor from a flat-index generator.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(f).collect(),
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dim("Tensor::from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { S::one() } else { S::zero() })
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

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index {i} out of bounds for extent {n}");
                acc * n + i
            })
    }

    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Length of the last axis (1 for a scalar tensor).
    pub fn row_len(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of last-axis rows.
    pub fn n_rows(&self) -> usize {
        let len = self.row_len();
        if len == 0 {
            0
        } else {
            self.data.len() / len
        }
    }

    pub fn row(&self, r: usize) -> &[S] {
        let len = self.row_len();
        &self.data[r * len..(r + 1) * len]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let len = self.row_len();
        &mut self.data[r * len..(r + 1) * len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[S]> {
        self.data.chunks(self.row_len().max(1))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::of(x.to_f64_lossless())).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
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
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: S) -> Self {
        self.map(|x| x * factor)
    }

    /// Adds a length-`row_len` vector to every last-axis row.
    pub fn add_row_vector(&self, v: &[S]) -> Result<Self> {
        if v.len() != self.row_len() {
            return Err(Error::dim("add_row_vector", &self.shape, &[v.len()]));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(v.len().max(1)) {
            for (x, &b) in row.iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Splits the shape around `axis` into (outer, axis extent, inner).
    fn split_axis(&self, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        if axis >= self.shape.len() {
            return Err(Error::dim(op, &self.shape, &[axis]));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    fn reduce_axis(
        &self,
        axis: usize,
        op: &'static str,
        init: S,
        f: impl Fn(S, S) -> S,
    ) -> Result<Self> {
        let (outer, n, inner) = self.split_axis(axis, op)?;
        let mut out = vec![init; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    let slot = &mut out[o * inner + i];
                    *slot = f(*slot, self.data[base + i]);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data: out })
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        self.reduce_axis(axis, "sum_axis", S::zero(), |a, b| a + b)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let n = S::of(self.shape.get(axis).copied().unwrap_or(1) as f64);
        Ok(self.sum_axis(axis)?.map(|x| x / n))
    }

    pub fn max_axis(&self, axis: usize) -> Result<Self> {
        self.reduce_axis(axis, "max_axis", S::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    /// Index of the maximum along `axis`; ties resolve to the lowest index.
    pub fn argmax_axis(&self, axis: usize) -> Result<Vec<usize>> {
        let (outer, n, inner) = self.split_axis(axis, "argmax_axis")?;
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_val = S::neg_infinity();
                for k in 0..n {
                    let v = self.data[(o * n + k) * inner + i];
                    if v > best_val {
                        best_val = v;
                        best = k;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::dim("transpose", &self.shape, &[2]));
        }
        self.permute(&[1, 0])
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", &self.shape, axes));
        }
        let mut strides = vec![1usize; nd];
        for a in (0..nd.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.shape[a + 1];
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let new_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; nd];
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(&new_strides).map(|(i, s)| i * s).sum();
            data.push(self.data[off]);
            for a in (0..nd).rev() {
                idx[a] += 1;
                if idx[a] < new_shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(Self {
            shape: new_shape,
            data,
        })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (outer, _, inner) = first.split_axis(axis, "concat")?;
        let mut total = 0;
        for p in parts {
            let same_rank = p.ndim() == first.ndim();
            let same_other = same_rank
                && p
                    .shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(a, (x, y))| a == axis || x == y);
            if !same_other {
                return Err(Error::dim("concat", &first.shape, &p.shape));
            }
            total += p.shape[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    /// Selects rows (first-axis slices) by index.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if self.ndim() == 0 {
            return Err(Error::dim("gather_rows", &self.shape, indices));
        }
        let n = self.shape[0];
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= n {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows index {i} out of range for {n} rows"
                )));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Matrix product. The inner sum runs left to right over `k`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            // i-k-j order: each output element still accumulates over k in increasing order.
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[1] {
            return Err(Error::dim("matmul_t", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[0]);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out.push(dot(a, b));
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }
}

/// Left-to-right dot product.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

//! Dense row-major `f64` tensors with a reverse-mode differentiation tape.
//!
//! [`Tensor`] is plain storage plus the forward kernels. [`Tape`] records
//! operations over [`Var`] handles and runs the backward pass; trainable
//! values live in a [`ParamStore`] and are bound onto a tape per step.

mod gradcheck;
mod param;
mod tape;

pub use gradcheck::grad_check;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, OpKind, Tape, Var};

use crate::error::{Error, Result};

/// Clamp applied to L2 norms before dividing.
pub const NORM_EPS: f64 = 1e-12;
/// Variance epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::usage(format!(
                "tensor shape must be nonempty with positive dims, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::usage(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::usage("ragged rows"));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![1, n], values)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::usage(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("nonempty shape")
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::usage(format!(
                "axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        Ok(())
    }

    /// `(outer, len, inner)` factorization of the shape around `axis`.
    fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }

    fn reduced_shape(&self, axis: usize) -> Vec<usize> {
        let mut s = self.shape.clone();
        s[axis] = 1;
        s
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.dims2()?;
        let (k2, m) = other.dims2()?;
        if k != k2 {
            return Err(Error::usage(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Output shape of a broadcasting binary op between same-rank tensors.
    pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
        if a.len() != b.len() {
            return Err(Error::usage(format!(
                "cannot broadcast shapes {a:?} and {b:?}: ranks differ"
            )));
        }
        a.iter()
            .zip(b)
            .map(|(&x, &y)| match (x, y) {
                _ if x == y => Ok(x),
                (1, _) => Ok(y),
                (_, 1) => Ok(x),
                _ => Err(Error::usage(format!(
                    "cannot broadcast shapes {a:?} and {b:?}"
                ))),
            })
            .collect()
    }

    /// Strides of `shape` as seen from a broadcast `out` shape (0 on stretched axes).
    fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
        let mut strides = vec![0; shape.len()];
        let mut acc = 1;
        for d in (0..shape.len()).rev() {
            strides[d] = if shape[d] == out[d] { acc } else { 0 };
            acc *= shape[d];
        }
        strides
    }

    /// For every element of the broadcast output, the flat indices into `a` and `b`.
    fn broadcast_indices(a: &[usize], b: &[usize], out: &[usize]) -> Vec<(usize, usize)> {
        let sa = Self::broadcast_strides(a, out);
        let sb = Self::broadcast_strides(b, out);
        let n: usize = out.iter().product();
        let mut idx = vec![0usize; out.len()];
        let mut res = Vec::with_capacity(n);
        for _ in 0..n {
            let ia = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
            let ib = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
            res.push((ia, ib));
            for d in (0..out.len()).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        res
    }

    pub fn broadcast_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            return Ok(self.zip_map(other, f));
        }
        let out = Self::broadcast_shape(&self.shape, &other.shape)?;
        let data = Self::broadcast_indices(&self.shape, &other.shape, &out)
            .into_iter()
            .map(|(i, j)| f(self.data[i], other.data[j]))
            .collect();
        Ok(Tensor { shape: out, data })
    }

    /// Sums a broadcast gradient back down to `shape`.
    pub(crate) fn reduce_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let mut out = Tensor::zeros(shape);
        let strides = Self::broadcast_strides(shape, &self.shape);
        let mut idx = vec![0usize; self.shape.len()];
        for &g in &self.data {
            let j: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            out.data[j] += g;
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        out
    }

    /// Repeats a tensor along axes where it has size 1 to reach `shape`.
    pub(crate) fn expand_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let strides = Self::broadcast_strides(&self.shape, shape);
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let j: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            data.push(self.data[j]);
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, len, inner) = self.axis_split(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        Ok(Tensor {
            shape: self.reduced_shape(axis),
            data: out,
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = self.shape.get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.map(|v| v / len))
    }

    /// Max along `axis` (kept as size 1) and the position of the first maximum.
    pub fn max_axis(&self, axis: usize) -> Result<(Tensor, Vec<usize>)> {
        self.check_axis(axis)?;
        let (outer, len, inner) = self.axis_split(axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    let v = self.data[base + i];
                    let slot = o * inner + i;
                    // strict comparison keeps the first maximal index on ties
                    if v > out[slot] || l == 0 {
                        out[slot] = v;
                        arg[slot] = l;
                    }
                }
            }
        }
        Ok((
            Tensor {
                shape: self.reduced_shape(axis),
                data: out,
            },
            arg,
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, len, inner) = self.axis_split(axis);
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len)
                    .map(|l| self.data[at(l)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (self.data[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Divides every row (last axis) by `max(‖row‖₂, 1e-12)`; also returns the clamped norms.
    pub fn l2_normalize_rows(&self) -> (Tensor, Vec<f64>) {
        let c = self.cols();
        let mut out = self.data.clone();
        let mut norms = Vec::with_capacity(self.data.len() / c);
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        (
            Tensor {
                shape: self.shape.clone(),
                data: out,
            },
            norms,
        )
    }

    /// Zero-mean unit-variance normalization along the last axis; returns the
    /// normalized tensor and the per-row inverse standard deviations.
    pub fn layer_norm(&self) -> (Tensor, Vec<f64>) {
        let c = self.cols();
        let mut out = self.data.clone();
        let mut inv_std = Vec::with_capacity(self.data.len() / c);
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        (
            Tensor {
                shape: self.shape.clone(),
                data: out,
            },
            inv_std,
        )
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        first.check_axis(axis)?;
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::usage(format!(
                    "concat shape mismatch: {:?} vs {:?} on axis {axis}",
                    p.shape, first.shape
                )));
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let outer: usize = first.shape[..axis].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = p.data.len() / outer;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Splits a gradient of a concatenation back into the part shapes.
    pub(crate) fn split(&self, axis: usize, sizes: &[usize]) -> Vec<Tensor> {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let total = self.shape[axis];
        let mut parts: Vec<Tensor> = sizes
            .iter()
            .map(|&s| {
                let mut shape = self.shape.clone();
                shape[axis] = s;
                Tensor {
                    data: Vec::with_capacity(outer * s * inner),
                    shape,
                }
            })
            .collect();
        for o in 0..outer {
            let mut offset = o * total * inner;
            for (p, &s) in parts.iter_mut().zip(sizes) {
                p.data
                    .extend_from_slice(&self.data[offset..offset + s * inner]);
                offset += s * inner;
            }
        }
        parts
    }
}

//! Dense row-major tensors and the value-level kernels shared by both
//! differentiation modes.

use std::fmt;

use crate::error::AdError;

/// Dense, immutable-by-convention n-dimensional array of `f64`.
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
            write!(f, "Tensor{:?} [{} elements]", self.shape, self.data.len())
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn try_new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AdError> {
        if numel(&shape) != data.len() {
            return Err(AdError::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics when `data.len()` does not match the shape.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::try_new(shape, data).unwrap()
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        // v * 0 is NaN exactly when v is not finite; four lanes vectorize
        let mut acc = [0.0f64; 4];
        let chunks = self.data.chunks_exact(4);
        let rest = chunks.remainder();
        for c in chunks {
            for k in 0..4 {
                acc[k] += c[k] * 0.0;
            }
        }
        let tail: f64 = rest.iter().map(|v| v * 0.0).sum();
        (acc[0] + acc[1] + acc[2] + acc[3] + tail).is_finite()
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Tensor { shape: shape.to_vec(), data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Same-shape elementwise combination.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_all(&self) -> f64 {
        pairwise_sum(&self.data)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "dot length mismatch");
        let prods: Vec<f64> = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        pairwise_sum(&prods)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.ndim(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Broadcast to `shape` following numpy rules.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        assert!(
            shape.len() >= self.shape.len(),
            "cannot broadcast {:?} to {:?}",
            self.shape,
            shape
        );
        let offset = shape.len() - self.shape.len();
        let mut src_strides = vec![0usize; shape.len()];
        let mut stride = 1;
        for i in (0..self.shape.len()).rev() {
            let d = self.shape[i];
            let target = shape[i + offset];
            assert!(
                d == target || d == 1,
                "cannot broadcast {:?} to {:?}",
                self.shape,
                shape
            );
            src_strides[i + offset] = if d == 1 { 0 } else { stride };
            stride *= d;
        }
        let n = numel(shape);
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        let mut src = 0usize;
        for _ in 0..n {
            out.push(self.data[src]);
            // odometer increment
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                src -= src_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Tensor { shape: shape.to_vec(), data: out }
    }

    /// Reduce a broadcast result back to `shape` by summation (adjoint of
    /// `broadcast_to`).
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let offset = self.shape.len() - shape.len();
        let mut dst_strides = vec![0usize; self.shape.len()];
        let mut stride = 1;
        for i in (0..shape.len()).rev() {
            dst_strides[i + offset] = if shape[i] == 1 { 0 } else { stride };
            stride *= shape[i];
        }
        let mut out = vec![0.0; numel(shape)];
        let mut idx = vec![0usize; self.shape.len()];
        let mut dst = 0usize;
        for &v in &self.data {
            out[dst] += v;
            for ax in (0..self.shape.len()).rev() {
                idx[ax] += 1;
                dst += dst_strides[ax];
                if idx[ax] < self.shape[ax] {
                    break;
                }
                dst -= dst_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Tensor { shape: shape.to_vec(), data: out }
    }

    /// Permute axes; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.ndim(), "permutation rank mismatch");
        let nd = self.ndim();
        let mut in_strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * self.shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.data.len();
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        let mut src = 0usize;
        for _ in 0..n {
            out.push(self.data[src]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                src += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Tensor { shape: out_shape, data: out }
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let (outer, d, inner) = split_axis(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..d {
                let base = (o * d + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor { shape, data: out }
    }

    /// Insert a length-`d` axis at `axis` by replication (adjoint of `sum_axis`).
    pub fn expand_axis(&self, axis: usize, d: usize) -> Tensor {
        let mut shape = self.shape.clone();
        shape.insert(axis, d);
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * d * inner);
        for o in 0..outer {
            let src = &self.data[o * inner..(o + 1) * inner];
            for _ in 0..d {
                out.extend_from_slice(src);
            }
        }
        Tensor { shape, data: out }
    }

    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Tensor {
        assert!(start <= end && end <= self.shape[axis], "slice out of range");
        let (outer, d, inner) = split_axis(&self.shape, axis);
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner;
            out.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor { shape, data: out }
    }

    /// Zero tensor of `full_shape` with `self` written at `start` along `axis`.
    pub fn pad_axis(&self, axis: usize, start: usize, full_shape: &[usize]) -> Tensor {
        let (outer, d, inner) = split_axis(full_shape, axis);
        let len = self.shape[axis];
        let mut out = vec![0.0; numel(full_shape)];
        for o in 0..outer {
            let dst = o * d * inner + start * inner;
            let src = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        Tensor { shape: full_shape.to_vec(), data: out }
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        let mut total = 0;
        for p in parts {
            assert_eq!(p.ndim(), first.len(), "concat rank mismatch");
            for (ax, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
                assert!(ax == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape(), first);
            }
            total += p.shape()[axis];
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data[o * len..(o + 1) * len]);
            }
        }
        Tensor { shape, data: out }
    }

    /// Matrix product of `[m,k] x [k,n]`, optionally with either operand
    /// read transposed.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        assert_eq!(self.ndim(), 2, "matmul lhs must be 2-D, got {:?}", self.shape);
        assert_eq!(other.ndim(), 2, "matmul rhs must be 2-D, got {:?}", other.shape);
        let (m, k) = if ta { (self.shape[1], self.shape[0]) } else { (self.shape[0], self.shape[1]) };
        let (k2, n) = if tb { (other.shape[1], other.shape[0]) } else { (other.shape[0], other.shape[1]) };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape, other.shape);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, self.shape[1], ta, &other.data, other.shape[1], tb, &mut out);
        Tensor { shape: vec![m, n], data: out }
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_t(other, false, false)
    }

    /// Batched product `[b,m,k] x [b,k,n]` with optional per-operand transpose
    /// of the last two axes.
    pub fn bmm_t(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        assert_eq!(self.ndim(), 3, "bmm lhs must be 3-D");
        assert_eq!(other.ndim(), 3, "bmm rhs must be 3-D");
        let b = self.shape[0];
        assert_eq!(b, other.shape[0], "bmm batch mismatch");
        let (r0, c0) = (self.shape[1], self.shape[2]);
        let (r1, c1) = (other.shape[1], other.shape[2]);
        let (m, k) = if ta { (c0, r0) } else { (r0, c0) };
        let (k2, n) = if tb { (c1, r1) } else { (r1, c1) };
        assert_eq!(k, k2, "bmm inner dims {:?} x {:?}", self.shape, other.shape);
        let mut out = vec![0.0; b * m * n];
        for i in 0..b {
            gemm(
                m,
                k,
                n,
                &self.data[i * r0 * c0..(i + 1) * r0 * c0],
                c0,
                ta,
                &other.data[i * r1 * c1..(i + 1) * r1 * c1],
                c1,
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Tensor { shape: vec![b, m, n], data: out }
    }
}

/// (outer, axis_len, inner) decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {} out of range for {:?}", axis, shape);
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_cols: usize,
    ta: bool,
    b: &[f64],
    b_cols: usize,
    tb: bool,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    // SAFETY: slices cover m*k / k*n / m*n elements under the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Broadcasting elementwise binary kernel.
pub fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(&a.shape, &b.shape)
        .unwrap_or_else(|| panic!("incompatible shapes {:?} and {:?}", a.shape, b.shape));
    // common fast path: [.., n] op [n]
    if a.shape == shape && b.ndim() == 1 && b.shape[0] == *shape.last().unwrap() {
        let w = b.shape[0];
        let mut data = Vec::with_capacity(a.data.len());
        for row in a.data.chunks(w.max(1)) {
            for (&x, &y) in row.iter().zip(&b.data) {
                data.push(f(x, y));
            }
        }
        return Tensor { shape, data };
    }
    let a2 = a.broadcast_to(&shape);
    let b2 = b.broadcast_to(&shape);
    a2.zip_map(&b2, f)
}

/// Pairwise summation; result is independent of thread count and close to
/// compensated accuracy.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_and_sum_to_are_adjoint_shapes() {
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let big = b.broadcast_to(&[2, 3]);
        assert_eq!(big.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(big.sum_to(&[3]).data(), &[2.0, 4.0, 6.0]);
        let col = Tensor::from_vec(vec![2, 1], vec![1.0, 2.0]);
        let big = col.broadcast_to(&[2, 3]);
        assert_eq!(big.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(big.sum_to(&[2, 1]).data(), &[3.0, 6.0]);
        assert_eq!(Tensor::scalar(2.0).broadcast_to(&[2, 2]).sum_to(&[]).item(), 8.0);
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::from_vec(vec![2, 3, 4], (0..24).map(|v| v as f64).collect());
        let p = t.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        // element (i,j,k) of t lands at (k,i,j)
        assert_eq!(p.data()[3 * 6 + 1 * 3 + 2], t.data()[1 * 12 + 2 * 4 + 3]);
        let back = p.permute(&[1, 2, 0]);
        assert_eq!(back, t);
    }

    #[test]
    fn matmul_transposes() {
        let a = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(vec![3, 2], vec![1., 0., 0., 1., 1., 1.]);
        assert_eq!(a.matmul(&b).data(), &[4., 5., 10., 11.]);
        let at = a.permute(&[1, 0]);
        assert_eq!(at.matmul_t(&b, true, false), a.matmul(&b));
        let bt = b.permute(&[1, 0]);
        assert_eq!(a.matmul_t(&bt, false, true), a.matmul(&b));
    }

    #[test]
    fn concat_slice_pad() {
        let a = Tensor::from_vec(vec![2, 1], vec![1., 2.]);
        let b = Tensor::from_vec(vec![2, 2], vec![3., 4., 5., 6.]);
        let c = Tensor::concat(&[&a, &b], 1);
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
        assert_eq!(c.slice_axis(1, 1, 3), b);
        assert_eq!(b.pad_axis(1, 1, &[2, 3]).data(), &[0., 3., 4., 0., 5., 6.]);
    }

    #[test]
    fn try_new_rejects_bad_length() {
        assert!(Tensor::try_new(vec![2, 2], vec![1.0; 3]).is_err());
        assert_eq!(Tensor::scalar(3.0).shape(), &[] as &[usize]);
    }
}

//! Dense row-major `f64` arrays plus the raw kernels the tape builds on.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{LfitError, Result};
use crate::math;

/// Dense n-dimensional array. The product of `shape` always equals `data.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(LfitError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(LfitError::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(LfitError::Contract(alloc::format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a multi-index; panics on out-of-range indices.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range on axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = matmul_dims(self.shape(), other.shape())?;
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = self.data.clone();
        softmax_axis(&mut out, outer, len, inner);
        Tensor::new(self.shape.clone(), out)
    }

    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let n = self.last_dim();
        if gain.len() != n || bias.len() != n {
            return Err(LfitError::Shape {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let mut out = vec![0.0; self.len()];
        for (row, o) in self.data.chunks(n).zip(out.chunks_mut(n)) {
            let (mu, inv) = row_moments(row, eps);
            for j in 0..n {
                o[j] = (row[j] - mu) * inv * gain.data[j] + bias.data[j];
            }
        }
        Tensor::new(self.shape.clone(), out)
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(LfitError::Shape {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// Splits a shape around `axis` into (outer, axis extent, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(LfitError::Contract(alloc::format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `o += s0·b0 + s1·b1 + s2·b2 + s3·b3`, element-wise.
#[inline(always)]
fn axpy4(o: &mut [f64], s: [f64; 4], b0: &[f64], b1: &[f64], b2: &[f64], b3: &[f64]) {
    let n = o.len();
    let (b0, b1, b2, b3) = (&b0[..n], &b1[..n], &b2[..n], &b3[..n]);
    for j in 0..n {
        o[j] += s[0] * b0[j] + s[1] * b1[j] + s[2] * b2[j] + s[3] * b3[j];
    }
}

#[inline(always)]
fn axpy(o: &mut [f64], s: f64, b: &[f64]) {
    for (oj, bj) in o.iter_mut().zip(b) {
        *oj += s * bj;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, row-major, axpy order.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let (a, b, out) = (&a[..m * k], &b[..k * n], &mut out[..m * n]);
    for (arow, o) in a.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n.max(1))) {
        let mut p = 0;
        while p + 4 <= k {
            let s = [arow[p], arow[p + 1], arow[p + 2], arow[p + 3]];
            let row = |q: usize| &b[q * n..(q + 1) * n];
            axpy4(o, s, row(p), row(p + 1), row(p + 2), row(p + 3));
            p += 4;
        }
        for q in p..k {
            axpy(o, arow[q], &b[q * n..(q + 1) * n]);
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let (a, b, out) = (&a[..m * k], &b[..n * k], &mut out[..m * n]);
    for (arow, o) in a.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n.max(1))) {
        for (oj, brow) in o.iter_mut().zip(b.chunks_exact(k.max(1))) {
            let mut acc = [0.0; 4];
            let (ac, bc) = (arow.chunks_exact(4), brow.chunks_exact(4));
            let (ar, br) = (ac.remainder(), bc.remainder());
            for (x, y) in ac.zip(bc) {
                for l in 0..4 {
                    acc[l] += x[l] * y[l];
                }
            }
            let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
            for (x, y) in ar.iter().zip(br) {
                s += x * y;
            }
            *oj += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let (a, b, out) = (&a[..m * k], &b[..m * n], &mut out[..k * n]);
    let mut i = 0;
    while i + 4 <= m {
        let arows = [&a[i * k..], &a[(i + 1) * k..], &a[(i + 2) * k..], &a[(i + 3) * k..]];
        let brow = |q: usize| &b[q * n..(q + 1) * n];
        let (b0, b1, b2, b3) = (brow(i), brow(i + 1), brow(i + 2), brow(i + 3));
        for (p, o) in out.chunks_exact_mut(n.max(1)).enumerate() {
            let s = [arows[0][p], arows[1][p], arows[2][p], arows[3][p]];
            axpy4(o, s, b0, b1, b2, b3);
        }
        i += 4;
    }
    for q in i..m {
        let brow = &b[q * n..(q + 1) * n];
        for (p, o) in out.chunks_exact_mut(n.max(1)).enumerate() {
            axpy(o, a[q * k + p], brow);
        }
    }
}

pub(crate) fn softmax_axis(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(data[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = math::exp(data[base + j * inner] - max);
                data[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                data[base + j * inner] /= sum;
            }
        }
    }
}

/// Population mean and `1/sqrt(var + eps)` of one row.
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / math::sqrt(var + eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn zero_annihilates() {
        let z = Tensor::zeros(&[2, 3]);
        let b = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64).collect()).unwrap();
        let c = z.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match a.matmul(&b) {
            Err(LfitError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_cases() {
        let u = Tensor::vector(vec![0.0; 3]).softmax(0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::vector(vec![core::f64::consts::LN_2, 0.0])
            .softmax(0)
            .unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let big = Tensor::vector(vec![1000.0, 0.0]).softmax(0).unwrap();
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-15);
        assert!(big.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_non_last_axis() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 5.0, 0.0, -5.0]).unwrap();
        let s = x.softmax(0).unwrap();
        assert!((s.at(&[0, 0]) - 0.5).abs() < 1e-15);
        assert!((s.at(&[0, 1]) + s.at(&[1, 1]) - 1.0).abs() < 1e-15);
        assert!(x.softmax(2).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::filled(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let c = Tensor::filled(&[1, 3], 4.2).layer_norm(&ones, &zeros, 1e-8).unwrap();
        assert!(c.data().iter().all(|v| v.abs() < 1e-12));

        let ones2 = Tensor::filled(&[2], 1.0);
        let zeros2 = Tensor::zeros(&[2]);
        let x = Tensor::vector(vec![-1.0, 1.0]);
        let y = x.layer_norm(&ones2, &zeros2, 1e-300).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);

        let x = Tensor::new(vec![2, 2], vec![0.3, -7.0, 2.0, 9.0]).unwrap();
        let y = x
            .layer_norm(&Tensor::zeros(&[2]), &Tensor::filled(&[2], 2.5), 1e-8)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
    }
}

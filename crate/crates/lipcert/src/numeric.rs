//! Dense 64-bit float arrays, sorting/top-k primitives, and norms.
//!
//! Everything downstream (layers, certification, constructions) builds on the
//! helpers here. All routines are deterministic: the descending sort is stable
//! with a lowest-original-index tie-break so that order-statistic weights are
//! well-defined even when inputs collide.

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. A vector is represented as `rows == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    /// Matrix filled with zeros.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from an explicit row-major buffer. Panics on length mismatch
    /// (programming error, not runtime input).
    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    /// Build from a list of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            rows: r,
            cols: c,
            data,
        }
    }

    /// 1 x n vector view of `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            rows: 1,
            cols: n,
            data,
        }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::ShapeMismatch {
                context: "matvec",
                expected: self.cols,
                actual: x.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `self^T * g` (used by affine backward).
    pub fn matvec_t(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.rows {
            return Err(Error::ShapeMismatch {
                context: "matvec_t",
                expected: self.rows,
                actual: g.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let gi = g[i];
            if gi != 0.0 {
                for (o, w) in out.iter_mut().zip(self.row(i)) {
                    *o += gi * w;
                }
            }
        }
        Ok(out)
    }

    /// Largest row ℓ₁ norm — the ℓ∞→ℓ∞ operator norm of the matrix.
    pub fn max_row_l1(&self) -> f64 {
        (0..self.rows)
            .map(|i| l1_norm(self.row(i)))
            .fold(0.0, f64::max)
    }

    /// All entries finite?
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place `self += alpha * other` (shapes must match).
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }
}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// ℓ₁ norm.
pub fn l1_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

/// ℓ∞ norm; 0 for the empty vector.
pub fn linf_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

/// ℓ∞ distance between two equal-length vectors.
pub fn linf_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Elementwise sum of two vectors.
pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Elementwise absolute value.
pub fn abs(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.abs()).collect()
}

/// Scalar multiple.
pub fn scale(x: &[f64], c: f64) -> Vec<f64> {
    x.iter().map(|v| c * v).collect()
}

/// Stable descending sort returning the sorted values together with the
/// permutation mapping sorted positions to original indices. Ties break
/// toward the lower original index, which makes order-statistic weighting
/// deterministic under collisions.
pub fn sort_desc(x: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sort_desc"));
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    // total_cmp is a total order on finite floats; stable sort preserves
    // original index order among equals.
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]));
    let sorted = idx.iter().map(|&i| x[i]).collect();
    Ok((sorted, idx))
}

/// The `k` largest values of `x` in non-increasing order, with their original
/// indices. Agrees with the length-`k` prefix of [`sort_desc`].
pub fn top_k(x: &[f64], k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if k == 0 || k > x.len() {
        return Err(Error::InvalidArgument(format!(
            "top_k: k={} out of range 1..={}",
            k,
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("top_k"));
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    if k * 4 < x.len() {
        // Partial selection: move the k largest (by value desc, index asc)
        // to the front, then sort just that prefix.
        idx.select_nth_unstable_by(k - 1, |&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    } else {
        idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]));
        idx.truncate(k);
    }
    let vals = idx.iter().map(|&i| x[i]).collect();
    Ok((vals, idx))
}

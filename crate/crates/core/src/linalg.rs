//! Dense row-major matrices and the handful of kernels the solvers need.
//!
//! Products go through `matrixmultiply` with explicit strides so that
//! transposed operands never get materialized. Small dense factorizations
//! (k×k) are delegated to `nalgebra`.

use nalgebra::DMatrix;

use crate::error::{Result, SrmError};

/// Row-major dense `f64` matrix. Element `(r, c)` lives at `data[r * cols + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(SrmError::Dimension(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SrmError::Dimension("ragged rows".into()));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Copy of rows `start..end`.
    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) -> Result<()> {
        check_same_shape(self, other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_scaled(other, -1.0)?;
        Ok(out)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Sum of elementwise products, i.e. `trace(selfᵀ other)`.
    pub fn dot(&self, other: &Matrix) -> Result<f64> {
        check_same_shape(self, other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(dim_err("matmul", self, other));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, View::of(self), View::of(other), 0.0, &mut out);
        Ok(out)
    }

    /// `self * otherᵀ`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(dim_err("matmul_nt", self, other));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, View::of(self), View::of(other).t(), 0.0, &mut out);
        Ok(out)
    }

    /// `selfᵀ * other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(dim_err("matmul_tn", self, other));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, View::of(self).t(), View::of(other), 0.0, &mut out);
        Ok(out)
    }

    /// `‖W Wᵀ − I‖_max`, the orthonormality defect of the rows.
    pub fn orthonormality_error(&self) -> f64 {
        let mut gram = Matrix::zeros(self.rows, self.rows);
        gemm(1.0, View::of(self), View::of(self).t(), 0.0, &mut gram);
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..self.rows {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.get(i, j) - target).abs());
            }
        }
        worst
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
    }
}

fn check_same_shape(a: &Matrix, b: &Matrix, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, a, b));
    }
    Ok(())
}

fn dim_err(op: &str, a: &Matrix, b: &Matrix) -> SrmError {
    SrmError::Dimension(format!(
        "{op}: {}x{} vs {}x{}",
        a.rows, a.cols, b.rows, b.cols
    ))
}

/// Strided read-only view used to feed `dgemm` without copying.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    pub(crate) fn of(m: &'a Matrix) -> Self {
        View {
            data: &m.data,
            rows: m.rows,
            cols: m.cols,
            rs: m.cols as isize,
            cs: 1,
        }
    }

    /// Rows `start..end` of a row-major matrix.
    pub(crate) fn rows_of(m: &'a Matrix, start: usize, end: usize) -> Self {
        View {
            data: &m.data[start * m.cols..end * m.cols],
            rows: end - start,
            cols: m.cols,
            rs: m.cols as isize,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c ← alpha · a · b + beta · c` with `c` row-major.
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut Matrix) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), c.shape(), "gemm output shape");
    if c.data.is_empty() {
        return;
    }
    if a.cols == 0 {
        c.scale_in_place(beta);
        return;
    }
    // SAFETY: the views cover exactly rows×cols elements at the given
    // strides (checked on construction), and `c` is an exclusive buffer of
    // the output shape that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Thin SVD of a wide matrix `m = U · diag(singular) · Vt`.
#[derive(Clone, Debug)]
pub struct ThinSvd {
    /// k×k, orthogonal.
    pub u: Matrix,
    /// Descending, non-negative.
    pub singular: Vec<f64>,
    /// k×v, orthonormal rows.
    pub vt: Matrix,
}

/// Condition number above which the Cholesky-QR path hands over to a full
/// Householder SVD.
const CHOLQR_MAX_COND: f64 = 1e6;

/// Thin SVD for `k ≤ v`.
///
/// Uses two rounds of Cholesky-QR on the rows (`m = Bᵀ Q` with `Q`
/// orthonormal up to rounding) followed by a k×k SVD of `B`, which is far
/// cheaper than bidiagonalizing a k×v matrix. Inputs that are too
/// ill-conditioned for Cholesky-QR fall back to `nalgebra`'s SVD.
///
/// Sign convention: in each left singular vector the entry of largest
/// magnitude is non-negative (lowest index on ties); the matching row of
/// `vt` is flipped along with it.
pub fn thin_svd(m: &Matrix) -> Result<ThinSvd> {
    let (k, v) = m.shape();
    if k > v {
        return Err(SrmError::Dimension(format!(
            "thin_svd expects a wide matrix, got {k}x{v}"
        )));
    }
    if !m.all_finite() {
        return Err(SrmError::NonFinite("matrix passed to thin_svd".into()));
    }
    let svd = match cholqr_svd(m) {
        Some(svd) => svd,
        None => householder_svd(m),
    };
    Ok(canonicalize(svd))
}

fn cholqr_svd(m: &Matrix) -> Option<ThinSvd> {
    let k = m.rows();
    if k == 0 {
        return None;
    }
    let mut g1 = Matrix::zeros(k, k);
    gemm(1.0, View::of(m), View::of(m).t(), 0.0, &mut g1);
    let g1n = g1.to_nalgebra();
    let eig = g1n.clone().symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(max > 0.0) || min <= max / (CHOLQR_MAX_COND * CHOLQR_MAX_COND) {
        return None;
    }
    let l1 = g1n.cholesky()?.l();
    let l1_inv = l1.clone().try_inverse()?;
    let q1 = mul_small_left(&l1_inv, m);

    let mut g2 = Matrix::zeros(k, k);
    gemm(1.0, View::of(&q1), View::of(&q1).t(), 0.0, &mut g2);
    let l2 = g2.to_nalgebra().cholesky()?.l();
    let l2_inv = l2.clone().try_inverse()?;
    let q = mul_small_left(&l2_inv, &q1);

    let b = &l1 * &l2;
    let small = b.svd(true, true);
    let u = Matrix::from_nalgebra(small.u.as_ref()?);
    let vt_small = Matrix::from_nalgebra(small.v_t.as_ref()?);
    let vt = vt_small.matmul(&q).ok()?;
    Some(sorted(ThinSvd {
        u,
        singular: small.singular_values.iter().copied().collect(),
        vt,
    }))
}

fn householder_svd(m: &Matrix) -> ThinSvd {
    let svd = m.to_nalgebra().svd(true, true);
    let u = Matrix::from_nalgebra(svd.u.as_ref().expect("u requested"));
    let vt = Matrix::from_nalgebra(svd.v_t.as_ref().expect("v_t requested"));
    sorted(ThinSvd {
        u,
        singular: svd.singular_values.iter().copied().collect(),
        vt,
    })
}

/// `small · m` for a nalgebra k×k left factor.
fn mul_small_left(small: &DMatrix<f64>, m: &Matrix) -> Matrix {
    let s = Matrix::from_nalgebra(small);
    let mut out = Matrix::zeros(s.rows(), m.cols());
    gemm(1.0, View::of(&s), View::of(m), 0.0, &mut out);
    out
}

fn sorted(svd: ThinSvd) -> ThinSvd {
    let k = svd.singular.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular[b].total_cmp(&svd.singular[a]).then(a.cmp(&b)));
    if order.iter().enumerate().all(|(i, &j)| i == j) {
        return svd;
    }
    let u = Matrix::from_fn(svd.u.rows(), k, |r, c| svd.u.get(r, order[c]));
    let mut vt = Matrix::zeros(k, svd.vt.cols());
    for (dst, &src) in order.iter().enumerate() {
        vt.row_mut(dst).copy_from_slice(svd.vt.row(src));
    }
    ThinSvd {
        u,
        singular: order.iter().map(|&j| svd.singular[j]).collect(),
        vt,
    }
}

fn canonicalize(mut svd: ThinSvd) -> ThinSvd {
    let k = svd.singular.len();
    for j in 0..k {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for r in 0..svd.u.rows() {
            let a = svd.u.get(r, j).abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if svd.u.get(best, j) < 0.0 {
            for r in 0..svd.u.rows() {
                let x = svd.u.get(r, j);
                svd.u.set(r, j, -x);
            }
            svd.vt.row_mut(j).iter_mut().for_each(|x| *x = -*x);
        }
    }
    svd
}

/// Q factor of the rows of `m` (k×v, k ≤ v): the unique orthonormal-row
/// matrix `Q` with `m = L Q`, `L` lower triangular with positive diagonal.
pub fn orthonormalize_rows(m: &Matrix) -> Result<Matrix> {
    let (k, v) = m.shape();
    if k > v {
        return Err(SrmError::Dimension(format!(
            "cannot orthonormalize {k} rows of length {v}"
        )));
    }
    if !m.all_finite() {
        return Err(SrmError::NonFinite("matrix passed to orthonormalize_rows".into()));
    }
    let mut q = m.clone();
    // Two passes of modified Gram–Schmidt give orthonormality at rounding
    // level for any full-rank input.
    for _ in 0..2 {
        for i in 0..k {
            for j in 0..i {
                let (head, tail) = q.data.split_at_mut(i * v);
                let prev = &head[j * v..(j + 1) * v];
                let cur = &mut tail[..v];
                let proj: f64 = prev.iter().zip(cur.iter()).map(|(a, b)| a * b).sum();
                cur.iter_mut().zip(prev).for_each(|(c, p)| *c -= proj * p);
            }
            let row = q.row_mut(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 1e-300) {
                return Err(SrmError::InvalidInput(format!(
                    "rows are linearly dependent (row {i})"
                )));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok(q)
}

/// Symmetric eigendecomposition `a = V diag(values) Vᵀ`, values ascending.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if a.rows() != a.cols() {
        return Err(SrmError::Dimension("symmetric_eigen needs a square matrix".into()));
    }
    let n = a.rows();
    let sym = Matrix::from_fn(n, n, |r, c| 0.5 * (a.get(r, c) + a.get(c, r)));
    let eig = sym.to_nalgebra().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let values = order.iter().map(|&j| eig.eigenvalues[j]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// `V diag(f(values)) Vᵀ`.
pub fn spectral_map(values: &[f64], vectors: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let n = values.len();
    let scaled = Matrix::from_fn(n, n, |r, c| vectors.get(r, c) * f(values[c]));
    scaled.matmul_nt(vectors).expect("square factors")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn naive_mul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |r, c| {
            (0..a.cols()).map(|i| a.get(r, i) * b.get(i, c)).sum()
        })
    }

    #[test]
    fn products_match_naive() {
        let a = gaussian(7, 5, 1);
        let b = gaussian(5, 4, 2);
        let c = gaussian(6, 5, 3);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&naive_mul(&a, &b)) < 1e-12);
        assert!(
            a.matmul_nt(&c).unwrap().max_abs_diff(&naive_mul(&a, &c.transpose())) < 1e-12
        );
        let d = gaussian(7, 3, 4);
        assert!(
            a.matmul_tn(&d).unwrap().max_abs_diff(&naive_mul(&a.transpose(), &d)) < 1e-12
        );
        assert!(a.matmul(&c).is_err());
    }

    #[test]
    fn svd_reconstructs_and_is_canonical() {
        let m = gaussian(4, 30, 9);
        let svd = thin_svd(&m).unwrap();
        let ud = Matrix::from_fn(4, 4, |r, c| svd.u.get(r, c) * svd.singular[c]);
        assert!(ud.matmul(&svd.vt).unwrap().max_abs_diff(&m) < 1e-12);
        assert!(svd.u.orthonormality_error() < 1e-12);
        assert!(svd.vt.orthonormality_error() < 1e-12);
        assert!(svd.singular.windows(2).all(|w| w[0] >= w[1]));
        for j in 0..4 {
            let col = svd.u.column(j);
            let (idx, _) = col
                .iter()
                .enumerate()
                .fold((0, -1.0), |acc, (i, x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
            assert!(col[idx] >= 0.0);
        }
    }

    #[test]
    fn svd_handles_rank_deficiency() {
        // rank-1 3x6
        let a = gaussian(3, 1, 5);
        let b = gaussian(1, 6, 6);
        let m = a.matmul(&b).unwrap();
        let svd = thin_svd(&m).unwrap();
        assert!(svd.singular[1] < 1e-12 * svd.singular[0]);
        assert!(svd.vt.orthonormality_error() < 1e-10);
        let ud = Matrix::from_fn(3, 3, |r, c| svd.u.get(r, c) * svd.singular[c]);
        assert!(ud.matmul(&svd.vt).unwrap().max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn svd_rejects_tall_and_non_finite() {
        assert!(thin_svd(&Matrix::zeros(3, 2)).is_err());
        let mut m = Matrix::zeros(1, 2);
        m.set(0, 0, f64::NAN);
        assert!(thin_svd(&m).is_err());
    }

    #[test]
    fn orthonormalize_is_q_factor() {
        let g = gaussian(3, 8, 11);
        let q = orthonormalize_rows(&g).unwrap();
        assert!(q.orthonormality_error() < 1e-14);
        // L = G Qᵀ is lower triangular with positive diagonal
        let l = g.matmul_nt(&q).unwrap();
        for i in 0..3 {
            assert!(l.get(i, i) > 0.0);
            for j in i + 1..3 {
                assert!(l.get(i, j).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn singular_values_agree_with_householder(seed in 0u64..10_000, k in 1usize..6, extra in 0usize..20) {
            let m = gaussian(k, k + extra, seed);
            let fast = thin_svd(&m).unwrap();
            let reference = householder_svd(&m);
            for (a, b) in fast.singular.iter().zip(&reference.singular) {
                prop_assert!((a - b).abs() <= 1e-10 * reference.singular[0]);
            }
        }
    }
}

//! Dense row-major `f64` matrices and a one-sided Jacobi SVD.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sweep cap for the Jacobi iteration.
pub const SVD_MAX_SWEEPS: usize = 100;
/// A column pair counts as orthogonal once `|<a_p, a_q>| <= tol * |a_p| |a_q|`.
pub const SVD_TOLERANCE: f64 = 1e-12;
/// Singular values below `SIGMA_CLAMP * sigma_max` are reported as exactly zero.
pub const SIGMA_CLAMP: f64 = 1e-12;

/// Dense real matrix stored row-major. Both dimensions are at least one and
/// every entry is finite.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(rows, cols)?;
        if data.len() != rows * cols {
            return Err(Error::EntryCount {
                rows,
                cols,
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged or empty input; meant
    /// for literals in code and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.as_ref().len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.as_ref().len(), c, "ragged rows");
            data.extend_from_slice(row.as_ref());
        }
        Self::new(r, c, data).expect("valid literal matrix")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Fills a matrix from a generator called in row-major order.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw entries. Callers must keep them finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols + j])
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "axpy",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        finite(
            Self {
                rows: self.rows,
                cols: self.cols,
                data,
            },
            op,
        )
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

fn check_dims(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyMatrix { rows, cols });
    }
    Ok(())
}

fn finite(m: Matrix, op: &'static str) -> Result<Matrix> {
    if m.data.iter().all(|v| v.is_finite()) {
        Ok(m)
    } else {
        Err(Error::NonFinite(op))
    }
}

/// `a * b`
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    finite(
        Matrix {
            rows: m,
            cols: n,
            data: out,
        },
        "matmul",
    )
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_bt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, n) = (a.rows, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = a.row(i);
        for j in 0..n {
            out[i * n + j] = dot(a_row, b.row(j));
        }
    }
    finite(
        Matrix {
            rows: m,
            cols: n,
            data: out,
        },
        "matmul_bt",
    )
}

/// `a^T * b` without materializing the transpose.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_at",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, n) = (a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for p in 0..a.rows {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &aval) in a_row.iter().enumerate() {
            if aval == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aval * bv;
            }
        }
    }
    finite(
        Matrix {
            rows: m,
            cols: n,
            data: out,
        },
        "matmul_at",
    )
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Thin SVD `A = U diag(sigma) V^T` with `s = min(m, n)` singular triplets.
#[derive(Clone, Debug, PartialEq)]
pub struct Svd {
    /// `m x s`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `n x s`, orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    /// `U diag(sigma) V^T`
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.sigma.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        matmul_bt(&us, &self.v).expect("svd factors chain")
    }

    pub fn energy(&self) -> f64 {
        self.sigma.iter().map(|s| s * s).sum()
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Works on the columns of the taller orientation of `a`; a wide input is
/// decomposed through its transpose and the factors swapped. Output is
/// bit-for-bit deterministic: pivots are visited in a fixed cyclic order,
/// ties in the singular-value sort keep the lower column index, and each
/// singular pair is signed so that the largest-magnitude entry of `u_i` is
/// positive (first such entry on ties).
pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd input"));
    }
    let transposed = a.rows < a.cols;
    let work = if transposed { a.transpose() } else { a.clone() };
    let (m, n) = work.shape();

    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| work.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n == 1;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + 1f64.hypot(zeta));
                let c = 1.0 / 1f64.hypot(t);
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            rows: a.rows,
            cols: a.cols,
            sweeps: SVD_MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal values keep the lower original index first.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma_max = norms[order[0]];
    let mut sigma = Vec::with_capacity(n);
    let mut ucols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        if sigma_max == 0.0 || s < SIGMA_CLAMP * sigma_max {
            sigma.push(0.0);
            ucols.push(None);
        } else {
            sigma.push(s);
            ucols.push(Some(cols[j].iter().map(|v| v / s).collect()));
        }
    }
    let mut ucols = complete_basis(ucols, m);
    let mut vsorted: Vec<Vec<f64>> = order.iter().map(|&j| vcols[j].clone()).collect();

    for (u, v) in ucols.iter_mut().zip(vsorted.iter_mut()) {
        let mut pivot = 0;
        for (i, x) in u.iter().enumerate() {
            if x.abs() > u[pivot].abs() {
                pivot = i;
            }
        }
        if u[pivot] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let u = from_columns(&ucols, m);
    let v = from_columns(&vsorted, n);
    let (u, v) = if transposed { (v, u) } else { (u, v) };
    Ok(Svd { u, sigma, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (xp, xq) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *xp;
        let b = *xq;
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}

/// Fills the `None` slots with unit vectors orthogonal to every other column,
/// built from the standard basis by twice-iterated Gram-Schmidt.
fn complete_basis(cols: Vec<Option<Vec<f64>>>, m: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut out = Vec::with_capacity(cols.len());
    for c in cols {
        match c {
            Some(c) => out.push(c),
            None => {
                let mut best: Option<(f64, Vec<f64>)> = None;
                for k in 0..m {
                    let mut e = vec![0.0; m];
                    e[k] = 1.0;
                    for _ in 0..2 {
                        for b in &basis {
                            let proj = dot(&e, b);
                            e.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
                        }
                    }
                    let norm = dot(&e, &e).sqrt();
                    if best.as_ref().is_none_or(|(bn, _)| norm > *bn) {
                        best = Some((norm, e));
                    }
                }
                let (norm, mut e) = best.expect("m >= 1");
                e.iter_mut().for_each(|x| *x /= norm);
                basis.push(e.clone());
                out.push(e);
            }
        }
    }
    out
}

fn from_columns(cols: &[Vec<f64>], rows: usize) -> Matrix {
    Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormality_defect(q: &Matrix) -> f64 {
        let g = matmul_at(q, q).unwrap();
        g.max_abs_diff(&Matrix::identity(q.cols()))
    }

    #[test]
    fn identity_times_a_is_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let expected = Matrix::from_rows(&[[2.0, 1.0], [4.0, 3.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), expected);
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 4, 3);
        let b = random(&mut rng, 3, 5);
        let c = random(&mut rng, 5, 2);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(
            err,
            Error::ShapeMismatch {
                left: (2, 3),
                right: (2, 3),
                ..
            }
        ));
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 4, 3);
        let b = random(&mut rng, 5, 3);
        let c = random(&mut rng, 4, 6);
        let d1 = matmul_bt(&a, &b).unwrap();
        let d2 = matmul(&a, &b.transpose()).unwrap();
        assert!(d1.max_abs_diff(&d2) < 1e-14);
        let e1 = matmul_at(&a, &c).unwrap();
        let e2 = matmul(&a.transpose(), &c).unwrap();
        assert!(e1.max_abs_diff(&e2) < 1e-14);
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(
            Matrix::new(0, 2, vec![]),
            Err(Error::EmptyMatrix { .. })
        ));
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0; 3]),
            Err(Error::EntryCount { .. })
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 2)), 0.0);
        assert_eq!(frobenius_norm(&Matrix::from_rows(&[[3.0, 4.0]])), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 10, 10);
        let mut acc = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
        let oracle = f64::sqrt(acc);
        assert!((frobenius_norm(&a) - oracle).abs() / oracle <= 1e-14);
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let s = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(s.sigma, vec![1.0, 1.0, 1.0]);
        let s = svd(&Matrix::from_diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
        // Unsorted diagonal still comes back sorted.
        let s = svd(&Matrix::from_diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn svd_reconstructs_random_tall_and_wide() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(r, c) in &[(8, 5), (5, 8), (1, 7), (7, 1), (6, 6)] {
            let a = random(&mut rng, r, c);
            let s = svd(&a).unwrap();
            assert_eq!(s.u.shape(), (r, r.min(c)));
            assert_eq!(s.v.shape(), (c, r.min(c)));
            let err = s.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
            assert!(err <= 1e-10, "{r}x{c}: {err}");
            assert!(orthonormality_defect(&s.u) <= 1e-10);
            assert!(orthonormality_defect(&s.v) <= 1e-10);
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_rank_deficient_keeps_orthonormal_columns() {
        let u = Matrix::from_rows(&[[1.0], [2.0], [-1.0], [0.5]]);
        let v = Matrix::from_rows(&[[0.3, -1.0, 2.0]]);
        let a = matmul(&u, &v).unwrap();
        let s = svd(&a).unwrap();
        assert!(s.sigma[0] > 0.0);
        assert_eq!(&s.sigma[1..], &[0.0, 0.0]);
        assert!(orthonormality_defect(&s.u) <= 1e-10);
        assert!(orthonormality_defect(&s.v) <= 1e-10);
        assert!(s.reconstruct().max_abs_diff(&a) <= 1e-12);

        let z = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(z.sigma, vec![0.0, 0.0]);
        assert!(orthonormality_defect(&z.u) <= 1e-12);
    }

    #[test]
    fn svd_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(&mut rng, 6, 4);
        let s = svd(&a).unwrap();
        for j in 0..s.u.cols() {
            let col = s.u.col(j);
            let pivot =
                col.iter().enumerate().fold(
                    0,
                    |best, (i, x)| if x.abs() > col[best].abs() { i } else { best },
                );
            assert!(col[pivot] > 0.0);
        }
        // Negating the input flips V, not U.
        let n = svd(&a.scale(-1.0)).unwrap();
        assert_eq!(n.u, s.u);
        assert_eq!(n.v, s.v.scale(-1.0));
    }

    #[test]
    fn svd_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 9, 7);
        assert_eq!(svd(&a).unwrap(), svd(&a.clone()).unwrap());
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut a = Matrix::zeros(2, 2);
        a.as_mut_slice()[0] = f64::INFINITY;
        assert!(svd(&a).is_err());
    }
}

//! Dense linear algebra kernel.
//!
//! Row-major matrices, a cyclic Jacobi symmetric eigensolver, Kronecker
//! matrix-vector products that never materialize the Kronecker matrix, a
//! Cholesky factorization for the dense oracle solver, and rank statistics.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
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

    /// Builds a matrix from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Builds a matrix whose `j`-th column is `columns[j]`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::dim("ragged columns"));
        }
        let mut m = Self::zeros(rows, columns.len());
        for (j, col) in columns.iter().enumerate() {
            for (i, &x) in col.iter().enumerate() {
                m[(i, j)] = x;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without forming the transpose.
    pub fn tr_matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows {
            return Err(Error::dim(format!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dim(format!(
                "vector of length {} against {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn tr_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::dim(format!(
                "vector of length {} against {} rows",
                v.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            axpy(vi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim("matrix shapes differ"));
        }
        axpy(1.0, &other.data, &mut self.data);
        Ok(())
    }

    /// Adds `alpha · x yᵀ`.
    pub fn add_outer(&mut self, alpha: f64, x: &[f64], y: &[f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for (i, &xi) in x.iter().enumerate() {
            let a = alpha * xi;
            if a == 0.0 {
                continue;
            }
            axpy(a, y, &mut self.data[i * self.cols..(i + 1) * self.cols]);
        }
    }

    pub fn add_diagonal(&mut self, alpha: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += alpha;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest `|m_ij - m_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetrized(&self) -> DenseMatrix {
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = avg;
                s[(j, i)] = avg;
            }
        }
        s
    }

    /// Explicit Kronecker product `self ⊗ other`.
    ///
    /// Only meant for small test oracles and dense reference checks.
    pub fn kron(&self, other: &DenseMatrix) -> DenseMatrix {
        let mut out = Self::zeros(self.rows * other.rows, self.cols * other.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a = self[(i, j)];
                for k in 0..other.rows {
                    for l in 0..other.cols {
                        out[(i * other.rows + k, j * other.cols + l)] = a * other[(k, l)];
                    }
                }
            }
        }
        out
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `‖a − b‖ / ‖b‖`, or the absolute difference norm when `b` is zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(b);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    /// Columns are orthonormal eigenvectors.
    pub basis: DenseMatrix,
    /// Eigenvalues, ascending.
    pub values: Vec<f64>,
}

impl EigenPair {
    /// `basis · diag(values) · basisᵀ`
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.values.len();
        let mut scaled = self.basis.clone();
        for i in 0..n {
            for j in 0..n {
                scaled[(i, j)] *= self.values[j];
            }
        }
        scaled
            .matmul(&self.basis.transpose())
            .expect("square eigenbasis")
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-12;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(M + Mᵀ)/2` first. Eigenvalues are returned
/// in ascending order with the basis columns permuted to match.
pub fn sym_eigh(m: &DenseMatrix) -> Result<EigenPair> {
    if !m.is_square() {
        return Err(Error::dim(format!(
            "eigendecomposition of a non-square {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::numeric(
            "eigendecomposition input has non-finite entries",
        ));
    }
    let n = m.rows();
    let mut a = m.symmetrized();
    let mut v = DenseMatrix::identity(n);
    let threshold = JACOBI_REL_TOL * a.frobenius_norm();

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[(p, q)].abs());
            }
        }
        if off <= threshold {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }
    if !converged {
        return Err(Error::numeric(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut basis = DenseMatrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            basis[(i, new_j)] = v[(i, old_j)];
        }
    }
    Ok(EigenPair { basis, values })
}

/// Applies `A ← Jᵀ A J` and `V ← V J` for the rotation in the (p, q) plane.
fn rotate(a: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// `(A ⊗ B) v` computed as `vec(B · V · Aᵀ)`.
///
/// `vec` stacks columns: `V` has `b.cols()` rows and `a.cols()` columns with
/// `V[i][j] = v[j · b.cols() + i]`, and the output is laid out the same way
/// with `b.rows()` rows.
pub fn kron_apply(a: &DenseMatrix, b: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != a.cols() * b.cols() {
        return Err(Error::dim(format!(
            "kron_apply: vector length {} != {} * {}",
            v.len(),
            a.cols(),
            b.cols()
        )));
    }
    // BV has b.rows rows and a.cols columns (column-major).
    let mut bv = vec![0.0; b.rows() * a.cols()];
    for j in 0..a.cols() {
        let col = &v[j * b.cols()..(j + 1) * b.cols()];
        for i in 0..b.rows() {
            bv[j * b.rows() + i] = dot(b.row(i), col);
        }
    }
    // (BV)Aᵀ: column k is Σ_j A[k][j] · BV[:, j].
    let mut out = vec![0.0; b.rows() * a.rows()];
    for k in 0..a.rows() {
        let out_col = &mut out[k * b.rows()..(k + 1) * b.rows()];
        for j in 0..a.cols() {
            let akj = a[(k, j)];
            if akj != 0.0 {
                axpy(akj, &bv[j * b.rows()..(j + 1) * b.rows()], out_col);
            }
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: DenseMatrix,
}

impl Cholesky {
    pub fn factor(m: &DenseMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dim("Cholesky of a non-square matrix"));
        }
        let n = m.rows();
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = m[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { lower: l })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.lower.rows();
        if b.len() != n {
            return Err(Error::dim("Cholesky solve: rhs length"));
        }
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let s = dot(&l.row(i)[..i], &y[..i]);
            y[i] = (y[i] - s) / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        Ok(y)
    }
}

/// Average ranks (1-based); ties share the mean of their rank range.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = 0.5 * ((start + 1) + end) as f64;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim(format!(
            "correlation of vectors with lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::invalid(
            "correlation needs at least two observations",
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim(format!(
            "spearman of vectors with lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::numeric("spearman input contains NaN"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    fn random_symmetric(n: usize, seed: u64) -> DenseMatrix {
        random_matrix(n, n, seed).symmetrized()
    }

    fn orthonormality_defect(q: &DenseMatrix) -> f64 {
        let mut qtq = q.tr_matmul(q).unwrap();
        qtq.add_diagonal(-1.0);
        qtq.max_abs()
    }

    #[test]
    fn eigh_identity() {
        let e = sym_eigh(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        assert!(orthonormality_defect(&e.basis) < 1e-14);
    }

    #[test]
    fn eigh_diagonal_sorted_ascending() {
        let m = DenseMatrix::from_diag(&[2.0, -1.0]);
        let e = sym_eigh(&m).unwrap();
        assert_eq!(e.values, vec![-1.0, 2.0]);
        let expected = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(e.basis, expected);
    }

    #[test]
    fn eigh_random_reconstruction() {
        let m = random_symmetric(8, 11);
        let e = sym_eigh(&m).unwrap();
        let mut r = e.reconstruct();
        let scale = m.frobenius_norm();
        r.scale(-1.0);
        r.add_assign(&m).unwrap();
        assert!(r.frobenius_norm() / scale < 1e-8);
        assert!(orthonormality_defect(&e.basis) < 1e-10);
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn eigh_zero_matrix() {
        let e = sym_eigh(&DenseMatrix::zeros(4, 4)).unwrap();
        assert!(e.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eigh_errors() {
        assert!(matches!(
            sym_eigh(&DenseMatrix::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
        let mut m = DenseMatrix::identity(2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(sym_eigh(&m), Err(Error::Numeric(_))));
    }

    #[test]
    fn kron_identity_cases() {
        let v: Vec<f64> = (0..6).map(f64::from).collect();
        let out = kron_apply(&DenseMatrix::identity(2), &DenseMatrix::identity(3), &v).unwrap();
        assert_eq!(out, v);

        let mut two = DenseMatrix::identity(2);
        two.scale(2.0);
        let out = kron_apply(&two, &DenseMatrix::identity(3), &[1.0; 6]).unwrap();
        assert_eq!(out, vec![2.0; 6]);
    }

    #[test]
    fn kron_matches_explicit_product() {
        let a = random_matrix(3, 3, 1);
        let b = random_matrix(3, 3, 2);
        let v: Vec<f64> = random_matrix(1, 9, 3).into_vec();
        let explicit = a.kron(&b).matvec(&v).unwrap();
        let fast = kron_apply(&a, &b, &v).unwrap();
        assert!(relative_error(&fast, &explicit) < 1e-12);
    }

    #[test]
    fn kron_dimension_error() {
        let a = DenseMatrix::identity(2);
        assert!(kron_apply(&a, &a, &[1.0; 3]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation)
        ));
    }

    /// Rank-then-Pearson written out longhand for the tie case.
    #[test]
    fn spearman_with_ties_matches_longhand() {
        let x = [1.0, 1.0, 2.0, 3.0];
        let y = [2.0, 1.0, 1.0, 3.0];
        let rx = [1.5, 1.5, 3.0, 4.0];
        let ry = [3.0, 1.5, 1.5, 4.0];
        let mean = 2.5;
        let mut num: f64 = 0.0;
        let mut dx: f64 = 0.0;
        let mut dy: f64 = 0.0;
        for i in 0..4 {
            num += (rx[i] - mean) * (ry[i] - mean);
            dx += (rx[i] - mean) * (rx[i] - mean);
            dy += (ry[i] - mean) * (ry[i] - mean);
        }
        let expected = num / (dx * dy).sqrt();
        assert!((spearman(&x, &y).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let b = random_matrix(6, 6, 5);
        let mut spd = b.tr_matmul(&b).unwrap();
        spd.add_diagonal(0.5);
        let rhs: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect();
        let x = Cholesky::factor(&spd).unwrap().solve(&rhs).unwrap();
        let back = spd.matvec(&x).unwrap();
        assert!(relative_error(&back, &rhs) < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = DenseMatrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(
            Cholesky::factor(&m),
            Err(Error::NotPositiveDefinite { pivot: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn eigh_invariants(n in 1usize..12, seed in any::<u64>()) {
            let m = random_symmetric(n, seed);
            let e = sym_eigh(&m).unwrap();
            let mut r = e.reconstruct();
            r.scale(-1.0);
            r.add_assign(&m).unwrap();
            prop_assert!(r.frobenius_norm() <= 1e-8 * m.frobenius_norm().max(1e-300));
            prop_assert!(orthonormality_defect(&e.basis) < 1e-10);
        }

        #[test]
        fn kron_agrees_with_materialized(
            ar in 1usize..=6, ac in 1usize..=6, br in 1usize..=6, bc in 1usize..=6,
            seed in any::<u64>(),
        ) {
            let a = random_matrix(ar, ac, seed);
            let b = random_matrix(br, bc, seed ^ 0x9e37);
            let v = random_matrix(1, ac * bc, seed.wrapping_add(7)).into_vec();
            let explicit = a.kron(&b).matvec(&v).unwrap();
            let fast = kron_apply(&a, &b, &v).unwrap();
            prop_assert!(relative_error(&fast, &explicit) <= 1e-12);
        }

        #[test]
        fn spearman_monotone_invariance(
            xs in proptest::collection::vec(-100.0f64..100.0, 3..40),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let base = match spearman(&xs, &ys) {
                Ok(v) => v,
                Err(_) => return Ok(()),
            };
            let tx: Vec<f64> = xs.iter().map(|x| (x / 50.0).exp() * 3.0 + 1.0).collect();
            let ty: Vec<f64> = ys.iter().map(|y| y * y * y).collect();
            let transformed = spearman(&tx, &ty).unwrap();
            prop_assert!((base - transformed).abs() < 1e-12);
        }
    }
}

//! Dense linear-algebra kernel.
//!
//! Everything here is `f64` and row-major. Products accumulate in a fixed
//! order (row-major, left to right over the inner dimension) so that results
//! are bit-reproducible for a given build.

use crate::error::{Error, Result};

/// Eigenvalues with relative magnitude below this are treated as exact zeros.
pub const EIG_ZERO_CLAMP: f64 = 1e-10;
/// Maximum number of cyclic Jacobi sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Jacobi stops once the off-diagonal Frobenius mass falls below this
/// fraction of the input norm.
pub const JACOBI_TOL: f64 = 1e-12;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input, so this is
    /// meant for literals and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Gathers the given rows (in order) into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn row_range(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
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

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Largest absolute entry of `self - selfᵀ`; `INFINITY` for non-square input.
    pub fn symmetry_defect(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut d: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                d = d.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        d
    }
}

/// Matrix product with a fixed accumulation order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, k, m) = (a.cols, a.rows, b.cols);
    let mut out = Matrix::zeros(n, m);
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * b_pj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, i.e. the matrix of row dot products.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j))))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Eigendecomposition of a symmetric matrix.
///
/// `values` are sorted descending; column `j` of `vectors` is the unit
/// eigenvector for `values[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSpectrum {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigenSpectrum {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `V · diag(values) · Vᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let mut scaled = self.vectors.clone();
        for i in 0..n {
            for j in 0..n {
                let v = scaled.get(i, j) * self.values[j];
                scaled.set(i, j, v);
            }
        }
        matmul_nt(&scaled, &self.vectors).expect("square factors")
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(M + Mᵀ)/2` first. Eigenvalues whose magnitude
/// is within [`EIG_ZERO_CLAMP`] of the largest eigenvalue are set to exactly 0.
pub fn sym_eig(m: &Matrix) -> Result<EigenSpectrum> {
    if m.rows != m.cols {
        return Err(Error::NotSquare {
            op: "sym_eig",
            rows: m.rows,
            cols: m.cols,
        });
    }
    let defect = m.symmetry_defect();
    if defect > 1e-9 * m.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { defect });
    }
    let n = m.rows;
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
    let mut v = Matrix::identity(n);
    let norm = frobenius_norm(&a);

    let off_diag = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.get(i, j) * a.get(i, j);
                }
            }
        }
        s.sqrt()
    };

    let mut converged = norm == 0.0;
    let mut sweeps = 0;
    while !converged {
        if off_diag(&a) <= JACOBI_TOL * norm {
            converged = true;
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps,
            residual: off_diag(&a),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps original index order for equal eigenvalues
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let mut values: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    for x in &mut values {
        if x.abs() <= EIG_ZERO_CLAMP * top {
            *x = 0.0;
        }
    }
    let vectors = Matrix::from_fn(n, n, |i, j| v.get(i, order[j]));
    Ok(EigenSpectrum { values, vectors })
}

/// Applies the rotation `A ← JᵀAJ`, `V ← VJ` in the (p, q) plane.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows;
    for k in 0..n {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

/// Log-softmax of a single row with max subtraction.
pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = row.iter().map(|&x| x - max).collect();
    let lse = shifted.iter().map(|&x| x.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|x| x - lse).collect()
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        out.row_mut(i).copy_from_slice(&softmax(logits.row(i)));
    }
    out
}

/// Sum over rows of `KL(softmax(p_row) ‖ softmax(q_row))`.
pub fn kl_rows(p_logits: &Matrix, q_logits: &Matrix) -> Result<f64> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_rows",
            left: p_logits.shape(),
            right: q_logits.shape(),
        });
    }
    let mut total = 0.0;
    for (p_row, q_row) in p_logits.row_iter().zip(q_logits.row_iter()) {
        total += kl_row(p_row, q_row);
    }
    Ok(total)
}

pub(crate) fn kl_row(p_row: &[f64], q_row: &[f64]) -> f64 {
    let log_p = log_softmax(p_row);
    let log_q = log_softmax(q_row);
    let kl: f64 = log_p.iter().zip(&log_q).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum();
    // round-off can leave a tiny negative
    kl.max(0.0)
}

/// Divides every row by `max(‖row‖₂, eps)`.
pub fn l2_normalize_rows(m: &Matrix, eps: f64) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows {
        let row = out.row_mut(i);
        let norm = dot(row, row).sqrt().max(eps);
        for x in row.iter_mut() {
            *x /= norm;
        }
    }
    out
}

/// Row norms of `m`.
pub fn row_norms(m: &Matrix) -> Vec<f64> {
    m.row_iter().map(|r| dot(r, r).sqrt()).collect()
}

/// `S_ij = cos(a_i, b_j)`.
pub fn cosine_sim_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim_matrix",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let an = l2_normalize_rows(a, NORM_EPS);
    let bn = l2_normalize_rows(b, NORM_EPS);
    matmul_nt(&an, &bn)
}

/// Norm floor used when normalizing embeddings.
pub const NORM_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_examples() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        let r = matmul(&Matrix::from_rows(&[[1.0, 0.0]]), &Matrix::from_rows(&[[0.0], [1.0]])).unwrap();
        assert_eq!(r, Matrix::from_rows(&[[0.0]]));
        let r = matmul(&m, &Matrix::from_rows(&[[5.0], [6.0]])).unwrap();
        assert_eq!(r, Matrix::from_rows(&[[17.0], [39.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let c = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let tn = matmul_tn(&a, &b).unwrap();
        let reference = matmul(&a.transpose(), &b).unwrap();
        assert!(tn.sub(&reference).unwrap().max_abs() < 1e-14);
        let nt = matmul_nt(&a, &c).unwrap();
        let reference = matmul(&a, &c.transpose()).unwrap();
        assert!(nt.sub(&reference).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn frobenius_examples() {
        assert!(close(frobenius_norm(&Matrix::identity(2)), 2f64.sqrt(), 1e-15));
        assert_eq!(frobenius_norm(&Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]])), 2.0);
        assert_eq!(frobenius_norm(&Matrix::from_rows(&[[3.0], [4.0]])), 5.0);
    }

    #[test]
    fn eig_of_diagonal() {
        let s = sym_eig(&Matrix::diag(&[1.0, 2.0, 0.0])).unwrap();
        assert_eq!(s.values, vec![2.0, 1.0, 0.0]);
        // permuted identity columns
        assert_eq!(s.vectors.get(1, 0).abs(), 1.0);
        assert_eq!(s.vectors.get(0, 1).abs(), 1.0);
        assert_eq!(s.vectors.get(2, 2).abs(), 1.0);
    }

    #[test]
    fn eig_of_rank_one() {
        let s = sym_eig(&Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]])).unwrap();
        assert!(close(s.values[0], 1.0, 1e-14));
        assert_eq!(s.values[1], 0.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = [s.vectors.get(0, 0), s.vectors.get(1, 0)];
        let v1 = [s.vectors.get(0, 1), s.vectors.get(1, 1)];
        assert!(close(v0[0].abs(), h, 1e-14) && close(v0[1], v0[0], 1e-14));
        assert!(close(v1[0].abs(), h, 1e-14) && close(v1[1], -v1[0], 1e-14));
    }

    #[test]
    fn eig_of_zero() {
        let s = sym_eig(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(s.values, vec![0.0; 3]);
        assert_orthonormal(&s.vectors, 1e-15);
    }

    #[test]
    fn eig_rejects_bad_input() {
        assert!(matches!(sym_eig(&Matrix::zeros(2, 3)), Err(Error::NotSquare { .. })));
        let m = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]);
        assert!(matches!(sym_eig(&m), Err(Error::NotSymmetric { .. })));
    }

    fn assert_orthonormal(v: &Matrix, tol: f64) {
        let g = matmul_tn(v, v).unwrap();
        let defect = g.sub(&Matrix::identity(v.cols())).unwrap().max_abs();
        assert!(defect <= tol, "orthonormality defect {defect}");
    }

    fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
        let n = rng.random_range(1..=d + 4);
        let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        matmul_tn(&x, &x).unwrap()
    }

    #[test]
    fn eig_invariants_on_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xE16);
        for trial in 0..1000 {
            // keep most trials small so the loop stays fast, with some large ones
            let d = if trial % 50 == 0 { 64 } else { rng.random_range(1..=16) };
            let m = random_psd(&mut rng, d);
            let s = sym_eig(&m).unwrap();
            assert!(s.values.windows(2).all(|w| w[0] >= w[1]));
            assert!(s.values.iter().all(|&x| x >= 0.0), "{:?}", s.values);
            assert_orthonormal(&s.vectors, 1e-8);
            let err = frobenius_norm(&s.reconstruct().sub(&m).unwrap());
            assert!(err <= 1e-8 * frobenius_norm(&m).max(1.0), "trial {trial}: {err}");
        }
    }

    #[test]
    fn eig_matches_singular_values_of_factor() {
        // Independent route: for M = XᵀX / ‖XᵀX‖_F, eigenvalues are σᵢ(X)² / ‖XᵀX‖_F.
        // σ(X)² are the eigenvalues of X Xᵀ, computed here by power iteration with
        // deflation rather than Jacobi.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (n, d) = (3, 5);
            let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
            let xtx = matmul_tn(&x, &x).unwrap();
            let scale = frobenius_norm(&xtx);
            let s = sym_eig(&xtx.scale(1.0 / scale)).unwrap();
            let mut small = matmul_nt(&x, &x).unwrap();
            let mut sq = Vec::new();
            for _ in 0..n {
                let mut v = vec![1.0; n];
                let mut lambda = 0.0;
                for _ in 0..2000 {
                    let w: Vec<f64> = small.row_iter().map(|r| dot(r, &v)).collect();
                    let norm = dot(&w, &w).sqrt();
                    lambda = norm;
                    v = w.iter().map(|x| x / norm).collect();
                }
                sq.push(lambda);
                small = Matrix::from_fn(n, n, |i, j| small.get(i, j) - lambda * v[i] * v[j]);
            }
            for (k, &l) in sq.iter().enumerate() {
                assert!(close(s.values[k], l / scale, 1e-9), "{} vs {}", s.values[k], l / scale);
            }
            assert!(s.values[n..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0], [1000.0, 1000.0], [1.0, 0.0]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert_eq!(s.row(1), &[0.5, 0.5]);
        assert!(close(s.get(2, 0), 0.73105858, 1e-8));
        assert!(close(s.get(2, 1), 0.26894142, 1e-8));
    }

    #[test]
    fn kl_examples() {
        let p = Matrix::from_rows(&[[0.3, -1.0, 2.0]]);
        assert_eq!(kl_rows(&p, &p).unwrap(), 0.0);
        assert_eq!(
            kl_rows(&Matrix::from_rows(&[[3.0]]), &Matrix::from_rows(&[[-7.0]])).unwrap(),
            0.0
        );
        let p = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let q = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        assert!(close(kl_rows(&p, &q).unwrap(), 0.92423431, 1e-8));
        assert!(kl_rows(&p, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize_rows(&Matrix::from_rows(&[[3.0, 4.0], [1.0, 0.0], [0.0, 0.0]]), 1e-12);
        assert!(close(n.get(0, 0), 0.6, 1e-15) && close(n.get(0, 1), 0.8, 1e-15));
        assert_eq!(n.row(1), &[1.0, 0.0]);
        assert_eq!(n.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn cosine_examples() {
        let a = Matrix::identity(3);
        assert_eq!(cosine_sim_matrix(&a, &a).unwrap(), Matrix::identity(3));
        let s = cosine_sim_matrix(&Matrix::from_rows(&[[1.0, 0.0]]), &Matrix::from_rows(&[[0.0, 1.0]])).unwrap();
        assert_eq!(s.get(0, 0), 0.0);
        let s = cosine_sim_matrix(&Matrix::from_rows(&[[1.0, 1.0]]), &Matrix::from_rows(&[[1.0, 0.0]])).unwrap();
        assert!(close(s.get(0, 0), std::f64::consts::FRAC_1_SQRT_2, 1e-8));
        assert!(cosine_sim_matrix(&Matrix::zeros(1, 2), &Matrix::zeros(1, 3)).is_err());
    }

    fn matrix_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
        (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-5.0f64..5.0, r * c).prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in matrix_strategy(6, 8)) {
            let s = softmax_rows(&m);
            for row in s.row_iter() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        // Dyadic entries and integer shifts keep `x + c` exact, which is the
        // setting where max subtraction gives bit-identical results.
        #[test]
        fn softmax_shift_invariant(ks in proptest::collection::vec(-64i32..64, 1..8), c in -1000i32..1000) {
            let row: Vec<f64> = ks.iter().map(|&k| k as f64 / 8.0).collect();
            let shifted: Vec<f64> = row.iter().map(|&x| x + c as f64).collect();
            prop_assert_eq!(softmax(&row), softmax(&shifted));
        }

        #[test]
        fn kl_non_negative(p in matrix_strategy(4, 5), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Matrix::from_fn(p.rows(), p.cols(), |_, _| rng.random_range(-5.0..5.0));
            prop_assert!(kl_rows(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(kl_rows(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn cosine_bounded(a in matrix_strategy(5, 4), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = Matrix::from_fn(3, a.cols(), |_, _| rng.random_range(-5.0..5.0));
            let s = cosine_sim_matrix(&a, &b).unwrap();
            prop_assert!(s.data().iter().all(|&x| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&x)));
        }
    }
}

//! Dense matrices, Cholesky factorisation and multivariate normal densities.
//!
//! Everything here works in `f64`. Matrices are small (state dimension is a
//! handful of entries), so the routines favour clarity over blocking.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Jitter added to the diagonal, in order, until a factorisation succeeds.
pub const JITTER_SCHEDULE: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Symmetry tolerance accepted by [`Gaussian::new`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive semi-definite (pivot {pivot:e})")]
    NotPsd { pivot: f64 },
    #[error("{op}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: matrix is not symmetric (asymmetry {asymmetry:e})")]
    NotSymmetric { op: &'static str, asymmetry: f64 },
}

fn check_dim(op: &'static str, expected: usize, found: usize) -> Result<(), LinalgError> {
    if expected == found {
        Ok(())
    } else {
        Err(LinalgError::DimensionMismatch {
            op,
            expected,
            found,
        })
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.as_ref().len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            let row = row.as_ref();
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        check_dim("Mat::from_vec", rows * cols, data.len())?;
        Ok(Mat { rows, cols, data })
    }

    /// Column vector `v` as an `n x 1` matrix.
    pub fn column(v: &[f64]) -> Self {
        Mat {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        for (i, &ui) in u.iter().enumerate() {
            for (j, &vj) in v.iter().enumerate() {
                m[(i, j)] = ui * vj;
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat, LinalgError> {
        check_dim("Mat::matmul", self.cols, other.rows)?;
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_dim("Mat::mul_vec", self.cols, v.len())?;
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn add(&self, other: &Mat) -> Result<Mat, LinalgError> {
        self.zip_with("Mat::add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat, LinalgError> {
        self.zip_with("Mat::sub", other, |a, b| a - b)
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Mat,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Mat, LinalgError> {
        check_dim(op, self.rows, other.rows)?;
        check_dim(op, self.cols, other.cols)?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// Adds `eps` to every diagonal entry in place.
    pub fn add_diagonal(&mut self, eps: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += eps;
        }
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetrize(&self) -> Mat {
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                let v = 0.5 * (self[(r, c)] + self[(c, r)]);
                out[(r, c)] = v;
                out[(c, r)] = v;
            }
        }
        out
    }

    /// Largest `|M[i,j] - M[j,i]|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)]).abs());
            }
        }
        worst
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Attempts a plain Cholesky factorisation of `m + jitter·I`.
/// On failure returns the first non-positive pivot.
fn cholesky_with_jitter(m: &Mat, jitter: f64) -> Result<Mat, f64> {
    let n = m.rows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut pivot = m[(j, j)] + jitter;
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        // also rejects NaN
        if !(pivot > 0.0) {
            return Err(pivot);
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Lower-triangular `L` with `L Lᵀ = m`, escalating diagonal jitter through
/// [`JITTER_SCHEDULE`] when `m` is only semi-definite. Reads the lower
/// triangle of `m`.
pub fn cholesky(m: &Mat) -> Result<Mat, LinalgError> {
    check_dim("cholesky", m.rows(), m.cols())?;
    let mut worst = f64::NAN;
    for &jitter in &JITTER_SCHEDULE {
        match cholesky_with_jitter(m, jitter) {
            Ok(l) => return Ok(l),
            Err(p) => worst = p,
        }
    }
    Err(LinalgError::NotPsd { pivot: worst })
}

/// Solves `L y = b` for lower-triangular `L`, column by column.
pub fn solve_lower(l: &Mat, b: &Mat) -> Result<Mat, LinalgError> {
    check_dim("solve_lower", l.rows(), b.rows())?;
    let n = l.rows();
    let mut y = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = y[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * y[(k, c)];
            }
            y[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(y)
}

/// Solves `Lᵀ x = y` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Mat, y: &Mat) -> Result<Mat, LinalgError> {
    check_dim("solve_lower_transpose", l.rows(), y.rows())?;
    let n = l.rows();
    let mut x = y.clone();
    for c in 0..y.cols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Solves `m · X = b` for symmetric positive semi-definite `m`.
pub fn solve_psd(m: &Mat, b: &Mat) -> Result<Mat, LinalgError> {
    check_dim("solve_psd", m.rows(), b.rows())?;
    let l = cholesky(m)?;
    solve_lower_transpose(&l, &solve_lower(&l, b)?)
}

/// `ln det m` for a PSD matrix, via its Cholesky factor.
pub fn log_det_psd(m: &Mat) -> Result<f64, LinalgError> {
    let l = cholesky(m)?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Log-density of `N(mean, cov)` at `x`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], cov: &Mat) -> Result<f64, LinalgError> {
    let d = x.len();
    check_dim("gaussian_logpdf", d, mean.len())?;
    check_dim("gaussian_logpdf", d, cov.rows())?;
    check_dim("gaussian_logpdf", d, cov.cols())?;
    if d == 0 {
        return Ok(0.0);
    }
    let l = cholesky(cov)?;
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let z = solve_lower(&l, &Mat::column(&diff))?;
    let maha: f64 = z.as_slice().iter().map(|v| v * v).sum();
    let half_log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
    Ok(-0.5 * maha - half_log_det - 0.5 * d as f64 * (2.0 * PI).ln())
}

/// Multivariate normal with dense covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub cov: Mat,
}

impl Gaussian {
    /// Validates shapes, finiteness and symmetry. Positive semi-definiteness is
    /// checked lazily by whichever routine factorises the covariance.
    pub fn new(mean: Vec<f64>, cov: Mat) -> Result<Self, LinalgError> {
        check_dim("Gaussian::new", mean.len(), cov.rows())?;
        check_dim("Gaussian::new", mean.len(), cov.cols())?;
        if mean.iter().any(|v| !v.is_finite()) || !cov.is_finite() {
            return Err(LinalgError::NotPsd { pivot: f64::NAN });
        }
        let asym = cov.asymmetry();
        if asym > SYMMETRY_TOLERANCE * cov.max_abs().max(1.0) {
            return Err(LinalgError::NotSymmetric {
                op: "Gaussian::new",
                asymmetry: asym,
            });
        }
        Ok(Gaussian { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Gaussian {
            mean: vec![0.0; dim],
            cov: Mat::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64, LinalgError> {
        gaussian_logpdf(x, &self.mean, &self.cov)
    }
}

//! Dense real matrices and the handful of linear-algebra operations the rest
//! of the crate is built on.
//!
//! [`Matrix`] is a thin wrapper around a column-major `f64` matrix that
//! enforces two invariants at construction: dimensions are positive and every
//! entry is finite. Spectra are computed through a real Schur decomposition
//! and reported as [`Spectrum`], which keeps eigenvalues with multiplicity in
//! a deterministic order. Sign decisions (Hurwitz tests, rank thresholds)
//! are made against explicit tolerances rather than exact zero.

use nalgebra::{Complex, DMatrix, Schur, SVD};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Tolerance for sign decisions on computed eigenvalue real parts.
pub const SIGN_TOL: f64 = 1e-9;

/// Default relative threshold for singular-value based rank decisions.
pub const RANK_TOL: f64 = 1e-9;

/// Iteration cap for Schur and SVD decompositions. Non-convergence within the
/// cap is reported as an error, never silently truncated.
pub const ITER_CAP: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyDimensions { rows: usize, cols: usize },
    #[error("non-finite entry {value} at ({row}, {col})")]
    NonFiniteEntry { row: usize, col: usize, value: f64 },
    #[error("rows have inconsistent lengths: row {row} has {got} entries, expected {expected}")]
    RaggedRows { row: usize, got: usize, expected: usize },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {context} expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("matrix is not symmetric: max asymmetry {asymmetry:.3e} exceeds tolerance")]
    NotSymmetric { asymmetry: f64 },
    #[error("coefficient matrix is not Hurwitz (spectral abscissa {abscissa:.6e})")]
    NotHurwitz { abscissa: f64 },
    #[error("eigenvalue iteration did not converge within {cap} iterations")]
    EigenNonConvergence { cap: usize },
    #[error("singular-value iteration did not converge within {cap} iterations")]
    SvdNonConvergence { cap: usize },
    #[error("linear system is singular to working precision")]
    Singular,
}

/// Dense real matrix with finite entries and positive dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    inner: DMatrix<f64>,
}

/// Builds a [`Matrix`] from row literals. Panics if a literal is non-finite,
/// which cannot happen for constant expressions.
#[macro_export]
macro_rules! mat {
    ($([$($x:expr),+ $(,)?]),+ $(,)?) => {
        $crate::linalg::Matrix::from_rows(&[$(vec![$(($x) as f64),+]),+])
            .expect("matrix literal")
    };
}

impl Matrix {
    /// Builds a matrix from a row-major slice of entries.
    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Self, MatrixError> {
        if rows == 0 || cols == 0 {
            return Err(MatrixError::EmptyDimensions { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(MatrixError::ShapeMismatch {
                context: "from_row_major data length",
                expected: format!("{}", rows * cols),
                got: format!("{}", data.len()),
            });
        }
        let inner = DMatrix::from_row_slice(rows, cols, data);
        Self::checked(inner)
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatrixError> {
        if rows.is_empty() {
            return Err(MatrixError::EmptyDimensions { rows: 0, cols: 0 });
        }
        let cols = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(MatrixError::RaggedRows {
                    row: i,
                    got: r.len(),
                    expected: cols,
                });
            }
        }
        if cols == 0 {
            return Err(MatrixError::EmptyDimensions {
                rows: rows.len(),
                cols: 0,
            });
        }
        let inner = DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]);
        Self::checked(inner)
    }

    /// Builds a matrix by evaluating `f(row, col)` for every entry.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self, MatrixError> {
        if rows == 0 || cols == 0 {
            return Err(MatrixError::EmptyDimensions { rows, cols });
        }
        Self::checked(DMatrix::from_fn(rows, cols, f))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            inner: DMatrix::zeros(rows, cols),
        }
    }

    pub fn identity(n: usize) -> Self {
        assert!(n > 0, "matrix dimensions must be positive");
        Self {
            inner: DMatrix::identity(n, n),
        }
    }

    /// Square matrix with `diag` on the main diagonal.
    pub fn from_diagonal(diag: &[f64]) -> Result<Self, MatrixError> {
        Self::from_fn(diag.len(), diag.len(), |i, j| {
            if i == j {
                diag[i]
            } else {
                0.0
            }
        })
    }

    fn checked(inner: DMatrix<f64>) -> Result<Self, MatrixError> {
        for j in 0..inner.ncols() {
            for i in 0..inner.nrows() {
                let v = inner[(i, j)];
                if !v.is_finite() {
                    return Err(MatrixError::NonFiniteEntry {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
        }
        Ok(Self { inner })
    }

    pub(crate) fn from_dmatrix(inner: DMatrix<f64>) -> Self {
        debug_assert!(inner.iter().all(|v| v.is_finite()));
        Self { inner }
    }

    pub(crate) fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn rows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn cols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.inner[(row, col)]
    }

    /// Entries in row-major order.
    pub fn row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows() * self.cols());
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                out.push(self.inner[(i, j)]);
            }
        }
        out
    }

    /// Entries as nested rows, convenient for serialization.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows())
            .map(|i| (0..self.cols()).map(|j| self.inner[(i, j)]).collect())
            .collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix {
            inner: self.inner.transpose(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            inner: &self.inner * s,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.inner.norm()
    }

    pub fn max_abs(&self) -> f64 {
        self.inner.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Maximum absolute asymmetry `max |m_ij - m_ji|`. Zero for non-square
    /// input makes no sense, so the matrix must be square.
    pub fn asymmetry(&self) -> f64 {
        assert!(self.is_square(), "asymmetry requires a square matrix");
        let n = self.rows();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.inner[(i, j)] - self.inner[(j, i)]).abs());
            }
        }
        worst
    }

    /// Symmetric part `(M + M^T) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        Matrix {
            inner: (&self.inner + self.inner.transpose()) * 0.5,
        }
    }

    pub fn try_inverse(&self) -> Option<Matrix> {
        self.inner.clone().try_inverse().map(|inner| Matrix { inner })
    }

    /// Horizontal concatenation `[left, right]`.
    pub fn hstack(&self, right: &Matrix) -> Matrix {
        assert_eq!(self.rows(), right.rows(), "hstack row mismatch");
        let inner = DMatrix::from_fn(self.rows(), self.cols() + right.cols(), |i, j| {
            if j < self.cols() {
                self.inner[(i, j)]
            } else {
                right.inner[(i, j - self.cols())]
            }
        });
        Matrix { inner }
    }

    /// Vertical concatenation `[top; bottom]`.
    pub fn vstack(&self, bottom: &Matrix) -> Matrix {
        assert_eq!(self.cols(), bottom.cols(), "vstack column mismatch");
        let inner = DMatrix::from_fn(self.rows() + bottom.rows(), self.cols(), |i, j| {
            if i < self.rows() {
                self.inner[(i, j)]
            } else {
                bottom.inner[(i - self.rows(), j)]
            }
        });
        Matrix { inner }
    }

    /// Assembles `[[a, b], [c, d]]` from conformable blocks.
    pub fn block2x2(a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix) -> Matrix {
        a.hstack(b).vstack(&c.hstack(d))
    }

    /// Eigenvalues of the symmetric part, for definiteness checks. The input
    /// is symmetrized first, so callers pass matrices that are symmetric up
    /// to roundoff.
    pub fn symmetric_eigenvalues(&self) -> Vec<f64> {
        assert!(self.is_square(), "symmetric eigenvalues require a square matrix");
        let sym = self.symmetrized();
        let mut vals: Vec<f64> = sym
            .inner
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        vals
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cells: Vec<Vec<String>> = (0..self.rows())
            .map(|i| {
                (0..self.cols())
                    .map(|j| format!("{:.6}", self.inner[(i, j)]))
                    .collect()
            })
            .collect();
        let width = cells
            .iter()
            .flatten()
            .map(|s| s.len())
            .max()
            .unwrap_or(0);
        for row in &cells {
            write!(f, "[")?;
            for (j, cell) in row.iter().enumerate() {
                if j > 0 {
                    write!(f, " ")?;
                }
                write!(f, "{cell:>width$}")?;
            }
            writeln!(f, "]")?;
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.inner[idx]
    }
}

impl std::ops::Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            (self.rows(), self.cols()),
            (rhs.rows(), rhs.cols()),
            "matrix addition shape mismatch"
        );
        Matrix {
            inner: &self.inner + &rhs.inner,
        }
    }
}

impl std::ops::Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            (self.rows(), self.cols()),
            (rhs.rows(), rhs.cols()),
            "matrix subtraction shape mismatch"
        );
        Matrix {
            inner: &self.inner - &rhs.inner,
        }
    }
}

impl std::ops::Mul for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            self.cols(),
            rhs.rows(),
            "matrix product shape mismatch: {}x{} * {}x{}",
            self.rows(),
            self.cols(),
            rhs.rows(),
            rhs.cols()
        );
        Matrix {
            inner: &self.inner * &rhs.inner,
        }
    }
}

impl std::ops::Neg for &Matrix {
    type Output = Matrix;
    fn neg(self) -> Matrix {
        Matrix {
            inner: -&self.inner,
        }
    }
}

/// Eigenvalue list with multiplicity, ordered by real part then imaginary
/// part, together with the tolerance used for containment queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    values: Vec<(f64, f64)>,
    tolerance: f64,
}

impl Spectrum {
    fn from_complex(mut values: Vec<Complex<f64>>) -> Self {
        values.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        Spectrum {
            values: values.into_iter().map(|z| (z.re, z.im)).collect(),
            tolerance: SIGN_TOL,
        }
    }

    pub fn values(&self) -> Vec<Complex<f64>> {
        self.values
            .iter()
            .map(|&(re, im)| Complex::new(re, im))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        assert!(tolerance >= 0.0 && tolerance.is_finite());
        self.tolerance = tolerance;
        self
    }

    /// Smallest real part over the spectrum.
    pub fn min_real(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.0)
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest real part over the spectrum (the spectral abscissa).
    pub fn max_real(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.0)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// True if `z` matches some eigenvalue within the containment tolerance.
    pub fn contains(&self, z: Complex<f64>) -> bool {
        self.values
            .iter()
            .any(|&(re, im)| (Complex::new(re, im) - z).norm() <= self.tolerance)
    }

    /// Multiset equality against another spectrum within `tol`, by greedy
    /// nearest matching. Adequate when `tol` is small against eigenvalue
    /// separation, which is how it is used in tests and diagnostics.
    pub fn multiset_eq(&self, other: &Spectrum, tol: f64) -> bool {
        if self.len() != other.len() {
            return false;
        }
        let mine = self.values();
        let mut theirs = other.values();
        for z in mine {
            let best = theirs
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - z).norm().total_cmp(&(b.1 - z).norm()));
            match best {
                Some((idx, w)) if (w - z).norm() <= tol => {
                    theirs.swap_remove(idx);
                }
                _ => return false,
            }
        }
        true
    }
}

/// Kronecker product `a (x) b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
    let inner = DMatrix::from_fn(ar * br, ac * bc, |i, j| {
        a.inner[(i / br, j / bc)] * b.inner[(i % br, j % bc)]
    });
    Matrix { inner }
}

/// Full eigenvalue list of a square matrix via real Schur iteration.
pub fn eigenvalues(m: &Matrix) -> Result<Spectrum, MatrixError> {
    eigenvalues_with_cap(m, ITER_CAP)
}

/// As [`eigenvalues`], with an explicit iteration cap.
///
/// The QR iteration can stall on rare inputs. Before giving up, the matrix is
/// rebalanced (a similarity by powers of two, so the spectrum is bit-exact)
/// and the transpose is tried, which walks a different iteration path through
/// the same spectrum.
pub fn eigenvalues_with_cap(m: &Matrix, cap: usize) -> Result<Spectrum, MatrixError> {
    if !m.is_square() {
        return Err(MatrixError::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let mut candidates = vec![m.inner.clone()];
    let balanced = balance(&m.inner);
    candidates.push(balanced.transpose());
    candidates.push(balanced);
    for candidate in candidates {
        if let Some(schur) = Schur::try_new(candidate, f64::EPSILON, cap) {
            let (_, t) = schur.unpack();
            return Ok(Spectrum::from_complex(quasi_triangular_eigenvalues(&t)));
        }
    }
    Err(MatrixError::EigenNonConvergence { cap })
}

/// Eigenvalues of a real quasi upper-triangular matrix. The deflated
/// subdiagonal entries are exact zeros, so a nonzero one marks a 2x2 block,
/// which is resolved by the quadratic formula in either sign of the
/// discriminant. (The stock extraction assumes such blocks always hold a
/// complex pair and returns NaN for a defective real pair.)
fn quasi_triangular_eigenvalues(t: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let n = t.nrows();
    let mut vals = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 >= n || t[(i + 1, i)] == 0.0 {
            vals.push(Complex::new(t[(i, i)], 0.0));
            i += 1;
            continue;
        }
        let (a, b) = (t[(i, i)], t[(i, i + 1)]);
        let (c, d) = (t[(i + 1, i)], t[(i + 1, i + 1)]);
        let mean = 0.5 * (a + d);
        let disc = 0.25 * (a - d) * (a - d) + b * c;
        if disc >= 0.0 {
            let q = disc.sqrt();
            vals.push(Complex::new(mean - q, 0.0));
            vals.push(Complex::new(mean + q, 0.0));
        } else {
            let w = (-disc).sqrt();
            vals.push(Complex::new(mean, -w));
            vals.push(Complex::new(mean, w));
        }
        i += 2;
    }
    vals
}

/// Parlett-Reinsch balancing: diagonal similarity scaling by powers of two
/// that evens out row and column norms. Exact in floating point.
fn balance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    loop {
        let mut converged = true;
        for i in 0..n {
            let mut c: f64 = (0..n).filter(|&j| j != i).map(|j| a[(j, i)].abs()).sum();
            let mut r: f64 = (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum();
            if c == 0.0 || r == 0.0 || !(c.is_finite() && r.is_finite()) {
                continue;
            }
            let total = c + r;
            let mut f = 1.0;
            while c < r / 2.0 {
                c *= 2.0;
                r /= 2.0;
                f *= 2.0;
            }
            while c >= r * 2.0 {
                c /= 2.0;
                r *= 2.0;
                f /= 2.0;
            }
            if c + r < 0.95 * total {
                converged = false;
                for j in 0..n {
                    a[(i, j)] /= f;
                    a[(j, i)] *= f;
                }
            }
        }
        if converged {
            return a;
        }
    }
}

/// Numerical rank by singular values: the count of `sigma > tol * sigma_max`.
pub fn rank(m: &Matrix, tol: f64) -> Result<usize, MatrixError> {
    assert!(tol >= 0.0 && tol.is_finite(), "rank tolerance must be non-negative");
    let svd = SVD::try_new(m.inner.clone(), false, false, f64::EPSILON, ITER_CAP)
        .ok_or(MatrixError::SvdNonConvergence { cap: ITER_CAP })?;
    let smax = svd
        .singular_values
        .iter()
        .fold(0.0f64, |acc, s| acc.max(*s));
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(svd
        .singular_values
        .iter()
        .filter(|&&s| s > tol * smax)
        .count())
}

/// True when every eigenvalue satisfies `Re(lambda) < -margin`, decided with
/// the [`SIGN_TOL`] guard band. Values within the band of the threshold count
/// as failing, so a marginally stable matrix is never reported Hurwitz.
pub fn is_hurwitz(m: &Matrix, margin: f64) -> Result<bool, MatrixError> {
    assert!(margin >= 0.0 && margin.is_finite(), "margin must be non-negative");
    let spectrum = eigenvalues(m)?;
    Ok(spectrum.max_real() < -margin - SIGN_TOL)
}

/// Spectral abscissa `max Re(lambda)`.
pub fn spectral_abscissa(m: &Matrix) -> Result<f64, MatrixError> {
    Ok(eigenvalues(m)?.max_real())
}

/// Solves the continuous-time Lyapunov equation `A^T X + X A = -Q` for
/// symmetric `Q` and Hurwitz `A`, by LU on the Kronecker form
/// `(I (x) A^T + A^T (x) I) vec(X) = -vec(Q)`. The result is symmetrized.
pub fn solve_lyapunov(a: &Matrix, q: &Matrix) -> Result<Matrix, MatrixError> {
    if !a.is_square() {
        return Err(MatrixError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if q.rows() != a.rows() || !q.is_square() {
        return Err(MatrixError::ShapeMismatch {
            context: "lyapunov right-hand side",
            expected: format!("{}x{}", a.rows(), a.rows()),
            got: format!("{}x{}", q.rows(), q.cols()),
        });
    }
    let scale = q.max_abs().max(1.0);
    let asymmetry = q.asymmetry();
    if asymmetry > 1e-9 * scale {
        return Err(MatrixError::NotSymmetric { asymmetry });
    }
    let abscissa = spectral_abscissa(a)?;
    if abscissa >= -SIGN_TOL {
        return Err(MatrixError::NotHurwitz { abscissa });
    }

    let n = a.rows();
    let at = a.transpose();
    let id = Matrix::identity(n);
    let coeff = &kron(&id, &at) + &kron(&at, &id);
    // nalgebra stores column-major, so as_slice is exactly vec(Q).
    let rhs = nalgebra::DVector::from_column_slice(q.inner.as_slice()).scale(-1.0);
    let lu = coeff.inner.lu();
    let sol = lu.solve(&rhs).ok_or(MatrixError::Singular)?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok(Matrix::from_dmatrix(x).symmetrized())
}

/// Real block embedding `[[X, -Y], [Y, X]]` of the complex matrix `X + iY`.
/// Its spectrum is the union of the complex matrix's spectrum and the
/// conjugate spectrum, so Hurwitz and rank questions about complex matrices
/// reduce to real ones (complex rank is half the embedded rank).
pub fn realify_complex(x: &Matrix, y: &Matrix) -> Matrix {
    assert_eq!(
        (x.rows(), x.cols()),
        (y.rows(), y.cols()),
        "realify_complex parts must share shape"
    );
    Matrix::block2x2(x, &-y, y, x)
}

//! Ordinary least squares with intercept, R² scoring and lower-triangle
//! vectorization.
//!
//! The design `[X | 1]` is reduced by Householder QR and the triangular
//! factor is diagonalized by one-sided Jacobi rotations, giving a singular
//! value decomposition. Solutions are minimum-norm: singular values below
//! [`SINGULAR_CUTOFF`] times the largest are treated as zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::num::{mean, Real};

/// Relative singular-value cutoff used to decide the numerical rank.
pub const SINGULAR_CUTOFF: f64 = 1e-10;

const MAX_SWEEPS: usize = 80;

/// Entries `(i, j)` with `j <= i`, row by row. Diagonal included.
pub fn lower_tri_flatten<T: Copy>(matrix: &Matrix<T>) -> Result<Vec<T>> {
    if !matrix.is_square() {
        return Err(Error::NotSquare(format!("{}x{}", matrix.rows(), matrix.cols())));
    }
    let n = matrix.rows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        out.extend_from_slice(&matrix.row(i)[..=i]);
    }
    Ok(out)
}

/// Concatenates per-sentence vectors; callers pass them in ascending sentence order.
pub fn concat_sentences<T: Copy>(vectors: &[Vec<T>]) -> Vec<T> {
    vectors.iter().flat_map(|v| v.iter().copied()).collect()
}

/// Regressors, one row per observation.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
    pub feature_names: Vec<String>,
}

impl<T: Real> DesignMatrix<T> {
    /// Row-major values.
    pub fn new(rows: usize, cols: usize, values: Vec<T>, feature_names: Vec<String>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid(format!("design must be at least 1x1, got {rows}x{cols}")));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} design", values.len())));
        }
        if feature_names.len() != cols {
            return Err(Error::Shape(format!("{} names for {cols} features", feature_names.len())));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("design matrix".into()));
        }
        Ok(Self { rows, cols, values, feature_names })
    }

    pub fn from_columns(columns: &[Vec<T>], feature_names: Vec<String>) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::Shape("columns of unequal length".into()));
        }
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            values.extend(columns.iter().map(|c| c[i]));
        }
        Self::new(rows, cols, values, feature_names)
    }

    /// Unnamed features `x0, x1, ...`.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("rows of unequal length".into()));
        }
        let values = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, values, (0..cols).map(|k| format!("x{k}")).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, k: usize) -> T {
        self.values[i * self.cols + k]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, k: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, k)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FitWarning {
    /// `[X | 1]` has numerical rank below its column count; weights are minimum-norm.
    RankDeficient { rank: usize, cols: usize },
    /// The target is constant; R² is defined as 0.
    ZeroVarianceTarget,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult<T> {
    pub weights: Vec<T>,
    pub intercept: T,
    /// Training R², in `[0, 1]`.
    pub r2: T,
    /// Numerical rank of `[X | 1]`.
    pub rank: usize,
    pub warnings: Vec<FitWarning>,
}

/// `1 - SS_res / SS_tot`; zero when the target has no variance. Not clamped,
/// so predictions worse than the mean give negative values.
pub fn r_squared<T: Real>(y: &[T], y_hat: &[T]) -> Result<T> {
    if y.len() != y_hat.len() {
        return Err(Error::DimensionMismatch(format!("{} targets vs {} predictions", y.len(), y_hat.len())));
    }
    if y.len() < 2 {
        return Err(Error::Invalid("R² needs at least two observations".into()));
    }
    let (ss_res, ss_tot) = sums_of_squares(y, y_hat);
    if ss_tot == T::zero() {
        return Ok(T::zero());
    }
    Ok(T::one() - ss_res / ss_tot)
}

fn sums_of_squares<T: Real>(y: &[T], y_hat: &[T]) -> (T, T) {
    let m = mean(y);
    let ss_res = y.iter().zip(y_hat).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let ss_tot = y.iter().map(|&a| (a - m) * (a - m)).sum();
    (ss_res, ss_tot)
}

/// Factorization of `[X | 1]`, reusable for any number of targets.
#[derive(Clone, Debug)]
pub struct LeastSquares<T> {
    n: usize,
    p: usize,
    /// Augmented design, column-major, for fitted values.
    columns: Vec<Vec<T>>,
    /// Householder vectors (each of length `n - k`) when QR was applied.
    reflectors: Vec<Vec<T>>,
    /// Left singular vectors of the reduced matrix, as columns; `None` where sigma is cut.
    left: Vec<Option<Vec<T>>>,
    sigma: Vec<T>,
    /// Right singular vectors, as columns of length `p + 1`.
    right: Vec<Vec<T>>,
    rank: usize,
}

impl<T: Real> LeastSquares<T> {
    pub fn new(design: &DesignMatrix<T>) -> Result<Self> {
        let (n, p) = (design.rows(), design.cols());
        if n < 2 {
            return Err(Error::Invalid(format!("need at least 2 observations, got {n}")));
        }
        let m = p + 1;
        let mut columns: Vec<Vec<T>> = (0..p).map(|k| design.column(k)).collect();
        columns.push(vec![T::one(); n]);

        let (reflectors, mut work) = if n >= m {
            let (refl, r) = householder_qr(&columns);
            (refl, r)
        } else {
            (Vec::new(), columns.clone())
        };
        let right = jacobi_svd(&mut work);
        let sigma: Vec<T> = work.iter().map(|c| norm(c)).collect();
        let max_sigma = sigma.iter().copied().fold(T::zero(), T::max);
        let cut = max_sigma * T::lit(SINGULAR_CUTOFF);
        let mut rank = 0;
        let left = work
            .into_iter()
            .zip(&sigma)
            .map(|(c, &s)| {
                if s > cut && s > T::zero() {
                    rank += 1;
                    Some(c.into_iter().map(|x| x / s).collect())
                } else {
                    None
                }
            })
            .collect();
        Ok(Self { n, p, columns, reflectors, left, sigma, right, rank })
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn n_features(&self) -> usize {
        self.p
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Minimum-norm least-squares fit of `y` on the factored design.
    pub fn fit(&self, y: &[T]) -> Result<FitResult<T>> {
        if y.len() != self.n {
            return Err(Error::DimensionMismatch(format!("{} targets for {} observations", y.len(), self.n)));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regression target".into()));
        }
        let m = self.p + 1;
        // Q^T y restricted to the reduced space
        let rhs: Vec<T> = if self.reflectors.is_empty() {
            y.to_vec()
        } else {
            let mut qty = y.to_vec();
            for (k, v) in self.reflectors.iter().enumerate() {
                apply_reflector(v, &mut qty[k..]);
            }
            qty.truncate(m);
            qty
        };
        let mut solution = vec![T::zero(); m];
        for (k, u) in self.left.iter().enumerate() {
            let Some(u) = u else { continue };
            let coef = dot(u, &rhs) / self.sigma[k];
            for (s, &v) in solution.iter_mut().zip(&self.right[k]) {
                *s = *s + coef * v;
            }
        }
        let mut fitted = vec![T::zero(); self.n];
        for (col, &w) in self.columns.iter().zip(&solution) {
            for (f, &x) in fitted.iter_mut().zip(col) {
                *f = *f + w * x;
            }
        }
        let (ss_res, ss_tot) = sums_of_squares(y, &fitted);
        let mut warnings = Vec::new();
        if self.rank < m {
            warnings.push(FitWarning::RankDeficient { rank: self.rank, cols: m });
        }
        let r2 = if ss_tot == T::zero() {
            warnings.push(FitWarning::ZeroVarianceTarget);
            T::zero()
        } else {
            (T::one() - ss_res / ss_tot).max(T::zero()).min(T::one())
        };
        let intercept = solution.pop().expect("intercept column");
        Ok(FitResult { weights: solution, intercept, r2, rank: self.rank, warnings })
    }
}

/// Fits `y ≈ X w + b`.
pub fn ols_fit<T: Real>(x: &DesignMatrix<T>, y: &[T]) -> Result<FitResult<T>> {
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} design rows vs {} targets", x.rows(), y.len())));
    }
    LeastSquares::new(x)?.fit(y)
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm<T: Real>(a: &[T]) -> T {
    // scaled to avoid overflow on large counts
    let scale = a.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    if scale == T::zero() {
        return T::zero();
    }
    let ss: T = a.iter().map(|&x| (x / scale) * (x / scale)).sum();
    scale * ss.sqrt()
}

/// `x <- (I - 2 v v^T / v^T v) x`; `v` is stored unnormalized.
fn apply_reflector<T: Real>(v: &[T], x: &mut [T]) {
    let vv = dot(v, v);
    if vv == T::zero() {
        return;
    }
    let f = T::lit(2.0) * dot(v, &x[..v.len()]) / vv;
    for (xi, &vi) in x.iter_mut().zip(v) {
        *xi = *xi - f * vi;
    }
}

/// Householder QR of an `n x m` matrix (`n >= m`) given by columns.
/// Returns the reflectors and the `m x m` factor R as columns.
fn householder_qr<T: Real>(columns: &[Vec<T>]) -> (Vec<Vec<T>>, Vec<Vec<T>>) {
    let m = columns.len();
    let mut a: Vec<Vec<T>> = columns.to_vec();
    let mut reflectors = Vec::with_capacity(m);
    for k in 0..m {
        let x = &a[k][k..];
        let alpha = norm(x);
        let mut v = x.to_vec();
        if alpha > T::zero() {
            let sign = if v[0] >= T::zero() { T::one() } else { -T::one() };
            v[0] = v[0] + sign * alpha;
        } else {
            v.iter_mut().for_each(|e| *e = T::zero());
        }
        for col in a.iter_mut().skip(k) {
            apply_reflector(&v, &mut col[k..]);
        }
        reflectors.push(v);
    }
    let r = a
        .into_iter()
        .enumerate()
        .map(|(j, col)| {
            let mut c = col[..m].to_vec();
            // below-diagonal entries are zero up to rounding
            c.iter_mut().skip(j + 1).for_each(|e| *e = T::zero());
            c
        })
        .collect();
    (reflectors, r)
}

/// One-sided Jacobi: rotates the columns of `b` in place until they are
/// mutually orthogonal and returns the accumulated rotation (columns of V).
fn jacobi_svd<T: Real>(b: &mut [Vec<T>]) -> Vec<Vec<T>> {
    let m = b.len();
    let mut v: Vec<Vec<T>> = (0..m).map(|k| (0..m).map(|i| if i == k { T::one() } else { T::zero() }).collect()).collect();
    let eps = T::epsilon();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..m {
            for q in p + 1..m {
                let alpha = dot(&b[p], &b[p]);
                let beta = dot(&b[q], &b[q]);
                let gamma = dot(&b[p], &b[q]);
                if alpha == T::zero() || beta == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(b, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    v
}

fn rotate<T: Real>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

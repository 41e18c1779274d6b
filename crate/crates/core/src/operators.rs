//! Dense linear operators and sign-constrained least squares.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::convex::RealVec;
use crate::error::{check_dim, Error, Result};

/// Smallest admissible ratio of the diagonal of R in a column-block QR.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct LinOp {
    matrix: DMatrix<f64>,
}

impl LinOp {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::InvalidInput("operator must have at least one row and column".into()));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("operator has non-finite entries".into()));
        }
        Ok(LinOp { matrix })
    }

    pub fn identity(n: usize) -> Self {
        LinOp {
            matrix: DMatrix::identity(n, n),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: bad.len(),
            });
        }
        LinOp::new(DMatrix::from_fn(m, n, |i, j| rows[i][j]))
    }

    /// Number of data rows `M`.
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    /// Number of signal columns `N`.
    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn apply(&self, u: &RealVec) -> Result<RealVec> {
        check_dim(self.cols(), u.len())?;
        Ok(&self.matrix * u)
    }

    pub fn apply_adjoint(&self, w: &RealVec) -> Result<RealVec> {
        check_dim(self.rows(), w.len())?;
        Ok(self.matrix.tr_mul(w))
    }

    /// Estimate of `‖K‖²` (largest eigenvalue of `KᵀK`) by power iteration.
    pub fn op_norm_squared(&self) -> f64 {
        let n = self.cols();
        // Deterministic start with no exact orthogonality to typical
        // singular vectors.
        let mut x = RealVec::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7919 % 101) as f64 / 101.0));
        x /= x.norm();
        let mut lambda = 0.0;
        for _ in 0..1000 {
            let y = self.matrix.tr_mul(&(&self.matrix * &x));
            let norm = y.norm();
            if norm == 0.0 {
                return 0.0;
            }
            let next = x.dot(&y);
            x = y / norm;
            if (next - lambda).abs() <= 1e-12 * next.abs() {
                lambda = next;
                break;
            }
            lambda = next;
        }
        lambda
    }

    /// Columns listed in `idx`, in that order.
    pub fn columns(&self, idx: &[usize]) -> DMatrix<f64> {
        self.matrix.select_columns(idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn of(x: f64) -> Option<Sign> {
        if x > 0.0 {
            Some(Sign::Plus)
        } else if x < 0.0 {
            Some(Sign::Minus)
        } else {
            None
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// Index set with a prescribed sign on every member.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedSupport {
    signs: BTreeMap<usize, Sign>,
}

impl SignedSupport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, Sign)>) -> Self {
        SignedSupport {
            signs: pairs.into_iter().collect(),
        }
    }

    /// Support and signs of the nonzero entries of `u`.
    pub fn of_vector(u: &RealVec) -> Self {
        Self::from_pairs(u.iter().enumerate().filter_map(|(i, &x)| Sign::of(x).map(|s| (i, s))))
    }

    pub fn insert(&mut self, i: usize, s: Sign) {
        self.signs.insert(i, s);
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn sign(&self, i: usize) -> Option<Sign> {
        self.signs.get(&i).copied()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.signs.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Sign)> + '_ {
        self.signs.iter().map(|(&i, &s)| (i, s))
    }

    pub fn max_index(&self) -> Option<usize> {
        self.signs.keys().next_back().copied()
    }
}

/// Least squares on a column block via QR, failing on numerical rank loss.
pub(crate) fn qr_least_squares(a: &DMatrix<f64>, b: &RealVec) -> Result<RealVec> {
    let (m, n) = a.shape();
    if n == 0 {
        return Ok(RealVec::zeros(0));
    }
    if n > m {
        return Err(Error::RankDeficient { ratio: 0.0 });
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..n).map(|i| r[(i, i)].abs()).collect();
    let largest = diag.iter().cloned().fold(0.0, f64::max);
    let smallest = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if largest == 0.0 || smallest <= RANK_TOL * largest {
        let ratio = if largest == 0.0 { 0.0 } else { smallest / largest };
        return Err(Error::RankDeficient { ratio });
    }
    let qtb = qr.q().tr_mul(b);
    r.solve_upper_triangular(&qtb).ok_or(Error::SingularSystem)
}

/// Minimizes `½‖Ku − f‖²` over vectors supported on `ss` whose nonzero
/// entries carry the prescribed signs.
///
/// After flipping columns by their signs this is a nonnegative least squares
/// problem, solved with the Lawson–Hanson active-set loop. Each inner solve
/// is a QR least-squares fit on the current free columns.
pub fn sign_constrained_lsq(k: &LinOp, f: &RealVec, ss: &SignedSupport) -> Result<RealVec> {
    check_dim(k.rows(), f.len())?;
    if let Some(i) = ss.max_index() {
        if i >= k.cols() {
            return Err(Error::DimensionMismatch {
                expected: k.cols(),
                got: i + 1,
            });
        }
    }
    let idx = ss.indices();
    let signs: Vec<f64> = ss.iter().map(|(_, s)| s.value()).collect();
    let mut a = k.columns(&idx);
    for (j, s) in signs.iter().enumerate() {
        if *s < 0.0 {
            a.column_mut(j).neg_mut();
        }
    }
    // The whole block must have full column rank, not only the columns the
    // active-set loop happens to free.
    qr_least_squares(&a, f)?;
    let x = nnls(&a, f)?;
    let mut u = RealVec::zeros(k.cols());
    for (j, &i) in idx.iter().enumerate() {
        u[i] = signs[j] * x[j];
    }
    Ok(u)
}

fn nnls(a: &DMatrix<f64>, b: &RealVec) -> Result<RealVec> {
    let n = a.ncols();
    let mut x = RealVec::zeros(n);
    let mut passive = vec![false; n];
    if n == 0 {
        return Ok(x);
    }
    let scale = a.norm() * b.norm();
    let tol = 1e-13 * scale.max(f64::MIN_POSITIVE);
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let grad = a.tr_mul(&(b - a * &x));
        let entering = (0..n)
            .filter(|&j| !passive[j] && grad[j] > tol)
            .max_by(|&i, &j| grad[i].total_cmp(&grad[j]));
        let Some(j) = entering else {
            return Ok(x);
        };
        passive[j] = true;

        for _ in 0..=n {
            let cols: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let z_p = qr_least_squares(&a.select_columns(&cols), b)?;
            let mut z = RealVec::zeros(n);
            for (c, &i) in cols.iter().enumerate() {
                z[i] = z_p[c];
            }
            if cols.iter().all(|&i| z[i] > 0.0) {
                x = z;
                break;
            }
            // Step toward z until the first free coordinate hits zero.
            let (blocking, step) = cols
                .iter()
                .filter(|&&i| z[i] <= 0.0)
                .map(|&i| (i, x[i] / (x[i] - z[i])))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("some free coordinate is nonpositive");
            x += (z - &x) * step;
            x[blocking] = 0.0;
            let floor = 1e-14 * x.amax();
            for &i in &cols {
                if x[i] <= floor {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    Err(Error::NonConvergence(max_outer))
}

//! Quadratic-fidelity variational regularization
//! `min_u ½‖Ku − f‖² + α R(u)`, its optimality certificates, the exact
//! three-term error identity between two data sets, and source-condition
//! convergence-rate experiments.
//!
//! Every solution carries the dual witness `w = (f − Ku)/α` and the
//! subgradient `p = K*w`, so `p ∈ ∂R(u)` is exactly the optimality condition
//! and `kkt_residual` measures how far it is from holding.

use rayon::prelude::*;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::convex::{sign0, symmetric_bregman, tv_dual_potential, Functional, RealVec, SubgradientPair};
use crate::error::{check_dim, Error, Result};
use crate::lasso::Lasso;
use crate::operators::{LinOp, SignedSupport, RANK_TOL};
use crate::rng;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200_000;

#[derive(Clone, Debug)]
pub struct RegProblem {
    pub k: LinOp,
    pub f: RealVec,
    pub alpha: f64,
    pub r: Functional,
}

impl RegProblem {
    pub fn new(k: LinOp, f: RealVec, alpha: f64, r: Functional) -> Result<Self> {
        check_dim(k.rows(), f.len())?;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
        }
        if f.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("data contains non-finite entries".into()));
        }
        r.validate(k.cols())?;
        Ok(RegProblem { k, f, alpha, r })
    }

    /// Same operator, weight and regularizer with different data.
    pub fn with_data(&self, f: RealVec) -> Result<Self> {
        RegProblem::new(self.k.clone(), f, self.alpha, self.r.clone())
    }

    pub fn objective(&self, u: &RealVec) -> Result<f64> {
        let res = self.k.apply(u)? - &self.f;
        Ok(0.5 * res.norm_squared() + self.alpha * self.r.eval(u)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegSolution {
    #[serde(with = "crate::io::vec_serde")]
    pub u: RealVec,
    #[serde(with = "crate::io::vec_serde")]
    pub p: RealVec,
    #[serde(with = "crate::io::vec_serde")]
    pub w: RealVec,
    pub objective: f64,
    pub kkt_residual: f64,
    pub certified: bool,
    pub iterations: usize,
}

impl RegSolution {
    pub fn pair(&self) -> SubgradientPair {
        SubgradientPair::new(self.u.clone(), self.p.clone())
    }

    /// Certifies against `max(tol, roundoff floor)`.
    fn from_primal(problem: &RegProblem, u: RealVec, tol: f64, iterations: usize) -> Result<Self> {
        let ku = problem.k.apply(&u)?;
        let w = (&problem.f - &ku) / problem.alpha;
        let p = problem.k.apply_adjoint(&w)?;
        let kkt_residual = kkt_residual(&problem.r, &u, &p)?;
        let objective = 0.5 * (&ku - &problem.f).norm_squared() + problem.alpha * problem.r.eval(&u)?;
        Ok(RegSolution {
            u,
            p,
            w,
            objective,
            kkt_residual,
            certified: kkt_residual <= tol.max(roundoff_floor(problem)),
            iterations,
        })
    }
}

/// Sup-norm violation of `p ∈ ∂R(u)`.
///
/// For ℓ1 this is `|p_i − w_i sign u_i|` on the support and the excess of
/// `|p_i|` over `w_i` off it. For TV the subgradient is written as `Dᵀφ`
/// and the same test is applied to `φ` against the jumps of `u`, together
/// with the requirement that `p` sums to zero.
pub fn kkt_residual(r: &Functional, u: &RealVec, p: &RealVec) -> Result<f64> {
    check_dim(u.len(), p.len())?;
    let n = u.len();
    Ok(match r {
        Functional::SquaredL2 => (p - u).amax(),
        Functional::WeightedL1 { weights } => (0..n)
            .map(|i| {
                let w = weights.get(i);
                if u[i] != 0.0 {
                    (p[i] - w * sign0(u[i])).abs()
                } else {
                    (p[i].abs() - w).max(0.0)
                }
            })
            .fold(0.0, f64::max),
        Functional::Tv1d { h } => {
            let phi = tv_dual_potential(p, *h);
            let mut res = phi[n - 1].abs();
            for j in 0..n - 1 {
                let jump = u[j + 1] - u[j];
                let v = if jump != 0.0 {
                    (phi[j] - sign0(jump)).abs()
                } else {
                    (phi[j].abs() - 1.0).max(0.0)
                };
                res = res.max(v);
            }
            res
        }
        Functional::BoltzmannEntropy => return Err(Error::UnsupportedFunctional("boltzmann_entropy")),
    })
}

/// Rounding error in `p = K*(f − Ku)/α` itself. Below this level no solver
/// can certify, so KKT tolerances are clamped to it.
pub fn roundoff_floor(problem: &RegProblem) -> f64 {
    let k = problem.k.matrix();
    let col = (0..k.ncols()).map(|j| k.column(j).norm()).fold(0.0, f64::max);
    16.0 * f64::EPSILON * problem.f.amax() * col / problem.alpha
}

pub fn solve(problem: &RegProblem, tol: f64, max_iter: usize) -> Result<RegSolution> {
    solve_warm(problem, tol, max_iter, None)
}

/// [`solve`] started from `warm`, typically the solution of a nearby problem.
pub fn solve_warm(problem: &RegProblem, tol: f64, max_iter: usize, warm: Option<&RealVec>) -> Result<RegSolution> {
    if let Some(w) = warm {
        check_dim(problem.k.cols(), w.len())?;
    }
    let sol = match &problem.r {
        Functional::SquaredL2 => solve_tikhonov(problem, tol)?,
        Functional::WeightedL1 { weights } => {
            let ws: Vec<f64> = (0..problem.k.cols()).map(|i| weights.get(i)).collect();
            let lasso = Lasso {
                a: problem.k.matrix(),
                b: &problem.f,
                alpha: problem.alpha,
                weights: &ws,
            };
            let out = lasso.solve(tol.max(roundoff_floor(problem)), max_iter, warm);
            RegSolution::from_primal(problem, out.x, tol, out.iterations)?
        }
        Functional::Tv1d { h } => solve_tv(problem, *h, tol, max_iter, warm)?,
        Functional::BoltzmannEntropy => return Err(Error::UnsupportedFunctional("boltzmann_entropy")),
    };
    if sol.certified {
        Ok(sol)
    } else {
        Err(Error::SolveNotConverged(Box::new(sol)))
    }
}

fn solve_tikhonov(problem: &RegProblem, tol: f64) -> Result<RegSolution> {
    let k = problem.k.matrix();
    let n = k.ncols();
    let normal = k.tr_mul(k) + DMatrix::identity(n, n) * problem.alpha;
    let chol = normal.clone().cholesky().ok_or(Error::SingularSystem)?;
    let rhs = k.tr_mul(&problem.f);
    let mut u = chol.solve(&rhs);
    // One step of iterative refinement.
    let defect = &rhs - &normal * &u;
    u += chol.solve(&defect);
    RegSolution::from_primal(problem, u, tol, 1)
}

/// TV in one dimension is ℓ1 on the jumps: writing `u_i = c + h Σ_{j<i} z_j`
/// gives `TV(u) = Σ |z_j|` with the level `c` unpenalized.
fn solve_tv(problem: &RegProblem, h: f64, tol: f64, max_iter: usize, warm: Option<&RealVec>) -> Result<RegSolution> {
    let k = problem.k.matrix();
    let (m, n) = k.shape();
    // Column 0 is K·1, column j+1 is h·Σ_{i>j} K_{:,i}.
    let mut a = DMatrix::zeros(m, n);
    let mut acc = RealVec::zeros(m);
    for i in (0..n).rev() {
        acc += k.column(i);
        if i > 0 {
            a.set_column(i, &(&acc * h));
        }
    }
    a.set_column(0, &acc);
    let mut weights = vec![1.0; n];
    weights[0] = 0.0;

    let warm_x = warm.map(|u| RealVec::from_fn(n, |i, _| if i == 0 { u[0] } else { (u[i] - u[i - 1]) / h }));
    let lasso = Lasso {
        a: &a,
        b: &problem.f,
        alpha: problem.alpha,
        weights: &weights,
    };
    let out = lasso.solve(0.5 * tol.max(roundoff_floor(problem)), max_iter, warm_x.as_ref());
    let mut u = RealVec::zeros(n);
    let mut level = out.x[0];
    for i in 0..n {
        if i > 0 {
            level += h * out.x[i];
        }
        u[i] = level;
    }
    RegSolution::from_primal(problem, u, tol, out.iterations)
}

/// `argmin_u ½‖u − x‖² + λ Σ |u_{i+1} − u_i|`.
pub fn tv_denoise(x: &RealVec, lambda: f64) -> Result<RealVec> {
    let problem = RegProblem::new(LinOp::identity(x.len()), x.clone(), lambda, Functional::tv1d(1.0))?;
    let tol = 1e-12 * (1.0 + x.amax() / lambda);
    Ok(solve(&problem, tol, DEFAULT_MAX_ITER)?.u)
}

/// Terms of `‖K(u − ũ)‖² + 2α D_sym + α²‖w − w̃‖² = ‖f − f̃‖²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorTerms {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub rhs: f64,
    pub residual: f64,
}

impl ErrorTerms {
    pub fn symmetric_distance(&self, alpha: f64) -> f64 {
        self.t2 / (2.0 * alpha)
    }
}

/// Evaluates the three error terms for solutions `sol` of `problem` and
/// `sol_tilde` of the same problem with data `f_tilde`.
pub fn bregman_error_identity(
    problem: &RegProblem,
    sol: &RegSolution,
    f_tilde: &RealVec,
    sol_tilde: &RegSolution,
) -> Result<ErrorTerms> {
    if !sol.certified || !sol_tilde.certified {
        return Err(Error::NotCertified);
    }
    check_dim(problem.f.len(), f_tilde.len())?;
    let alpha = problem.alpha;
    let t1 = problem.k.apply(&(&sol.u - &sol_tilde.u))?.norm_squared();
    let t2 = 2.0 * alpha * symmetric_bregman(&problem.r, &sol.pair(), &sol_tilde.pair())?;
    let t3 = alpha * alpha * (&sol.w - &sol_tilde.w).norm_squared();
    let rhs = (&problem.f - f_tilde).norm_squared();
    Ok(ErrorTerms {
        t1,
        t2,
        t3,
        rhs,
        residual: (t1 + t2 + t3 - rhs).abs(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct YoungBounds {
    /// `T₁ + T₂ ≤ ‖f − f̃‖²`
    pub residual_form: bool,
    /// `T₂ + T₃ ≤ ‖f − f̃‖²`
    pub dual_form: bool,
    /// `D_sym ≤ ‖f − f̃‖² / (2α)`
    pub symmetric: bool,
}

impl YoungBounds {
    pub fn all(&self) -> bool {
        self.residual_form && self.dual_form && self.symmetric
    }
}

pub fn one_sided_bounds(
    problem: &RegProblem,
    sol: &RegSolution,
    f_tilde: &RealVec,
    sol_tilde: &RegSolution,
) -> Result<YoungBounds> {
    let e = bregman_error_identity(problem, sol, f_tilde, sol_tilde)?;
    let slack = 1e-9 * (1.0 + e.rhs);
    Ok(YoungBounds {
        residual_form: e.t1 + e.t2 <= e.rhs + slack,
        dual_form: e.t2 + e.t3 <= e.rhs + slack,
        symmetric: e.symmetric_distance(problem.alpha) <= (e.rhs + slack) / (2.0 * problem.alpha),
    })
}

/// A sparse `u*` with a dual certificate `p* = K*w* ∈ ∂‖·‖₁(u*)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SourceTriple {
    #[serde(with = "crate::io::vec_serde")]
    pub u_star: RealVec,
    #[serde(with = "crate::io::vec_serde")]
    pub w_star: RealVec,
    #[serde(with = "crate::io::vec_serde")]
    pub p_star: RealVec,
    /// `1 − max |p*_i|` over the off-support indices.
    pub margin: f64,
}

pub const DEFAULT_MARGIN: f64 = 0.1;

/// Draws magnitudes in `[1, 2]` for the signed support and builds the
/// certificate with [`source_triple_for`].
pub fn make_source_triple(k: &LinOp, support: &SignedSupport, seed: u64, margin: f64) -> Result<SourceTriple> {
    use rand::Rng;
    let n = k.cols();
    if let Some(i) = support.max_index() {
        if i >= n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: i + 1,
            });
        }
    }
    let mut stream = rng::stream(seed, 0);
    let mut u = RealVec::zeros(n);
    for (i, s) in support.iter() {
        u[i] = s.value() * stream.random_range(1.0..=2.0);
    }
    source_triple_for(k, &u, margin)
}

/// Minimum-norm `w*` with `(K*w*)_i = sign(u*_i)` on the support, accepted
/// when `|K*w*| ≤ 1 − margin` everywhere else.
pub fn source_triple_for(k: &LinOp, u_star: &RealVec, margin: f64) -> Result<SourceTriple> {
    check_dim(k.cols(), u_star.len())?;
    let support: Vec<usize> = (0..u_star.len()).filter(|&i| u_star[i] != 0.0).collect();
    let signs = RealVec::from_iterator(support.len(), support.iter().map(|&i| sign0(u_star[i])));

    let w_star = if support.is_empty() {
        RealVec::zeros(k.rows())
    } else {
        // w = K_S (K_SᵀK_S)⁻¹ s = Q R⁻ᵀ s for K_S = QR.
        let ks = k.columns(&support);
        if ks.ncols() > ks.nrows() {
            return Err(Error::RankDeficient { ratio: 0.0 });
        }
        let qr = ks.qr();
        let r = qr.r();
        let diag: Vec<f64> = (0..r.ncols()).map(|i| r[(i, i)].abs()).collect();
        let largest = diag.iter().cloned().fold(0.0, f64::max);
        let smallest = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if largest == 0.0 || smallest <= RANK_TOL * largest {
            return Err(Error::RankDeficient {
                ratio: smallest / largest.max(f64::MIN_POSITIVE),
            });
        }
        let y = r.transpose().solve_lower_triangular(&signs).ok_or(Error::SingularSystem)?;
        qr.q() * y
    };
    let off: Vec<usize> = (0..u_star.len()).filter(|&i| u_star[i] == 0.0).collect();
    let off_sup = |w: &RealVec| -> Result<f64> {
        let p = k.apply_adjoint(w)?;
        Ok(off.iter().map(|&i| p[i].abs()).fold(0.0, f64::max))
    };
    let mut w_star = w_star;
    let mut off_max = off_sup(&w_star)?;
    if off_max > 1.0 - margin && !support.is_empty() {
        let w = minimax_certificate(k, &support, &off, &w_star);
        let m = off_sup(&w)?;
        if m < off_max {
            w_star = w;
            off_max = m;
        }
    }
    if off_max > 1.0 - margin {
        return Err(Error::Infeasible {
            margin,
            achieved: off_max,
        });
    }
    Ok(SourceTriple {
        u_star: u_star.clone(),
        p_star: k.apply_adjoint(&w_star)?,
        w_star,
        margin: 1.0 - off_max,
    })
}

/// Lowers `max_{i ∉ S} |(K*w)_i|` over all `w` with the same values of
/// `(K*w)_S` as `w0`, by Lawson's iteratively reweighted least squares for
/// linear Chebyshev approximation.
fn minimax_certificate(k: &LinOp, support: &[usize], off: &[usize], w0: &RealVec) -> RealVec {
    let m = k.rows();
    // Orthonormal basis of the complement of range(K_S).
    let q = k.columns(support).qr().q();
    let proj = DMatrix::identity(m, m) - &q * q.transpose();
    let eig = proj.symmetric_eigen();
    let keep: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    if keep.is_empty() || off.is_empty() {
        return w0.clone();
    }
    let basis = eig.eigenvectors.select_columns(&keep);

    let k_off = k.columns(off);
    let c = k_off.tr_mul(w0);
    let b = k_off.tr_mul(&basis);
    let mut lambda = RealVec::from_element(off.len(), 1.0 / off.len() as f64);
    let mut best = (c.amax(), RealVec::zeros(keep.len()));
    for _ in 0..2000 {
        let sqrt_l = lambda.map(f64::sqrt);
        let bw = DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)] * sqrt_l[i]);
        let cw = c.component_mul(&sqrt_l);
        let Ok(z) = bw.svd(true, true).solve(&(-cw), 1e-12) else {
            break;
        };
        let r = &c + &b * &z;
        let sup = r.amax();
        if sup < best.0 {
            best = (sup, z);
        }
        let next = lambda.component_mul(&r.abs());
        let total = next.sum();
        if total == 0.0 {
            break;
        }
        let next = next / total;
        if (&next - &lambda).amax() <= 1e-14 {
            break;
        }
        lambda = next;
    }
    w0 + basis * best.1
}

/// How the regularization weight follows the noise level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum AlphaRule {
    /// `α = c·δ`
    Proportional { c: f64 },
    Constant { alpha: f64 },
}

impl AlphaRule {
    pub fn alpha(&self, delta: f64) -> Result<f64> {
        let a = match self {
            AlphaRule::Proportional { c } => c * delta,
            AlphaRule::Constant { alpha } => *alpha,
        };
        if a.is_finite() && a > 0.0 {
            Ok(a)
        } else {
            Err(Error::InvalidInput(format!("alpha rule gives {a} at delta = {delta}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub delta: f64,
    pub alpha: f64,
    pub bregman_distance: f64,
    pub bound: f64,
    pub residual_norm: f64,
}

impl RateRow {
    pub fn as_array(&self) -> [f64; 5] {
        [self.delta, self.alpha, self.bregman_distance, self.bound, self.residual_norm]
    }
}

/// For each noise level `δ` (row `i`), perturbs `Ku*` by `δ` times a unit
/// direction drawn from stream `i` of `seed`, solves the ℓ1 problem and
/// compares `D_sym(u_α, u*)` with `δ²/α + α‖w*‖²`.
pub fn rate_study(
    k: &LinOp,
    triple: &SourceTriple,
    noise_levels: &[f64],
    rule: AlphaRule,
    seed: u64,
    tol: f64,
) -> Result<Vec<RateRow>> {
    let clean = k.apply(&triple.u_star)?;
    let w_norm_sq = triple.w_star.norm_squared();
    let truth = SubgradientPair::new(triple.u_star.clone(), triple.p_star.clone());
    let r = Functional::l1();

    let rows: Vec<RateRow> = noise_levels
        .par_iter()
        .enumerate()
        .map(|(i, &delta)| {
            if !(delta.is_finite() && delta >= 0.0) {
                return Err(Error::InvalidInput(format!("noise level must be >= 0, got {delta}")));
            }
            let alpha = rule.alpha(delta)?;
            let direction = rng::unit_vector(&mut rng::stream(seed, i as u64), k.rows());
            let f = &clean + direction * delta;
            let problem = RegProblem::new(k.clone(), f, alpha, r.clone())?;
            let sol = solve(&problem, tol, DEFAULT_MAX_ITER)?;
            let d = symmetric_bregman(&r, &sol.pair(), &truth)?;
            Ok(RateRow {
                delta,
                alpha,
                bregman_distance: d,
                bound: delta * delta / alpha + alpha * w_norm_sq,
                residual_norm: sol.w.norm() * alpha,
            })
        })
        .collect::<Result<_>>()?;

    for row in &rows {
        if row.bregman_distance > row.bound * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::BoundViolated(format!(
                "delta = {}: D = {} exceeds {}",
                row.delta, row.bregman_distance, row.bound
            )));
        }
    }
    Ok(rows)
}

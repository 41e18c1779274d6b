//! Convex functionals, their subgradients and conjugates, and the Bregman
//! distances they induce.
//!
//! Every functional here acts on finite-dimensional vectors with the
//! Euclidean pairing `⟨p, u⟩ = Σ p_i u_i`. Subgradients are certified through
//! the Fenchel–Young gap `J(u) + J*(p) − ⟨p, u⟩`, which vanishes exactly on
//! subgradient pairs and is nonnegative everywhere else.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub type RealVec = DVector<f64>;

/// Default relative tolerance for subgradient certificates.
pub const DEFAULT_CERT_TOL: f64 = 1e-10;

/// Slack allowed when testing membership in the dual ball of a
/// one-homogeneous functional.
const DUAL_BALL_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum L1Weights {
    Uniform(f64),
    PerEntry(Vec<f64>),
}

impl L1Weights {
    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match self {
            L1Weights::Uniform(w) => *w,
            L1Weights::PerEntry(ws) => ws[i],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Functional {
    /// `½‖u‖²`
    SquaredL2,
    /// `Σ w_i |u_i|`
    WeightedL1 { weights: L1Weights },
    /// `Σ (u_i log u_i + 1 − u_i)` on the nonnegative orthant, `0 log 0 = 0`.
    BoltzmannEntropy,
    /// `Σ |u_{i+1} − u_i| / h`, the ℓ1 norm of the forward difference quotient.
    Tv1d { h: f64 },
}

impl Functional {
    pub fn l1() -> Self {
        Functional::WeightedL1 {
            weights: L1Weights::Uniform(1.0),
        }
    }

    pub fn weighted_l1(weights: Vec<f64>) -> Self {
        Functional::WeightedL1 {
            weights: L1Weights::PerEntry(weights),
        }
    }

    pub fn tv1d(h: f64) -> Self {
        Functional::Tv1d { h }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Functional::SquaredL2 => "SquaredL2",
            Functional::WeightedL1 { .. } => "WeightedL1",
            Functional::BoltzmannEntropy => "BoltzmannEntropy",
            Functional::Tv1d { .. } => "TV1D",
        }
    }

    pub fn is_one_homogeneous(&self) -> bool {
        matches!(self, Functional::WeightedL1 { .. } | Functional::Tv1d { .. })
    }

    /// Checks the functional's own parameters against a signal length.
    pub fn validate(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::InvalidInput("empty vector".into()));
        }
        match self {
            Functional::WeightedL1 { weights } => match weights {
                L1Weights::Uniform(w) if !(w.is_finite() && *w > 0.0) => {
                    Err(Error::InvalidInput(format!("l1 weight must be > 0, got {w}")))
                }
                L1Weights::PerEntry(ws) => {
                    check_dim(n, ws.len())?;
                    match ws.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
                        Some(w) => Err(Error::InvalidInput(format!("l1 weight must be > 0, got {w}"))),
                        None => Ok(()),
                    }
                }
                _ => Ok(()),
            },
            Functional::Tv1d { h } if !(h.is_finite() && *h > 0.0) => {
                Err(Error::InvalidInput(format!("grid spacing must be > 0, got {h}")))
            }
            _ => Ok(()),
        }
    }

    /// Fails with a domain error if `u` cannot be evaluated.
    pub fn check_domain(&self, u: &RealVec) -> Result<()> {
        self.validate(u.len())?;
        if let Some(i) = u.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("entry {i} is not finite")));
        }
        if matches!(self, Functional::BoltzmannEntropy) {
            if let Some(i) = u.iter().position(|&x| x < 0.0) {
                return Err(Error::Domain(format!(
                    "entropy needs nonnegative entries, entry {i} is {}",
                    u[i]
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, u: &RealVec) -> Result<f64> {
        self.check_domain(u)?;
        Ok(self.eval_unchecked(u))
    }

    pub(crate) fn eval_unchecked(&self, u: &RealVec) -> f64 {
        match self {
            Functional::SquaredL2 => 0.5 * u.norm_squared(),
            Functional::WeightedL1 { weights } => {
                u.iter().enumerate().map(|(i, x)| weights.get(i) * x.abs()).sum()
            }
            Functional::BoltzmannEntropy => u.iter().map(|&x| entropy_density(x)).sum(),
            Functional::Tv1d { h } => u.as_slice().windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / h,
        }
    }

    /// Convex conjugate `J*(p)`; indicator conjugates return `+∞` outside
    /// their set.
    pub fn conjugate(&self, p: &RealVec) -> Result<f64> {
        self.validate(p.len())?;
        if let Some(i) = p.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("dual entry {i} is not finite")));
        }
        Ok(match self {
            Functional::SquaredL2 => 0.5 * p.norm_squared(),
            Functional::BoltzmannEntropy => p.iter().map(|&x| x.exp_m1()).sum(),
            Functional::WeightedL1 { weights } => {
                let inside = p
                    .iter()
                    .enumerate()
                    .all(|(i, x)| x.abs() <= weights.get(i) * (1.0 + DUAL_BALL_TOL));
                indicator(inside)
            }
            Functional::Tv1d { h } => indicator(tv_dual_ball_contains(p, *h)),
        })
    }

    /// Deterministic element of `∂J(u)`.
    ///
    /// Zero entries of ℓ1-type functionals map to the zero subgradient
    /// component, which is the minimal-norm choice.
    pub fn subgradient(&self, u: &RealVec) -> Result<RealVec> {
        self.check_domain(u)?;
        Ok(match self {
            Functional::SquaredL2 => u.clone(),
            Functional::WeightedL1 { weights } => {
                RealVec::from_iterator(u.len(), u.iter().enumerate().map(|(i, &x)| weights.get(i) * sign0(x)))
            }
            Functional::BoltzmannEntropy => {
                if let Some(i) = u.iter().position(|&x| x == 0.0) {
                    return Err(Error::NotDifferentiable(format!(
                        "entropy has an empty subdifferential at zero entry {i}"
                    )));
                }
                u.map(f64::ln)
            }
            Functional::Tv1d { h } => {
                let phi: Vec<f64> = u.as_slice().windows(2).map(|w| sign0(w[1] - w[0])).collect();
                tv_adjoint(&phi, *h, u.len())
            }
        })
    }

    /// Proximal map `argmin_v τJ(v) + ½‖v − x‖²`.
    pub fn prox(&self, x: &RealVec, tau: f64) -> Result<RealVec> {
        self.validate(x.len())?;
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(Error::InvalidInput(format!("prox step must be >= 0, got {tau}")));
        }
        Ok(match self {
            Functional::SquaredL2 => x / (1.0 + tau),
            Functional::WeightedL1 { weights } => RealVec::from_iterator(
                x.len(),
                x.iter().enumerate().map(|(i, &v)| soft_threshold(v, tau * weights.get(i))),
            ),
            Functional::BoltzmannEntropy => x.map(|v| entropy_prox_scalar(v, tau)),
            Functional::Tv1d { h } => {
                if tau == 0.0 {
                    x.clone()
                } else {
                    crate::variational::tv_denoise(x, tau / h)?
                }
            }
        })
    }

    /// Fenchel–Young gap `J(u) + J*(p) − ⟨p, u⟩ ≥ 0`.
    pub fn fenchel_young_gap(&self, u: &RealVec, p: &RealVec) -> Result<f64> {
        check_dim(u.len(), p.len())?;
        let ju = self.eval(u)?;
        let jp = self.conjugate(p)?;
        Ok(ju + jp - p.dot(u))
    }
}

#[inline]
fn indicator(inside: bool) -> f64 {
    if inside {
        0.0
    } else {
        f64::INFINITY
    }
}

#[inline]
pub(crate) fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[inline]
fn entropy_density(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x * x.ln() + 1.0 - x
    }
}

/// Solves `τ log v + v = x` for `v > 0` by Newton on `y = log v`.
fn entropy_prox_scalar(x: f64, tau: f64) -> f64 {
    if tau == 0.0 {
        return x.max(0.0);
    }
    // g(y) = e^y + τy − x is convex increasing; starting where g ≥ 0 makes
    // Newton decrease monotonically onto the root.
    let mut y = if x >= 1.0 { x.ln().min(x / tau) } else { x / tau };
    for _ in 0..200 {
        let ey = y.exp();
        let g = ey + tau * y - x;
        let step = g / (ey + tau);
        y -= step;
        if step.abs() <= 1e-15 * (1.0 + y.abs()) {
            break;
        }
    }
    y.exp()
}

/// Dual potential `φ` with `Dᵀφ = p`, where `D` is the forward difference
/// quotient. The last entry is the boundary defect `−hΣp`, which must vanish
/// for `p` to lie in the range of `Dᵀ`.
pub(crate) fn tv_dual_potential(p: &RealVec, h: f64) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|&pi| {
            acc -= h * pi;
            acc
        })
        .collect()
}

pub(crate) fn tv_dual_ball_contains(p: &RealVec, h: f64) -> bool {
    let phi = tv_dual_potential(p, h);
    let (last, interior) = phi.split_last().expect("nonempty");
    let scale = 1.0 + h * p.iter().map(|x| x.abs()).sum::<f64>();
    last.abs() <= DUAL_BALL_TOL * scale && interior.iter().all(|x| x.abs() <= 1.0 + DUAL_BALL_TOL)
}

/// `Dᵀφ` for a potential on the `n − 1` interior faces.
pub(crate) fn tv_adjoint(phi: &[f64], h: f64, n: usize) -> RealVec {
    RealVec::from_fn(n, |i, _| {
        let left = if i > 0 { phi[i - 1] } else { 0.0 };
        let right = if i + 1 < n { phi[i] } else { 0.0 };
        (left - right) / h
    })
}

/// A point together with a claimed subgradient.
///
/// The pair is plain data; every operation re-certifies it against the
/// functional it is used with through the Fenchel–Young gap, accepting when
/// the gap is at most `tol · (1 + |J(u)|)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgradientPair {
    #[serde(with = "crate::io::vec_serde")]
    pub u: RealVec,
    #[serde(with = "crate::io::vec_serde")]
    pub p: RealVec,
    #[serde(default = "default_cert_tol")]
    pub tol: f64,
}

fn default_cert_tol() -> f64 {
    DEFAULT_CERT_TOL
}

impl SubgradientPair {
    pub fn new(u: RealVec, p: RealVec) -> Self {
        SubgradientPair {
            u,
            p,
            tol: DEFAULT_CERT_TOL,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    /// Returns the Fenchel–Young gap if it passes the certificate test.
    pub fn certify(&self, j: &Functional) -> Result<f64> {
        let ju = j.eval(&self.u)?;
        check_dim(self.u.len(), self.p.len())?;
        let jp = j.conjugate(&self.p)?;
        let gap = ju + jp - self.p.dot(&self.u);
        let tol = self.tol * (1.0 + ju.abs());
        if gap <= tol {
            Ok(gap)
        } else {
            Err(Error::Cert { gap, tol })
        }
    }

    pub fn is_certified(&self, j: &Functional) -> bool {
        self.certify(j).is_ok()
    }
}

/// Certified pair `(u, p)` with `p` chosen by [`Functional::subgradient`].
pub fn subgradient_select(j: &Functional, u: &RealVec) -> Result<SubgradientPair> {
    let p = j.subgradient(u)?;
    let pair = SubgradientPair::new(u.clone(), p);
    pair.certify(j)?;
    Ok(pair)
}

/// `D_J^p(v, u) = J(v) − J(u) − ⟨p, v − u⟩`.
pub fn bregman(j: &Functional, v: &RealVec, pair: &SubgradientPair) -> Result<f64> {
    pair.certify(j)?;
    check_dim(pair.u.len(), v.len())?;
    let jv = j.eval(v)?;
    let ju = j.eval_unchecked(&pair.u);
    Ok(jv - ju - pair.p.dot(&(v - &pair.u)))
}

/// `D_J^{p,q}(u, v) = ⟨p − q, u − v⟩`.
pub fn symmetric_bregman(j: &Functional, a: &SubgradientPair, b: &SubgradientPair) -> Result<f64> {
    a.certify(j)?;
    b.certify(j)?;
    check_dim(a.u.len(), b.u.len())?;
    Ok((&a.p - &b.p).dot(&(&a.u - &b.u)))
}

/// `|D_J^p(v, u) − D_{J*}^v(p, q)|` for certified pairs `(u, p)` and `(v, q)`.
pub fn dual_bregman_residual(j: &Functional, a: &SubgradientPair, b: &SubgradientPair) -> Result<f64> {
    let primal = bregman(j, &b.u, a)?;
    b.certify(j)?;
    let jp = j.conjugate(&a.p)?;
    let jq = j.conjugate(&b.p)?;
    let dual = jp - jq - b.u.dot(&(&a.p - &b.p));
    Ok((primal - dual).abs())
}

/// Conjugate of `u ↦ D_J^q(u, v)` evaluated at `p`: `J*(p + q) − J*(q)`.
///
/// Returns `+∞` when `p + q` leaves the domain of `J*`.
pub fn shifted_conjugate(j: &Functional, pair_v: &SubgradientPair, p: &RealVec) -> Result<f64> {
    pair_v.certify(j)?;
    check_dim(pair_v.p.len(), p.len())?;
    let shifted = j.conjugate(&(p + &pair_v.p))?;
    if shifted.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(shifted - j.conjugate(&pair_v.p)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfConv {
    pub value: f64,
    #[serde(with = "crate::io::vec_serde")]
    pub argmin: RealVec,
    /// False when the minimizer came from an approximate search.
    pub exact: bool,
}

/// `inf_v D^{p1}(u − v, u1) + D^{p2}(v, u2)` for separable functionals,
/// minimized coordinate by coordinate in closed form.
pub fn infconv_bregman(
    j: &Functional,
    u: &RealVec,
    pair1: &SubgradientPair,
    pair2: &SubgradientPair,
) -> Result<InfConv> {
    pair1.certify(j)?;
    pair2.certify(j)?;
    check_dim(pair1.u.len(), u.len())?;
    check_dim(pair2.u.len(), u.len())?;
    j.check_domain(u)?;
    let (p1, p2) = (&pair1.p, &pair2.p);

    let argmin = match j {
        Functional::SquaredL2 => RealVec::from_fn(u.len(), |i, _| 0.5 * (u[i] - p1[i] + p2[i])),
        Functional::BoltzmannEntropy => RealVec::from_fn(u.len(), |i, _| u[i] * logistic(p2[i] - p1[i])),
        Functional::WeightedL1 { weights } => RealVec::from_fn(u.len(), |i, _| {
            // Piecewise linear and bounded below because |p| ≤ w, so a
            // minimizer sits at one of the kinks v = 0 or v = u.
            let w = weights.get(i);
            let phi = |v: f64| w * (u[i] - v).abs() - p1[i] * (u[i] - v) + w * v.abs() - p2[i] * v;
            if phi(u[i]) < phi(0.0) {
                u[i]
            } else {
                0.0
            }
        }),
        Functional::Tv1d { .. } => return Err(Error::UnsupportedFunctional("TV1D")),
    };

    let rest = u - &argmin;
    let value = bregman(j, &rest, pair1)? + bregman(j, &argmin, pair2)?;
    Ok(InfConv {
        value,
        argmin,
        exact: true,
    })
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

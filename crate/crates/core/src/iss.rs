//! Exact inverse scale space flow for `R = ‖·‖₁` and `G(u) = ½‖Ku − f‖²`:
//! `∂ₜp = −∇G(u)`, `p(t) ∈ ∂‖u(t)‖₁`, `u(0) = p(0) = 0`.
//!
//! The primal state is piecewise constant and the dual state piecewise
//! linear in time. Between breakpoints `p` moves with constant slope
//! `s = K*(f − Ku)`; a breakpoint occurs when a coordinate with `u_i = 0`
//! reaches `|p_i| = 1`. At each breakpoint the new `u` minimizes `G` over
//! vectors whose nonzero entries sit where `|p_i| = 1` with sign `p_i`.

use serde::{Deserialize, Serialize};

use crate::convex::{sign0, RealVec};
use crate::error::{check_dim, Error, Result};
use crate::operators::{sign_constrained_lsq, LinOp, Sign, SignedSupport};

/// `|p_i| ≥ 1 − BOUNDARY_TOL` counts as being on the unit sphere.
pub const BOUNDARY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub index: usize,
    pub sign: i8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IssTrajectory {
    /// `0 = t₀ < t₁ < … < t_n`
    pub breakpoints: Vec<f64>,
    /// `u(t)` on `[t_k, t_{k+1})`.
    #[serde(with = "crate::io::vecs_serde")]
    pub states: Vec<RealVec>,
    /// `p(t_k)`.
    #[serde(with = "crate::io::vecs_serde")]
    pub duals: Vec<RealVec>,
    /// `∂ₜp` on `[t_k, t_{k+1})`.
    #[serde(with = "crate::io::vecs_serde")]
    pub slopes: Vec<RealVec>,
    /// Indices with `|p_i(t_k)| = 1`.
    pub supports: Vec<Vec<SupportEntry>>,
    /// The last state minimizes `G`.
    pub terminal: bool,
}

impl IssTrajectory {
    fn interval(&self, t: f64) -> usize {
        self.breakpoints.partition_point(|&b| b <= t).saturating_sub(1)
    }

    /// `(u(t), p(t))` for `t ≥ 0`.
    pub fn at(&self, t: f64) -> (RealVec, RealVec) {
        let k = self.interval(t);
        let p = &self.duals[k] + &self.slopes[k] * (t - self.breakpoints[k]);
        (self.states[k].clone(), p)
    }

    pub fn final_state(&self) -> &RealVec {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Rows `t_k, u(t_k)_1, …, u(t_k)_N`.
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<f64>> = self
            .breakpoints
            .iter()
            .zip(&self.states)
            .map(|(t, u)| std::iter::once(*t).chain(u.iter().copied()).collect())
            .collect();
        crate::io::rows_to_csv(&rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serializes")
    }
}

fn gradient_tol(k: &LinOp, f: &RealVec) -> Result<f64> {
    Ok(1e-10 * k.apply_adjoint(f)?.amax().max(1.0))
}

/// Integrates the flow exactly, breakpoint by breakpoint, until `u`
/// minimizes `G` (`‖K*(Ku − f)‖∞ ≤ 1e-10 max(1, ‖K*f‖∞)`).
pub fn iss_solve(k: &LinOp, f: &RealVec, max_breakpoints: usize) -> Result<IssTrajectory> {
    check_dim(k.rows(), f.len())?;
    let n = k.cols();
    let tol = gradient_tol(k, f)?;

    let mut t = 0.0;
    let mut u = RealVec::zeros(n);
    let mut p = RealVec::zeros(n);
    let mut s = k.apply_adjoint(f)?;
    let mut traj = IssTrajectory {
        breakpoints: vec![0.0],
        states: vec![u.clone()],
        duals: vec![p.clone()],
        slopes: vec![s.clone()],
        supports: vec![Vec::new()],
        terminal: false,
    };

    while s.amax() > tol {
        if traj.breakpoints.len() > max_breakpoints {
            return Err(Error::MaxBreakpointsExceeded(max_breakpoints));
        }
        // Earliest time at which an inactive coordinate hits the sphere.
        let mut tau = f64::INFINITY;
        for i in 0..n {
            if u[i] != 0.0 || s[i] == 0.0 {
                continue;
            }
            let target = sign0(s[i]);
            if (p[i] - target).abs() <= BOUNDARY_TOL {
                continue;
            }
            tau = tau.min((target - p[i]) / s[i]);
        }
        if !tau.is_finite() {
            return Err(Error::Degenerate(format!(
                "gradient {:e} at t = {t} but no coordinate can reach the unit sphere",
                s.amax()
            )));
        }

        t += tau;
        p += &s * tau;
        let mut support = SignedSupport::new();
        for i in 0..n {
            if p[i].abs() >= 1.0 - BOUNDARY_TOL {
                p[i] = p[i].signum();
                support.insert(i, if p[i] > 0.0 { Sign::Plus } else { Sign::Minus });
            }
        }
        u = sign_constrained_lsq(k, f, &support)?;
        s = k.apply_adjoint(&(f - k.apply(&u)?))?;

        traj.breakpoints.push(t);
        traj.states.push(u.clone());
        traj.duals.push(p.clone());
        traj.slopes.push(s.clone());
        traj.supports.push(
            support
                .iter()
                .map(|(index, sg)| SupportEntry {
                    index,
                    sign: sg.value() as i8,
                })
                .collect(),
        );
    }
    // The flow is stationary once u minimizes G.
    let last = traj.slopes.len() - 1;
    traj.slopes[last] = RealVec::zeros(n);
    traj.terminal = true;
    Ok(traj)
}

/// Weight `w(t) ∈ [0, 1]` applied to the increment of `u` at time `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectralFilter {
    Constant { value: f64 },
    /// 1 on `[lo, hi)`, 0 elsewhere.
    Band { lo: f64, hi: f64 },
    /// `values[j]` for `edges[j-1] ≤ t < edges[j]`, with `values.len() = edges.len() + 1`.
    Table { edges: Vec<f64>, values: Vec<f64> },
}

impl SpectralFilter {
    pub fn lowpass(cutoff: f64) -> Self {
        SpectralFilter::Band { lo: 0.0, hi: cutoff }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            SpectralFilter::Constant { value } => (0.0..=1.0).contains(value),
            SpectralFilter::Band { lo, hi } => lo <= hi,
            SpectralFilter::Table { edges, values } => {
                values.len() == edges.len() + 1
                    && edges.windows(2).all(|e| e[0] <= e[1])
                    && values.iter().all(|v| (0.0..=1.0).contains(v))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid spectral filter {self:?}")))
        }
    }

    pub fn weight(&self, t: f64) -> f64 {
        match self {
            SpectralFilter::Constant { value } => *value,
            SpectralFilter::Band { lo, hi } => {
                if *lo <= t && t < *hi {
                    1.0
                } else {
                    0.0
                }
            }
            SpectralFilter::Table { edges, values } => values[edges.partition_point(|&e| e <= t)],
        }
    }
}

/// `u₀ + Σ_k w(t_k)(u(t_k) − u(t_{k−1}))`.
pub fn spectral_filter(traj: &IssTrajectory, filt: &SpectralFilter) -> Result<RealVec> {
    filt.validate()?;
    let mut out = traj.states[0].clone();
    for k in 1..traj.states.len() {
        let w = filt.weight(traj.breakpoints[k]);
        if w != 0.0 {
            out += (&traj.states[k] - &traj.states[k - 1]) * w;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub t: f64,
    /// `G(u(t)) − G(u_min)`
    pub lhs: f64,
    /// `‖u_min‖₁ / t`
    pub rhs: f64,
    pub holds: bool,
}

/// Checks `G(u(t_k)) − G(u_min) ≤ ‖u_min‖₁ / t_k` at every breakpoint `t_k > 0`.
pub fn decay_check(traj: &IssTrajectory, k: &LinOp, f: &RealVec, u_min: &RealVec) -> Result<Vec<DecayRow>> {
    check_dim(k.cols(), u_min.len())?;
    let grad = k.apply_adjoint(&(k.apply(u_min)? - f))?.amax();
    if grad > 1e-8 * k.apply_adjoint(f)?.amax().max(1.0) {
        return Err(Error::NotMinimizer(grad));
    }
    let g = |u: &RealVec| -> Result<f64> { Ok(0.5 * (k.apply(u)? - f).norm_squared()) };
    let g_min = g(u_min)?;
    let l1 = u_min.lp_norm(1);
    traj.breakpoints
        .iter()
        .zip(&traj.states)
        .skip(1)
        .map(|(&t, u)| {
            let lhs = g(u)? - g_min;
            let rhs = l1 / t;
            Ok(DecayRow {
                t,
                lhs,
                rhs,
                holds: lhs <= rhs + 1e-12 * (1.0 + rhs),
            })
        })
        .collect()
}

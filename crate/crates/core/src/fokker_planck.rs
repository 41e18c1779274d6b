//! Linear Fokker–Planck equation `∂ₜu = ∂ₓ(∂ₓu + F u)` on a 1D grid.
//!
//! Finite volumes with exponentially fitted (Scharfetter–Gummel) face
//! fluxes
//!
//! `J_{i+1/2} = (B(F h) u_i − B(−F h) u_{i+1}) / h`,  `B(x) = x / (eˣ − 1)`,
//!
//! and implicit Euler in time. The step matrix `I − dt·M` has nonpositive
//! off-diagonal entries and unit column sums, so its inverse is a positive
//! Markov matrix: mass and positivity are preserved and every relative
//! entropy to the stationary state decreases.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::convex::RealVec;
use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Periodic,
    /// `[0, L]` with no-flux boundaries.
    Interval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub length: f64,
    pub n: usize,
    pub topology: Topology,
}

impl Grid1D {
    pub fn new(length: f64, n: usize, topology: Topology) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) || n < 4 {
            return Err(Error::InvalidInput(format!(
                "grid needs L > 0 and n >= 4, got L = {length}, n = {n}"
            )));
        }
        Ok(Grid1D { length, n, topology })
    }

    pub fn h(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.h()
    }

    /// Right face of cell `i`.
    pub fn face(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.h()
    }
}

/// Cell averages on a grid with spacing `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    #[serde(with = "crate::io::vec_serde")]
    pub values: RealVec,
    pub h: f64,
}

impl GridFunction {
    pub fn new(values: RealVec, h: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain("densities must be finite and nonnegative".into()));
        }
        Ok(GridFunction { values, h })
    }

    /// Samples `g` at the cell centers and rescales to unit mass.
    pub fn from_fn(grid: &Grid1D, g: impl Fn(f64) -> f64) -> Result<Self> {
        let v = RealVec::from_fn(grid.n, |i, _| g(grid.center(i)));
        GridFunction::new(v, grid.h())?.normalized()
    }

    pub fn mass(&self) -> f64 {
        self.h * self.values.sum()
    }

    pub fn normalized(self) -> Result<Self> {
        let m = self.mass();
        if m <= 0.0 {
            return Err(Error::Domain("density has zero mass".into()));
        }
        Ok(GridFunction {
            values: self.values / m,
            h: self.h,
        })
    }

    pub fn min(&self) -> f64 {
        self.values.min()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FPProblem {
    pub grid: Grid1D,
    /// Force at the right face of each cell. On an interval the last face is
    /// the boundary and its value is unused.
    pub force: Vec<f64>,
}

/// `x / (eˣ − 1)`
pub fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0 - 0.5 * x
    } else {
        x / x.exp_m1()
    }
}

impl FPProblem {
    pub fn new(grid: Grid1D, force: Vec<f64>) -> Result<Self> {
        check_dim(grid.n, force.len())?;
        if force.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidInput("force must be finite".into()));
        }
        Ok(FPProblem { grid, force })
    }

    pub fn constant_force(grid: Grid1D, c: f64) -> Result<Self> {
        FPProblem::new(grid, vec![c; grid.n])
    }

    /// Force `V'` sampled at the faces.
    pub fn potential(grid: Grid1D, dv: impl Fn(f64) -> f64) -> Result<Self> {
        FPProblem::new(grid, (0..grid.n).map(|i| dv(grid.face(i))).collect())
    }

    /// Interior faces as `(left cell, right cell, B(Fh)/h², B(−Fh)/h²)`.
    fn faces(&self) -> Vec<(usize, usize, f64, f64)> {
        let n = self.grid.n;
        let h = self.grid.h();
        let count = match self.grid.topology {
            Topology::Periodic => n,
            Topology::Interval => n - 1,
        };
        (0..count)
            .map(|i| {
                let a = self.force[i] * h;
                (i, (i + 1) % n, bernoulli(a) / (h * h), bernoulli(-a) / (h * h))
            })
            .collect()
    }

    /// Generator `M` of `du/dt = M u`, dense.
    pub fn generator(&self) -> DMatrix<f64> {
        let n = self.grid.n;
        let mut m = DMatrix::zeros(n, n);
        for (i, j, g, q) in self.faces() {
            m[(i, i)] -= g;
            m[(i, j)] += q;
            m[(j, i)] += g;
            m[(j, j)] -= q;
        }
        m
    }

    fn step_matrix(&self, dt: f64) -> Tridiagonal {
        let n = self.grid.n;
        let mut t = Tridiagonal {
            lower: vec![0.0; n],
            diag: vec![1.0; n],
            upper: vec![0.0; n],
        };
        for (i, j, g, q) in self.faces() {
            t.diag[i] += dt * g;
            t.diag[j] += dt * q;
            // Row i, column j and row j, column i; for the wrap-around face
            // these land in the corners.
            t.upper[i] -= dt * q;
            t.lower[j] -= dt * g;
        }
        t
    }
}

/// Tridiagonal matrix with optional periodic corners: row `i` reads
/// `lower[i] x_{i−1} + diag[i] x_i + upper[i] x_{i+1}` with indices taken
/// modulo `n`, so `lower[0]` and `upper[n−1]` are the corner entries.
#[derive(Clone, Debug)]
struct Tridiagonal {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl Tridiagonal {
    fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
        let n = diag.len();
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut denom = diag[0];
        if denom == 0.0 {
            return None;
        }
        c[0] = upper[0] / denom;
        d[0] = rhs[0] / denom;
        for i in 1..n {
            denom = diag[i] - lower[i] * c[i - 1];
            if denom == 0.0 || !denom.is_finite() {
                return None;
            }
            c[i] = upper[i] / denom;
            d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
        }
        for i in (0..n - 1).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        Some(d)
    }

    fn solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        let n = self.diag.len();
        let beta = self.lower[0];
        let alpha = self.upper[n - 1];
        let mut lower = self.lower.clone();
        let mut upper = self.upper.clone();
        lower[0] = 0.0;
        upper[n - 1] = 0.0;
        if alpha == 0.0 && beta == 0.0 {
            return Self::thomas(&lower, &self.diag, &upper, rhs);
        }
        // Sherman–Morrison for the rank-one corner correction.
        let gamma = -self.diag[0];
        let mut diag = self.diag.clone();
        diag[0] -= gamma;
        diag[n - 1] -= alpha * beta / gamma;
        let x = Self::thomas(&lower, &diag, &upper, rhs)?;
        let mut e = vec![0.0; n];
        e[0] = gamma;
        e[n - 1] = alpha;
        let z = Self::thomas(&lower, &diag, &upper, &e)?;
        let fact = (x[0] + beta * x[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma);
        Some(x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect())
    }
}

/// Unit-mass solution of `M u = 0`.
pub fn steady_state(prob: &FPProblem) -> Result<GridFunction> {
    let n = prob.grid.n;
    let h = prob.grid.h();
    let mut a = prob.generator();
    let mut rhs = RealVec::zeros(n);
    // Columns of M sum to zero, so one balance equation is redundant; the
    // mass condition takes its place.
    for j in 0..n {
        a[(0, j)] = h;
    }
    rhs[0] = 1.0;
    let u = a.lu().solve(&rhs).ok_or(Error::SingularSystem)?;
    if u.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::SingularSystem);
    }
    Ok(GridFunction { values: u, h })
}

/// Implicit Euler from `u0` over `[0, T]` with `round(T/dt)` steps.
/// The returned list starts with `u0`.
pub fn evolve(prob: &FPProblem, u0: &GridFunction, dt: f64, t_end: f64) -> Result<Vec<GridFunction>> {
    if !(dt.is_finite() && dt > 0.0 && t_end >= 0.0) {
        return Err(Error::InvalidInput(format!("need dt > 0 and T >= 0, got dt = {dt}, T = {t_end}")));
    }
    let steps = (t_end / dt).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    evolve_with(prob, u0, dt, steps, |_, u| out.push(u.clone()))?;
    Ok(out)
}

/// Runs `steps` implicit Euler steps, handing every state (including the
/// initial one) to `visit` instead of storing it.
pub fn evolve_with(
    prob: &FPProblem,
    u0: &GridFunction,
    dt: f64,
    steps: usize,
    mut visit: impl FnMut(usize, &GridFunction),
) -> Result<()> {
    check_dim(prob.grid.n, u0.values.len())?;
    if (u0.h - prob.grid.h()).abs() > 1e-14 * prob.grid.h() {
        return Err(Error::InvalidInput("initial density lives on a different grid".into()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidInput(format!("need dt > 0, got {dt}")));
    }
    let a = prob.step_matrix(dt);
    let mut u = u0.clone();
    visit(0, &u);
    for step in 1..=steps {
        let next = a.solve(u.values.as_slice()).ok_or(Error::StepFailure(step))?;
        if let Some((cell, &value)) = next.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::NegativeDensity { step, cell, value });
        }
        u = GridFunction {
            values: RealVec::from_vec(next),
            h: u.h,
        };
        visit(step, &u);
    }
    Ok(())
}

/// `h Σ (u_i log(u_i/u∞_i) + u∞_i − u_i)`.
pub fn relative_entropy(u: &GridFunction, u_inf: &GridFunction) -> Result<f64> {
    check_dim(u_inf.values.len(), u.values.len())?;
    if let Some(v) = u_inf.values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!("reference density has a nonpositive cell ({v})")));
    }
    if u.values.iter().any(|v| *v < 0.0) {
        return Err(Error::Domain("density has a negative cell".into()));
    }
    let s: f64 = u
        .values
        .iter()
        .zip(u_inf.values.iter())
        .map(|(&a, &b)| if a == 0.0 { b } else { a * (a / b).ln() + b - a })
        .sum();
    Ok(u.h * s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissipationRow {
    pub t: f64,
    pub entropy: f64,
    /// `(D(t_m) − D(t_{m+1})) / dt`; the last row repeats the previous value.
    pub dissipation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissipationReport {
    pub rows: Vec<DissipationRow>,
    /// Exponential decay rate from a least-squares fit of `log D` against
    /// `t` on the second half of the run, when the entropy stays positive
    /// there.
    pub tail_rate: Option<f64>,
}

impl DissipationReport {
    pub fn to_csv(&self) -> String {
        let rows: Vec<[f64; 3]> = self.rows.iter().map(|r| [r.t, r.entropy, r.dissipation]).collect();
        crate::io::rows_to_csv(&rows)
    }
}

/// Entropy slack for the monotonicity test.
pub const MONOTONE_TOL: f64 = 1e-12;

pub fn dissipation_report(states: &[GridFunction], u_inf: &GridFunction, dt: f64) -> Result<DissipationReport> {
    let entropy: Vec<f64> = states.iter().map(|u| relative_entropy(u, u_inf)).collect::<Result<_>>()?;
    dissipation_from_entropy(&entropy, dt)
}

/// Same as [`dissipation_report`] from precomputed entropy values.
pub fn dissipation_from_entropy(entropy: &[f64], dt: f64) -> Result<DissipationReport> {
    for (m, w) in entropy.windows(2).enumerate() {
        if w[1] > w[0] + MONOTONE_TOL {
            return Err(Error::MonotonicityViolation {
                step: m + 1,
                before: w[0],
                after: w[1],
            });
        }
    }
    let n = entropy.len();
    let rows = (0..n)
        .map(|m| {
            let d = if n < 2 {
                0.0
            } else if m + 1 < n {
                (entropy[m] - entropy[m + 1]) / dt
            } else {
                (entropy[m - 1] - entropy[m]) / dt
            };
            DissipationRow {
                t: m as f64 * dt,
                entropy: entropy[m],
                dissipation: d,
            }
        })
        .collect();
    Ok(DissipationReport {
        rows,
        tail_rate: tail_rate(entropy, dt),
    })
}

fn tail_rate(entropy: &[f64], dt: f64) -> Option<f64> {
    let start = entropy.len() / 2;
    let tail = &entropy[start..];
    if tail.len() < 2 || tail.iter().any(|d| !(*d > 0.0)) {
        return None;
    }
    let ts: Vec<f64> = (start..entropy.len()).map(|m| m as f64 * dt).collect();
    let ys: Vec<f64> = tail.iter().map(|d| d.ln()).collect();
    let k = ts.len() as f64;
    let tm = ts.iter().sum::<f64>() / k;
    let ym = ys.iter().sum::<f64>() / k;
    let sxy: f64 = ts.iter().zip(&ys).map(|(t, y)| (t - tm) * (y - ym)).sum();
    let sxx: f64 = ts.iter().map(|t| (t - tm) * (t - tm)).sum();
    Some(-sxy / sxx)
}

/// Force description accepted in problem files: one value for a constant
/// force, or one value per face.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ForceSpec {
    Constant(f64),
    Faces(Vec<f64>),
}

/// `{L, n, topology, force, dt, T}` plus an optional initial density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FPSpec {
    #[serde(rename = "L")]
    pub length: f64,
    pub n: usize,
    pub topology: Topology,
    pub force: ForceSpec,
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u0: Option<Vec<f64>>,
}

impl FPSpec {
    pub fn problem(&self) -> Result<FPProblem> {
        let grid = Grid1D::new(self.length, self.n, self.topology)?;
        match &self.force {
            ForceSpec::Constant(c) => FPProblem::constant_force(grid, *c),
            ForceSpec::Faces(v) => FPProblem::new(grid, v.clone()),
        }
    }

    /// The given initial density, or `1 + ½cos(2πx/L)` when none is given;
    /// normalized to unit mass either way.
    pub fn initial(&self, grid: &Grid1D) -> Result<GridFunction> {
        match &self.u0 {
            Some(v) => {
                check_dim(grid.n, v.len())?;
                GridFunction::new(RealVec::from_vec(v.clone()), grid.h())?.normalized()
            }
            None => {
                let l = grid.length;
                GridFunction::from_fn(grid, |x| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x / l).cos())
            }
        }
    }
}

//! P1 Galerkin solutions of the 1D p-Laplace problem
//! `min_u E(u) = (1/p)∫|u'|^p − ∫ f u` on `[0, 1]` with `u(0) = u(1) = 0`.
//!
//! On a uniform mesh the gradient is constant per element, so the first
//! term is integrated exactly; the load term uses the trapezoidal rule.
//! Since `E = J − ⟨f, ·⟩`, the Bregman distance
//! `D_J^f(w, u) = J(w) − J(u) − ⟨f, w − u⟩` equals `E(w) − E(u)`, and the
//! Galerkin solution is the point of the discrete space closest to the
//! exact solution in that distance.

use serde::{Deserialize, Serialize};

use crate::convex::RealVec;
use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mesh1D {
    /// Number of elements.
    pub m: usize,
}

impl Mesh1D {
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidInput(format!("mesh needs m >= 2 elements, got {m}")));
        }
        Ok(Mesh1D { m })
    }

    pub fn h(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 / self.m as f64
    }
}

/// Values at the interior nodes `x_1, …, x_{m−1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct P1Function {
    pub mesh: Mesh1D,
    #[serde(with = "crate::io::vec_serde")]
    pub values: RealVec,
}

impl P1Function {
    pub fn new(mesh: Mesh1D, values: RealVec) -> Result<Self> {
        check_dim(mesh.m - 1, values.len())?;
        Ok(P1Function { mesh, values })
    }

    pub fn zero(mesh: Mesh1D) -> Self {
        P1Function {
            mesh,
            values: RealVec::zeros(mesh.m - 1),
        }
    }

    /// Nodal value including the boundary zeros.
    pub fn node_value(&self, i: usize) -> f64 {
        if i == 0 || i == self.mesh.m {
            0.0
        } else {
            self.values[i - 1]
        }
    }

    /// Slopes on the `m` elements.
    pub fn slopes(&self) -> Vec<f64> {
        let h = self.mesh.h();
        (0..self.mesh.m).map(|e| (self.node_value(e + 1) - self.node_value(e)) / h).collect()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let m = self.mesh.m;
        let s = (x.clamp(0.0, 1.0) * m as f64).min(m as f64);
        let e = (s.floor() as usize).min(m - 1);
        let t = s - e as f64;
        (1.0 - t) * self.node_value(e) + t * self.node_value(e + 1)
    }

    /// Exact interpolation onto a mesh whose element count is a multiple of
    /// this one's.
    pub fn prolong(&self, fine: Mesh1D) -> Result<P1Function> {
        if fine.m % self.mesh.m != 0 {
            return Err(Error::MeshMismatch(format!(
                "cannot prolong from {} to {} elements",
                self.mesh.m, fine.m
            )));
        }
        let values = RealVec::from_fn(fine.m - 1, |i, _| self.eval(fine.node(i + 1)));
        Ok(P1Function { mesh: fine, values })
    }
}

/// Right-hand side `f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Load {
    Constant(f64),
    /// Values at `k + 1` equispaced points of `[0, 1]`, linearly interpolated.
    Samples(Vec<f64>),
}

impl Load {
    pub fn at(&self, x: f64) -> f64 {
        match self {
            Load::Constant(c) => *c,
            Load::Samples(v) => {
                let k = v.len() - 1;
                if k == 0 {
                    return v[0];
                }
                let s = x.clamp(0.0, 1.0) * k as f64;
                let i = (s.floor() as usize).min(k - 1);
                let t = s - i as f64;
                (1.0 - t) * v[i] + t * v[i + 1]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PLaplaceProblem {
    pub p: f64,
    #[serde(rename = "f")]
    pub load: Load,
}

impl PLaplaceProblem {
    pub fn new(p: f64, load: Load) -> Result<Self> {
        if !(p.is_finite() && p >= 2.0) {
            return Err(Error::InvalidInput(format!("exponent must satisfy p >= 2, got {p}")));
        }
        if let Load::Samples(v) = &load {
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput("load samples must be finite and nonempty".into()));
            }
        }
        Ok(PLaplaceProblem { p, load })
    }

    /// `(1/p) Σ_e h |u'_e|^p`
    pub fn j(&self, u: &P1Function) -> f64 {
        let h = u.mesh.h();
        u.slopes().iter().map(|s| h * s.abs().powf(self.p)).sum::<f64>() / self.p
    }

    /// Trapezoidal `∫ f u`.
    pub fn load_pairing(&self, u: &P1Function) -> f64 {
        let h = u.mesh.h();
        (1..u.mesh.m).map(|i| h * self.load.at(u.mesh.node(i)) * u.values[i - 1]).sum()
    }

    fn load_vector(&self, mesh: Mesh1D) -> RealVec {
        RealVec::from_fn(mesh.m - 1, |i, _| mesh.h() * self.load.at(mesh.node(i + 1)))
    }
}

pub fn energy(prob: &PLaplaceProblem, u: &P1Function) -> f64 {
    prob.j(u) - prob.load_pairing(u)
}

fn gradient(prob: &PLaplaceProblem, u: &P1Function, load: &RealVec) -> RealVec {
    let s = u.slopes();
    let flux: Vec<f64> = s.iter().map(|x| x.abs().powf(prob.p - 2.0) * x).collect();
    RealVec::from_fn(u.values.len(), |i, _| flux[i] - flux[i + 1] - load[i])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalerkinSolution {
    pub u: P1Function,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Energy at the start and after every accepted step.
    pub energies: Vec<f64>,
}

/// Damped Newton with Armijo backtracking; stops when the sup norm of the
/// discrete energy gradient is at most `tol`.
pub fn solve_galerkin(prob: &PLaplaceProblem, mesh: Mesh1D, tol: f64, max_iter: usize) -> Result<GalerkinSolution> {
    let p = prob.p;
    let h = mesh.h();
    let load = prob.load_vector(mesh);
    let mut u = P1Function::zero(mesh);
    let mut e = energy(prob, &u);
    let mut energies = vec![e];
    let mut g = gradient(prob, &u, &load);

    for it in 0..max_iter {
        let gnorm = g.amax();
        if gnorm <= tol {
            return Ok(GalerkinSolution {
                u,
                iterations: it,
                gradient_norm: gnorm,
                energies,
            });
        }
        // Element stiffness (p − 1)|s|^{p−2}/h, floored where the slope
        // vanishes so the Newton matrix stays definite.
        let s = u.slopes();
        let smax = s.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let floor = 1e-6 * smax.max(gnorm / h).max(f64::MIN_POSITIVE);
        let c: Vec<f64> = s.iter().map(|x| (p - 1.0) * x.abs().max(floor).powf(p - 2.0) / h).collect();
        let n = mesh.m - 1;
        let lower: Vec<f64> = (0..n).map(|i| if i > 0 { -c[i] } else { 0.0 }).collect();
        let diag: Vec<f64> = (0..n).map(|i| c[i] + c[i + 1]).collect();
        let upper: Vec<f64> = (0..n).map(|i| if i + 1 < n { -c[i + 1] } else { 0.0 }).collect();
        let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
        let d = RealVec::from_vec(thomas(&lower, &diag, &upper, &rhs).ok_or(Error::SingularSystem)?);

        let slope = g.dot(&d);
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-14 {
            let trial = P1Function {
                mesh,
                values: &u.values + &d * t,
            };
            let et = energy(prob, &trial);
            if et <= e + 1e-4 * t * slope {
                accepted = Some((trial, et));
                break;
            }
            t *= 0.5;
        }
        let Some((next, en)) = accepted else {
            // No decrease available at working precision.
            return Err(Error::MaxIterExceeded {
                iterations: it,
                residual: gnorm,
            });
        };
        u = next;
        e = en;
        energies.push(e);
        g = gradient(prob, &u, &load);
    }
    let gnorm = g.amax();
    if gnorm <= tol {
        return Ok(GalerkinSolution {
            u,
            iterations: max_iter,
            gradient_norm: gnorm,
            energies,
        });
    }
    Err(Error::MaxIterExceeded {
        iterations: max_iter,
        residual: gnorm,
    })
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    for i in 0..n {
        let denom = diag[i] - if i > 0 { lower[i] * c[i - 1] } else { 0.0 };
        if !(denom.is_finite() && denom != 0.0) {
            return None;
        }
        c[i] = upper[i] / denom;
        d[i] = (rhs[i] - if i > 0 { lower[i] * d[i - 1] } else { 0.0 }) / denom;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Some(d)
}

/// `D_J^f(w, u_ref)` on the reference mesh.
pub fn bregman_to_reference(prob: &PLaplaceProblem, w: &P1Function, u_ref: &P1Function) -> Result<f64> {
    let wf = w.prolong(u_ref.mesh)?;
    let diff = P1Function {
        mesh: u_ref.mesh,
        values: &wf.values - &u_ref.values,
    };
    Ok(prob.j(&wf) - prob.j(u_ref) - prob.load_pairing(&diff))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub candidate: usize,
    pub d_value: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    /// `D_J^f(u_h, u_ref)`
    pub d_galerkin: f64,
    pub tol_ref: f64,
    pub rows: Vec<ProjectionRow>,
}

impl ProjectionReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    /// Rows `candidate, D_value, passed (0/1)`.
    pub fn to_csv(&self) -> String {
        let rows: Vec<[f64; 3]> = self
            .rows
            .iter()
            .map(|r| [r.candidate as f64, r.d_value, if r.passed { 1.0 } else { 0.0 }])
            .collect();
        crate::io::rows_to_csv(&rows)
    }
}

/// Compares `D_J^f(u_h, u_ref)` with `D_J^f(v, u_ref)` for each candidate
/// `v` of the coarse space. `tol_ref` is `1e-6` plus the change in the load
/// term of `u_h` between coarse and reference quadrature, the part of the
/// comparison that the coarse problem does not see.
pub fn bregman_projection_check(
    prob: &PLaplaceProblem,
    u_ref: &P1Function,
    u_h: &P1Function,
    candidates: &[P1Function],
) -> Result<ProjectionReport> {
    if u_ref.mesh.m < 8 * u_h.mesh.m {
        return Err(Error::MeshMismatch(format!(
            "reference mesh with {} elements is not 8x finer than {}",
            u_ref.mesh.m, u_h.mesh.m
        )));
    }
    let fine_uh = u_h.prolong(u_ref.mesh)?;
    let increment = (prob.load_pairing(&fine_uh) - prob.load_pairing(u_h)).abs();
    let tol_ref = 1e-6 + increment;
    let d_galerkin = bregman_to_reference(prob, u_h, u_ref)?;
    let rows = candidates
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if v.mesh != u_h.mesh {
                return Err(Error::MeshMismatch(format!(
                    "candidate {i} has {} elements, expected {}",
                    v.mesh.m, u_h.mesh.m
                )));
            }
            let d = bregman_to_reference(prob, v, u_ref)?;
            Ok(ProjectionRow {
                candidate: i,
                d_value: d,
                passed: d_galerkin <= d + tol_ref,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ProjectionReport {
        d_galerkin,
        tol_ref,
        rows,
    })
}

/// `count` perturbations of `u` with entries uniform in `[−scale, scale]`;
/// candidate `i` draws from stream `i` of `seed`.
pub fn random_candidates(u: &P1Function, count: usize, scale: f64, seed: u64) -> Result<Vec<P1Function>> {
    use rand::Rng;
    (0..count)
        .map(|i| {
            let mut rng = crate::rng::stream(seed, i as u64);
            let noise = RealVec::from_fn(u.values.len(), |_, _| rng.random_range(-scale..=scale));
            P1Function::new(u.mesh, &u.values + noise)
        })
        .collect()
}

/// `(m, D_J^f(u_m, u_ref))` for each coarse element count.
pub fn refinement_study(prob: &PLaplaceProblem, ms: &[usize], m_ref: usize, tol: f64) -> Result<Vec<(usize, f64)>> {
    let u_ref = solve_galerkin(prob, Mesh1D::new(m_ref)?, tol, 500)?.u;
    ms.iter()
        .map(|&m| {
            let u = solve_galerkin(prob, Mesh1D::new(m)?, tol, 500)?.u;
            Ok((m, bregman_to_reference(prob, &u, &u_ref)?))
        })
        .collect()
}

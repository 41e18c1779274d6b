//! Entropic optimal transport
//! `min ⟨C, γ⟩ + ε Σ (γ log γ + 1 − γ)` over plans with marginals `μ`, `ν`,
//! equivalently the KL projection of the Gibbs kernel `exp(−C/ε)` onto the
//! transport polytope.
//!
//! The projection alternates between the row and the column constraint
//! sets; each projection is a diagonal scaling, stored through log-domain
//! potentials `γ_ij = exp((f_i + g_j − C_ij)/ε)` so that small `ε` never
//! underflows.

use itertools::Itertools;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::convex::{bregman, subgradient_select, Functional, RealVec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("weights must be finite, nonnegative and nonempty".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
        }
        Ok(DiscreteMeasure { weights })
    }

    pub fn uniform(n: usize) -> Self {
        DiscreteMeasure {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn positive_atoms(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.weights[i] > 0.0).collect()
    }
}

/// `exp(−C/ε)` entrywise.
pub fn gibbs_kernel(c: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    c.map(|x| (-x / eps).exp())
}

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(m.nrows()))?;
        for i in 0..m.nrows() {
            let row: Vec<f64> = m.row(i).iter().copied().collect();
            seq.serialize_element(&row)?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransportPlan {
    #[serde(with = "matrix_rows")]
    pub gamma: DMatrix<f64>,
    /// `max_i |Σ_j γ_ij − μ_i|`
    pub row_residual: f64,
    /// `max_j |Σ_i γ_ij − ν_j|`
    pub col_residual: f64,
    pub cost: f64,
    /// `KL(γ | exp(−C/ε))`
    pub kl_objective: f64,
    pub iterations: usize,
    pub eps: f64,
    /// Dual objective `⟨f, μ⟩ + ⟨g, ν⟩ − ε Σγ` after each full sweep.
    pub dual_objective: Vec<f64>,
    /// Rows and columns of `gamma` that carry positive mass; the others
    /// were dropped before iterating and are zero.
    pub row_index: Vec<usize>,
    pub col_index: Vec<usize>,
}

impl TransportPlan {
    /// True when the dual objective never decreased by more than rounding.
    /// Up to a constant this is `−ε KL(γ* | γ_k)`, so the distance from the
    /// iterates to the optimal plan is non-increasing.
    pub fn dual_monotone(&self) -> bool {
        self.dual_objective
            .windows(2)
            .all(|w| w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs()))
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "cost": self.cost,
            "kl_objective": self.kl_objective,
            "iterations": self.iterations,
            "residuals": { "row": self.row_residual, "col": self.col_residual },
            "eps": self.eps,
        })
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Above this many rows the dense Newton solve costs more than it saves.
const NEWTON_MAX_ROWS: usize = 300;

struct Sweep {
    plan: DMatrix<f64>,
    row_sums: Vec<f64>,
    col_sums: Vec<f64>,
    dual: f64,
}

/// Newton step on `f ↦ Φ(f, g(f))` followed by backtracking.
fn newton_step(
    f: &[f64],
    s: &Sweep,
    a: &[f64],
    eps: f64,
    g_of: &impl Fn(&[f64]) -> Vec<f64>,
    stats: &impl Fn(&[f64], &[f64]) -> Sweep,
) -> Option<(Vec<f64>, Vec<f64>, Sweep)> {
    let n = f.len();
    // Components at rounding level carry no information.
    let grad: Vec<f64> = (0..n)
        .map(|i| a[i] - s.row_sums[i])
        .map(|x| if x.abs() <= 8.0 * f64::EPSILON { 0.0 } else { x })
        .collect();
    // −ε ∇²Φ = diag(r) − Γ diag(1/c) Γᵀ
    let scaled = DMatrix::from_fn(n, s.plan.ncols(), |i, j| s.plan[(i, j)] / s.col_sums[j]);
    let mut h = -(&scaled * s.plan.transpose());
    for i in 0..n {
        h[(i, i)] += s.row_sums[i];
    }
    // Shifting `f` by a constant is a null direction, and nearly decoupled
    // blocks add more; a small diagonal shift keeps the solve well posed.
    let shift = 1e-14 * s.row_sums.iter().fold(0.0, |m: f64, x| m.max(*x));
    for i in 0..n {
        h[(i, i)] += shift;
    }
    let rhs = RealVec::from_fn(n, |i, _| eps * grad[i]);
    let mut d = h.cholesky()?.solve(&rhs);
    if d.iter().any(|x| !x.is_finite()) {
        return None;
    }
    // Nearly decoupled blocks give enormous steps; the dual is far from
    // quadratic on that scale.
    let cap = 20.0 * eps;
    if d.amax() > cap {
        d *= cap / d.amax();
    }
    let slope: f64 = (0..n).map(|i| grad[i] * d[i]).sum();
    if slope <= 0.0 {
        return None;
    }
    let mut t = 1.0;
    for _ in 0..60 {
        let mut trial = f.to_vec();
        for i in 0..n {
            trial[i] += t * d[i];
        }
        let g = g_of(&trial);
        let st = stats(&trial, &g);
        if st.dual >= s.dual + 1e-4 * t * slope && st.dual > s.dual {
            return Some((trial, g, st));
        }
        t *= 0.5;
    }
    None
}

pub fn sinkhorn(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    c: &DMatrix<f64>,
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> Result<TransportPlan> {
    sinkhorn_impl(mu, nu, c, eps, tol, max_iter, true)
}

fn sinkhorn_impl(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    c: &DMatrix<f64>,
    eps: f64,
    tol: f64,
    max_iter: usize,
    accelerate: bool,
) -> Result<TransportPlan> {
    if c.shape() != (mu.len(), nu.len()) {
        return Err(Error::DimensionMismatch {
            expected: mu.len() * nu.len(),
            got: c.len(),
        });
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    if c.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("costs must be finite".into()));
    }
    let rows = mu.positive_atoms();
    let cols = nu.positive_atoms();
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::EmptySupport);
    }
    let cc = c.select_rows(&rows).select_columns(&cols);
    let a: Vec<f64> = rows.iter().map(|&i| mu.weights[i]).collect();
    let b: Vec<f64> = cols.iter().map(|&j| nu.weights[j]).collect();
    let (n, m) = (a.len(), b.len());
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();

    let cost_ref = &cc;
    let g_of = |f: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|j| eps * log_b[j] - eps * log_sum_exp((0..n).map(|i| (f[i] - cost_ref[(i, j)]) / eps)))
            .collect()
    };
    let stats = |f: &[f64], g: &[f64]| -> Sweep {
        let mut s = Sweep {
            plan: DMatrix::zeros(n, m),
            row_sums: vec![0.0; n],
            col_sums: vec![0.0; m],
            dual: 0.0,
        };
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..m {
                let v = ((f[i] + g[j] - cost_ref[(i, j)]) / eps).exp();
                s.plan[(i, j)] = v;
                s.row_sums[i] += v;
                s.col_sums[j] += v;
                total += v;
            }
        }
        let fa: f64 = f.iter().zip(&a).map(|(x, y)| x * y).sum();
        let gb: f64 = g.iter().zip(&b).map(|(x, y)| x * y).sum();
        s.dual = fa + gb - eps * total;
        s
    };

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut dual = Vec::new();
    let mut iterations = 0;
    let mut row_res;
    let mut col_res;

    loop {
        for i in 0..n {
            f[i] = eps * log_a[i] - eps * log_sum_exp((0..m).map(|j| (g[j] - cc[(i, j)]) / eps));
        }
        g = g_of(&f);
        iterations += 1;
        let mut s = stats(&f, &g);

        // For small eps the plan couples rows only through tiny entries and
        // plain sweeps crawl. A damped Newton step on the dual with `g`
        // eliminated follows each sweep; it is kept only if it raises the
        // dual objective, so the tracked sequence stays monotone.
        if accelerate && n > 1 && n <= NEWTON_MAX_ROWS {
            if let Some((f_new, g_new, s_new)) = newton_step(&f, &s, &a, eps, &g_of, &stats) {
                f = f_new;
                g = g_new;
                s = s_new;
            }
        }

        row_res = s.row_sums.iter().zip(&a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        col_res = s.col_sums.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        dual.push(s.dual);

        if row_res <= tol && col_res <= tol {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::MaxIterExceeded {
                iterations,
                residual: row_res.max(col_res),
            });
        }
    }
    let plan_entry = |f: &[f64], g: &[f64], i: usize, j: usize| ((f[i] + g[j] - cc[(i, j)]) / eps).exp();

    let mut gamma = DMatrix::zeros(mu.len(), nu.len());
    let mut cost = 0.0;
    let mut kl = 0.0;
    for (ii, &i) in rows.iter().enumerate() {
        for (jj, &j) in cols.iter().enumerate() {
            let v = plan_entry(&f, &g, ii, jj);
            gamma[(i, j)] = v;
            cost += v * cc[(ii, jj)];
            // γ log(γ/φ) − γ + φ with log(γ/φ) = (f + g)/ε.
            kl += v * (f[ii] + g[jj]) / eps - v + (-cc[(ii, jj)] / eps).exp();
        }
    }
    Ok(TransportPlan {
        gamma,
        row_residual: row_res,
        col_residual: col_res,
        cost,
        kl_objective: kl,
        iterations,
        eps,
        dual_objective: dual,
        row_index: rows,
        col_index: cols,
    })
}

/// Optimal assignment by enumerating all permutations; returns the average
/// cost and the first optimal permutation in lexicographic order.
pub fn exact_ot_bruteforce(mu: &DiscreteMeasure, nu: &DiscreteMeasure, c: &DMatrix<f64>) -> Result<(f64, Vec<usize>)> {
    let n = mu.len();
    if nu.len() != n || c.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            expected: n * n,
            got: c.len(),
        });
    }
    if n > 9 {
        return Err(Error::TooLarge(n));
    }
    let uniform = |m: &DiscreteMeasure| m.weights.iter().all(|w| (w - 1.0 / n as f64).abs() <= 1e-12);
    if !uniform(mu) || !uniform(nu) {
        return Err(Error::InvalidInput("brute force needs uniform marginals of equal size".into()));
    }
    let mut best = (f64::INFINITY, Vec::new());
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
        if total < best.0 {
            best = (total, perm);
        }
    }
    Ok((best.0 / n as f64, best.1))
}

/// `C_ij = D_J(v_i, u_j)` with the gradient of `J` at `u_j`.
pub fn bregman_cost_matrix(j: &Functional, points_u: &[RealVec], points_v: &[RealVec]) -> Result<DMatrix<f64>> {
    match j {
        Functional::SquaredL2 | Functional::BoltzmannEntropy => {}
        Functional::WeightedL1 { .. } => return Err(Error::NotDifferentiable("weighted_l1".into())),
        Functional::Tv1d { .. } => return Err(Error::NotDifferentiable("tv1d".into())),
    }
    let pairs = points_u
        .iter()
        .map(|u| {
            if matches!(j, Functional::BoltzmannEntropy) && u.iter().any(|x| *x <= 0.0) {
                return Err(Error::NotDifferentiable("entropy at a nonpositive entry".into()));
            }
            subgradient_select(j, u)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut c = DMatrix::zeros(points_v.len(), points_u.len());
    for (i, v) in points_v.iter().enumerate() {
        for (k, pair) in pairs.iter().enumerate() {
            c[(i, k)] = bregman(j, v, pair)?.max(0.0);
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};

    fn swap_cost() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(gibbs_kernel(&DMatrix::zeros(2, 3), 0.7), DMatrix::from_element(2, 3, 1.0));
        let k = gibbs_kernel(&swap_cost(), 1.0);
        assert_abs_diff_eq!(k[(0, 1)], (-1.0f64).exp(), epsilon = 1e-16);
        assert_eq!(k[(1, 1)], 1.0);
        let wide = gibbs_kernel(&swap_cost(), 1e12);
        assert!((wide.add_scalar(-1.0)).amax() < 1e-11);
    }

    #[test]
    fn single_atom() {
        let one = DiscreteMeasure::uniform(1);
        let plan = sinkhorn(&one, &one, &DMatrix::from_element(1, 1, 2.5), 0.1, 1e-12, 10).unwrap();
        assert_eq!(plan.gamma[(0, 0)], 1.0);
        assert_eq!(plan.cost, 2.5);
    }

    #[test]
    fn two_by_two_closed_form() {
        let eps = 0.1;
        let half = DiscreteMeasure::uniform(2);
        let plan = sinkhorn(&half, &half, &swap_cost(), eps, 1e-14, 1000).unwrap();
        let r = (-1.0 / eps).exp();
        let a = 0.5 / (1.0 + r);
        let b = a * r;
        assert_abs_diff_eq!(plan.gamma[(0, 0)].ln(), a.ln(), epsilon = 1e-10);
        assert_abs_diff_eq!(plan.gamma[(0, 1)].ln(), b.ln(), epsilon = 1e-10);
        assert_abs_diff_eq!(plan.cost.ln(), (2.0 * b).ln(), epsilon = 1e-10);
        assert!(plan.dual_monotone());
    }

    #[test]
    fn zero_weight_atoms_are_dropped() {
        let mu = DiscreteMeasure::new(vec![0.5, 0.0, 0.5]).unwrap();
        let nu = DiscreteMeasure::uniform(2);
        let c = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 5.0, 5.0, 1.0, 0.0]);
        let plan = sinkhorn(&mu, &nu, &c, 0.05, 1e-12, 10_000).unwrap();
        assert_eq!(plan.row_index, vec![0, 2]);
        assert_eq!(plan.gamma.row(1).sum(), 0.0);
        assert!(plan.row_residual <= 1e-12);
        let empty = DiscreteMeasure { weights: vec![0.0, 0.0] };
        assert!(matches!(sinkhorn(&empty, &nu, &DMatrix::zeros(2, 2), 0.1, 1e-9, 10), Err(Error::EmptySupport)));
    }

    fn random_cost(seed: u64, n: usize) -> DMatrix<f64> {
        let mut rng = crate::rng::stream(seed, 0);
        DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn small_eps_approaches_assignment() {
        for (seed, n, eps) in [(1, 5, 0.005), (3, 6, 0.005), (5, 5, 0.01)] {
            let c = random_cost(seed, n);
            let u = DiscreteMeasure::uniform(n);
            let (exact, perm) = exact_ot_bruteforce(&u, &u, &c).unwrap();
            assert_eq!(perm.len(), n);
            let plan = sinkhorn(&u, &u, &c, eps, 1e-10, 10_000).unwrap();
            assert!(plan.row_residual <= 1e-10 && plan.col_residual <= 1e-10);
            assert!(plan.cost >= exact - 1e-9);
            assert!((plan.cost - exact).abs() <= 0.01 * exact, "{} vs {exact}", plan.cost);
            assert!(plan.dual_monotone());
        }
    }

    #[test]
    fn newton_steps_do_not_move_the_fixed_point() {
        let c = random_cost(9, 7);
        let u = DiscreteMeasure::uniform(7);
        let plain = sinkhorn_impl(&u, &u, &c, 0.2, 1e-13, 100_000, false).unwrap();
        let fast = sinkhorn(&u, &u, &c, 0.2, 1e-13, 100_000).unwrap();
        assert!(fast.iterations < plain.iterations);
        assert!((&plain.gamma - &fast.gamma).amax() <= 1e-12);
        assert!(plain.dual_monotone() && fast.dual_monotone());
    }

    #[test]
    fn transposed_problem_gives_transposed_plan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let c = DMatrix::from_fn(3, 4, |_, _| rng.random_range(0.0..1.0));
        let mu = DiscreteMeasure::new(vec![0.2, 0.3, 0.5]).unwrap();
        let nu = DiscreteMeasure::new(vec![0.1, 0.4, 0.25, 0.25]).unwrap();
        let p = sinkhorn(&mu, &nu, &c, 0.1, 1e-13, 100_000).unwrap();
        let q = sinkhorn(&nu, &mu, &c.transpose(), 0.1, 1e-13, 100_000).unwrap();
        assert!((&p.gamma - q.gamma.transpose()).amax() <= 1e-12);
    }

    #[test]
    fn brute_force_examples() {
        let u = DiscreteMeasure::uniform(3);
        assert_eq!(exact_ot_bruteforce(&u, &u, &DMatrix::zeros(3, 3)).unwrap(), (0.0, vec![0, 1, 2]));
        let h = DiscreteMeasure::uniform(2);
        assert_eq!(exact_ot_bruteforce(&h, &h, &swap_cost()).unwrap(), (0.0, vec![0, 1]));
        let ten = DiscreteMeasure::uniform(10);
        assert!(matches!(exact_ot_bruteforce(&ten, &ten, &DMatrix::zeros(10, 10)), Err(Error::TooLarge(10))));
    }

    #[test]
    fn bregman_costs() {
        let pts = vec![dvector![0.0, 1.0], dvector![2.0, -1.0]];
        let c = bregman_cost_matrix(&Functional::SquaredL2, &pts, &pts).unwrap();
        assert_eq!(c[(0, 0)], 0.0);
        assert_abs_diff_eq!(c[(0, 1)], 0.5 * (&pts[0] - &pts[1]).norm_squared(), epsilon = 1e-14);

        let us = vec![dvector![1.0], dvector![2.0]];
        let vs = vec![dvector![2.0], dvector![1.0]];
        let c = bregman_cost_matrix(&Functional::BoltzmannEntropy, &us, &vs).unwrap();
        // KL(v | u) = v log(v/u) + u − v.
        let kl = |v: f64, u: f64| v * (v / u).ln() + u - v;
        assert_abs_diff_eq!(c[(0, 0)], kl(2.0, 1.0), epsilon = 1e-14);
        assert_abs_diff_eq!(c[(0, 1)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c[(1, 0)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c[(1, 1)], kl(1.0, 2.0), epsilon = 1e-14);

        assert!(matches!(
            bregman_cost_matrix(&Functional::l1(), &us, &vs),
            Err(Error::NotDifferentiable(_))
        ));
    }
}

//! Bregman iteration for quadratic fidelity:
//! `u_{k+1} = argmin ½‖Ku − f‖² + α D_R^{p_k}(u, u_k)`.
//!
//! With `p_k = K*w_k` the step is an ordinary regularized solve with the
//! augmented data `f + α w_k`, and the dual witness of that solve is
//! `w_{k+1} = w_k + (f − Ku_{k+1})/α`. The iteration starts from `u₀ = 0`,
//! `p₀ = 0`, which minimizes every regularizer handled here.

use serde::{Deserialize, Serialize};

use crate::convex::{bregman, RealVec, SubgradientPair};
use crate::error::{Error, Result};
use crate::variational::{solve_warm, RegProblem, DEFAULT_MAX_ITER};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BregmanState {
    pub k: usize,
    #[serde(with = "crate::io::vec_serde")]
    pub u: RealVec,
    #[serde(with = "crate::io::vec_serde")]
    pub p: RealVec,
    #[serde(with = "crate::io::vec_serde")]
    pub w: RealVec,
    /// `‖Ku_k − f‖`
    pub residual: f64,
}

impl BregmanState {
    pub fn initial(problem: &RegProblem) -> Self {
        let n = problem.k.cols();
        BregmanState {
            k: 0,
            u: RealVec::zeros(n),
            p: RealVec::zeros(n),
            w: RealVec::zeros(problem.k.rows()),
            residual: problem.f.norm(),
        }
    }

    pub fn pair(&self) -> SubgradientPair {
        SubgradientPair::new(self.u.clone(), self.p.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StoppingRule {
    /// Stop at the first `k` with `‖Ku_k − f‖ ≤ τδ`.
    Discrepancy { delta: f64, tau: f64 },
    FixedIterations { n: usize },
}

impl StoppingRule {
    pub fn discrepancy(delta: f64) -> Self {
        StoppingRule::Discrepancy { delta, tau: 1.0 }
    }
}

/// One Bregman step from `state`, solved to KKT tolerance `tol`.
pub fn step(problem: &RegProblem, state: &BregmanState, tol: f64) -> Result<BregmanState> {
    let augmented = problem.with_data(&problem.f + &state.w * problem.alpha)?;
    let sol = solve_warm(&augmented, tol, DEFAULT_MAX_ITER, Some(&state.u))?;
    let residual = (problem.k.apply(&sol.u)? - &problem.f).norm();
    Ok(BregmanState {
        k: state.k + 1,
        u: sol.u,
        p: sol.p,
        w: sol.w,
        residual,
    })
}

/// Runs the iteration and returns the full history including `k = 0`.
///
/// With a discrepancy rule the last state is the first one meeting it. A
/// zero noise level is replaced by a relative floor of `1e-9 max(1, ‖f‖)` so
/// that exact data terminates once the iteration has reproduced it.
pub fn run(problem: &RegProblem, stop: StoppingRule, max_iter: usize, tol: f64) -> Result<Vec<BregmanState>> {
    let mut history = vec![BregmanState::initial(problem)];
    match stop {
        StoppingRule::FixedIterations { n } => {
            for _ in 0..n {
                let next = step(problem, history.last().expect("nonempty"), tol)?;
                history.push(next);
            }
            Ok(history)
        }
        StoppingRule::Discrepancy { delta, tau } => {
            if !(delta >= 0.0 && tau >= 1.0) {
                return Err(Error::InvalidInput(format!(
                    "discrepancy rule needs delta >= 0 and tau >= 1, got delta = {delta}, tau = {tau}"
                )));
            }
            let threshold = (tau * delta).max(1e-9 * problem.f.norm().max(1.0));
            loop {
                let last = history.last().expect("nonempty");
                if last.residual <= threshold {
                    return Ok(history);
                }
                if last.k >= max_iter {
                    return Err(Error::StoppingNotReached(history));
                }
                let next = step(problem, last, tol)?;
                history.push(next);
            }
        }
    }
}

/// `D_R^{p_k}(u*, u_k)`.
pub fn bregman_to_truth(problem: &RegProblem, state: &BregmanState, truth: &RealVec) -> Result<f64> {
    // Iterates are certified to solver tolerance, a little looser than the
    // default certificate.
    bregman(&problem.r, truth, &state.pair().with_tol(1e-8))
}

/// CSV rows `k, residual, R(u_k)[, D_R^{p_k}(u*, u_k)]`.
pub fn history_rows(problem: &RegProblem, history: &[BregmanState], truth: Option<&RealVec>) -> Result<Vec<Vec<f64>>> {
    history
        .iter()
        .map(|s| {
            let mut row = vec![s.k as f64, s.residual, problem.r.eval(&s.u)?];
            if let Some(t) = truth {
                row.push(bregman_to_truth(problem, s, t)?);
            }
            Ok(row)
        })
        .collect()
}

/// The same step computed directly from its definition: accelerated
/// proximal gradient on `½‖Ku − f‖² − α⟨p_k, u⟩ + αR(u)`. Slow; meant as an
/// independent cross-check of [`step`].
pub fn step_explicit(problem: &RegProblem, state: &BregmanState, max_iter: usize) -> Result<RealVec> {
    let k = &problem.k;
    let lipschitz = 1.01 * k.op_norm_squared();
    let tau = 1.0 / lipschitz;
    let mut x = state.u.clone();
    let mut y = x.clone();
    let mut t = 1.0_f64;
    for _ in 0..max_iter {
        let grad = k.apply_adjoint(&(k.apply(&y)? - &problem.f))? - &state.p * problem.alpha;
        let x_new = problem.r.prox(&(&y - grad * tau), tau * problem.alpha)?;
        let moved = (&x_new - &x).amax();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &x_new + (&x_new - &x) * ((t - 1.0) / t_next);
        t = t_next;
        x = x_new;
        if moved <= 1e-15 * (1.0 + x.amax()) {
            break;
        }
    }
    Ok(x)
}

pub fn history_to_csv(rows: &[Vec<f64>]) -> String {
    crate::io::rows_to_csv(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::Functional;
    use crate::operators::LinOp;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dvector, DMatrix};
    use rand::{Rng, SeedableRng};

    fn shrink(f: &RealVec, t: f64) -> RealVec {
        f.map(|x| x.signum() * (x.abs() - t).max(0.0))
    }

    fn worked() -> RegProblem {
        RegProblem::new(LinOp::identity(2), dvector![3.0, 1.0], 2.0, Functional::l1()).unwrap()
    }

    #[test]
    fn worked_example_matches_shrinkage_oracle() {
        let pr = worked();
        let mut state = BregmanState::initial(&pr);
        let expect_u = [dvector![1.0, 0.0], dvector![3.0, 0.0], dvector![3.0, 1.0]];
        let expect_p = [dvector![1.0, 0.5], dvector![1.0, 1.0]];
        for i in 0..3 {
            // u_{k+1} = shrink(f + α p_k, α) for K = I.
            let oracle = shrink(&(&pr.f + &state.p * pr.alpha), pr.alpha);
            state = step(&pr, &state, 1e-12).unwrap();
            assert_abs_diff_eq!((&state.u - &oracle).amax(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!((&state.u - &expect_u[i]).amax(), 0.0, epsilon = 1e-12);
            if i < 2 {
                assert_abs_diff_eq!((&state.p - &expect_p[i]).amax(), 0.0, epsilon = 1e-12);
            }
        }
        let again = step(&pr, &state, 1e-12).unwrap();
        assert_eq!(again.u, state.u);
    }

    #[test]
    fn exact_data_stops_at_three() {
        let pr = worked();
        let h = run(&pr, StoppingRule::discrepancy(0.0), 50, 1e-12).unwrap();
        assert_eq!(h.len(), 4);
        assert_abs_diff_eq!((&h[3].u - &pr.f).amax(), 0.0, epsilon = 1e-12);
        for pair in h.windows(2) {
            assert!(pair[1].residual <= pair[0].residual + 1e-14);
        }
        let truth = pr.f.clone();
        let d: Vec<f64> = h.iter().map(|s| bregman_to_truth(&pr, s, &truth).unwrap()).collect();
        assert!(d.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{d:?}");
    }

    #[test]
    fn large_noise_estimate_stops_immediately() {
        let pr = worked();
        let h = run(&pr, StoppingRule::discrepancy(pr.f.norm()), 50, 1e-12).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].u, RealVec::zeros(2));
    }

    #[test]
    fn max_iter_returns_partial_history() {
        let pr = worked();
        match run(&pr, StoppingRule::discrepancy(0.0), 1, 1e-12) {
            Err(Error::StoppingNotReached(h)) => assert_eq!(h.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn noisy_recovery_with_discrepancy() {
        let truth = dvector![2.0, 0.0, 0.0, 0.0];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let eta = RealVec::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let eta = eta.normalize() * 0.1;
        let pr = RegProblem::new(LinOp::identity(4), &truth + &eta, 1.0, Functional::l1()).unwrap();
        let h = run(&pr, StoppingRule::Discrepancy { delta: 0.1, tau: 1.01 }, 100, 1e-12).unwrap();
        assert!(h.last().unwrap().residual <= 0.101);
        let d: Vec<f64> = h.iter().map(|s| bregman_to_truth(&pr, s, &truth).unwrap()).collect();
        assert!(d.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{d:?}");
        for pair in h.windows(2) {
            assert!(pair[1].residual <= pair[0].residual + 1e-12);
        }
    }

    #[test]
    fn augmented_data_agrees_with_explicit_objective() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let k = LinOp::new(DMatrix::from_fn(6, 10, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let f = RealVec::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
        let pr = RegProblem::new(k, f, 0.5, Functional::l1()).unwrap();
        let mut state = BregmanState::initial(&pr);
        for _ in 0..4 {
            let direct = step_explicit(&pr, &state, 200_000).unwrap();
            state = step(&pr, &state, 1e-12).unwrap();
            assert!((&direct - &state.u).amax() <= 1e-7, "{}", (&direct - &state.u).amax());
        }
    }

    #[test]
    fn tv_iteration_residual_decreases() {
        let n = 16;
        let truth = RealVec::from_fn(n, |i, _| if i >= 6 { 1.0 } else { 0.0 });
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let f = &truth + RealVec::from_fn(n, |_, _| rng.random_range(-0.05..0.05));
        let pr = RegProblem::new(LinOp::identity(n), f, 0.5, Functional::tv1d(1.0)).unwrap();
        let h = run(&pr, StoppingRule::FixedIterations { n: 5 }, 5, 1e-10).unwrap();
        for pair in h.windows(2) {
            assert!(pair[1].residual <= pair[0].residual + 1e-12);
        }
        let rows = history_rows(&pr, &h, Some(&truth)).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].len(), 4);
    }
}

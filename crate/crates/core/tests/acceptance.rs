//! Acceptance suite: one line per criterion, `PASS` or `FAIL`, then a single
//! assertion that everything passed.

use std::io::Write;
use std::time::Instant;

use bregkit::bregman_iter::{self, BregmanState, StoppingRule};
use bregkit::fokker_planck::{self, FPProblem, Grid1D, GridFunction, Topology};
use bregkit::galerkin::{self, Load, Mesh1D, PLaplaceProblem};
use bregkit::iss::{self, SpectralFilter};
use bregkit::ot::{self, DiscreteMeasure};
use bregkit::rng::stream;
use bregkit::uq::{self, NoiseModel};
use bregkit::variational::{self, RegProblem, SourceTriple};
use bregkit::{
    bregman, dual_bregman_residual, infconv_bregman, subgradient_select, Functional, LinOp, RealVec, Sign,
    SignedSupport, SubgradientPair,
};
use nalgebra::{dvector, DMatrix};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gauss_vec(rng: &mut ChaCha8Rng, n: usize) -> RealVec {
    RealVec::from_fn(n, |_, _| gauss(rng))
}

fn gauss_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> DMatrix<f64> {
    let s = 1.0 / (m as f64).sqrt();
    DMatrix::from_fn(m, n, |_, _| s * gauss(rng))
}

fn sign_or(x: f64, rng: &mut ChaCha8Rng, w: f64) -> f64 {
    if x > 0.0 {
        w
    } else if x < 0.0 {
        -w
    } else {
        rng.random_range(-w..=w)
    }
}

/// A random pair `(u, p)` with `p ∈ ∂J(u)` built from the subdifferential
/// formulas directly, including non-canonical choices at kinks.
fn random_pair(j: &Functional, rng: &mut ChaCha8Rng, n: usize) -> SubgradientPair {
    match j {
        Functional::SquaredL2 => {
            let u = gauss_vec(rng, n);
            SubgradientPair::new(u.clone(), u)
        }
        Functional::WeightedL1 { weights } => {
            let u = RealVec::from_fn(n, |_, _| if rng.random_bool(0.3) { 0.0 } else { gauss(rng) });
            let p = RealVec::from_fn(n, |i, _| sign_or(u[i], rng, weights.get(i)));
            SubgradientPair::new(u, p)
        }
        Functional::BoltzmannEntropy => {
            let u = gauss_vec(rng, n).map(f64::exp);
            let p = u.map(f64::ln);
            SubgradientPair::new(u, p)
        }
        Functional::Tv1d { h } => {
            // Half-integer levels so that flat pieces occur.
            let u = RealVec::from_fn(n, |_, _| (2.0 * gauss(rng)).round() / 2.0);
            let phi: Vec<f64> = (0..n - 1).map(|i| sign_or(u[i + 1] - u[i], rng, 1.0)).collect();
            let p = RealVec::from_fn(n, |k, _| {
                let left = if k > 0 { phi[k - 1] } else { 0.0 };
                let right = if k < n - 1 { phi[k] } else { 0.0 };
                (left - right) / h
            });
            SubgradientPair::new(u, p)
        }
    }
}

fn functional_zoo(rng: &mut ChaCha8Rng, n: usize) -> Vec<Functional> {
    vec![
        Functional::SquaredL2,
        Functional::weighted_l1((0..n).map(|_| rng.random_range(0.5..2.0)).collect()),
        Functional::BoltzmannEntropy,
        Functional::tv1d(rng.random_range(0.1..1.0)),
    ]
}

fn criterion_1() -> Outcome {
    let mut rng = stream(101, 0);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut errors = 0;
    for _ in 0..125 {
        let n = rng.random_range(2..=8);
        for j in functional_zoo(&mut rng, n) {
            let a = random_pair(&j, &mut rng, n);
            let b = random_pair(&j, &mut rng, n);
            match (bregman(&j, &b.u, &a), dual_bregman_residual(&j, &a, &b)) {
                (Ok(d), Ok(r)) => worst = worst.max(r / (1.0 + d)),
                _ => errors += 1,
            }
            count += 1;
        }
    }
    outcome(
        worst <= 1e-8 && errors == 0,
        format!("{count} pairs, max |D - D*|/(1+D) = {worst:.2e}, errors {errors}"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = stream(102, 0);
    let mut worst: f64 = 0.0;
    let mut errors = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=10);
        let zoo = functional_zoo(&mut rng, n);
        for j in [&zoo[1], &zoo[3]] {
            let u = RealVec::from_fn(n, |_, _| if rng.random_bool(0.2) { 0.0 } else { gauss(&mut rng) });
            let Ok(pair) = subgradient_select(j, &u) else {
                errors += 1;
                continue;
            };
            for t in [rng.random_range(0.1..5.0), -rng.random_range(0.1..5.0)] {
                let tu = &u * t;
                let (Ok(d), Ok(jt)) = (bregman(j, &tu, &pair), j.eval(&tu)) else {
                    errors += 1;
                    continue;
                };
                let expect = if t > 0.0 { 0.0 } else { 2.0 * jt };
                worst = worst.max((d - expect).abs() / expect.abs().max(1.0));
            }
        }
    }
    outcome(
        worst <= 1e-12 && errors == 0,
        format!("200 vectors x 2 scalings, max relative deviation {worst:.2e}"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = stream(103, 0);
    let mut worst: f64 = 0.0;
    let mut young = true;
    let mut failures = Vec::new();
    for i in 0..50 {
        let (m, n) = (rng.random_range(4..=10), rng.random_range(4..=14));
        let k = LinOp::new(gauss_matrix(&mut rng, m, n)).unwrap();
        let f = gauss_vec(&mut rng, m) * 2.0;
        let f_tilde = &f + gauss_vec(&mut rng, m) * 0.3;
        let alpha = rng.random_range(0.05..1.0);
        let run = || -> bregkit::Result<(f64, bool)> {
            let pr = RegProblem::new(k.clone(), f.clone(), alpha, Functional::l1())?;
            let pt = pr.with_data(f_tilde.clone())?;
            let s = variational::solve(&pr, 1e-10, variational::DEFAULT_MAX_ITER)?;
            let st = variational::solve(&pt, 1e-10, variational::DEFAULT_MAX_ITER)?;
            let e = variational::bregman_error_identity(&pr, &s, &f_tilde, &st)?;
            let b = variational::one_sided_bounds(&pr, &s, &f_tilde, &st)?;
            Ok((e.residual / (1.0 + e.rhs), b.all()))
        };
        match run() {
            Ok((r, ok)) => {
                worst = worst.max(r);
                young &= ok;
            }
            Err(e) => failures.push(format!("instance {i}: {e}")),
        }
    }
    outcome(
        worst <= 1e-7 && young && failures.is_empty(),
        format!("50 instances, max residual/(1+rhs) = {worst:.2e}, Young bounds {young}, errors {failures:?}"),
    )
}

fn criterion_4() -> Outcome {
    let pr = RegProblem::new(LinOp::identity(2), dvector![3.0, 1.0], 2.0, Functional::l1()).unwrap();
    let h = match bregman_iter::run(&pr, StoppingRule::discrepancy(0.0), 20, 1e-12) {
        Ok(h) => h,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let expect = [dvector![0.0, 0.0], dvector![1.0, 0.0], dvector![3.0, 0.0], dvector![3.0, 1.0]];
    let exact = h.len() == 4 && h.iter().zip(&expect).all(|(s, e)| (&s.u - e).amax() <= 1e-10);
    let monotone = h.windows(2).all(|w| w[1].residual <= w[0].residual + 1e-14);
    let truth = pr.f.clone();
    let d: Vec<f64> = h.iter().map(|s| bregman_iter::bregman_to_truth(&pr, s, &truth).unwrap()).collect();
    let d_monotone = d.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    outcome(
        exact && monotone && d_monotone,
        format!(
            "iterates {:?}, residual monotone {monotone}, D(u*,u_k) = {d:?}",
            h.iter().map(|s| s.u.as_slice().to_vec()).collect::<Vec<_>>()
        ),
    )
}

struct IssCase {
    k: LinOp,
    f: RealVec,
    triple: SourceTriple,
}

/// Random 10x25 Gaussian operators with three-sparse truths; draws whose
/// certificate misses the margin are skipped.
fn iss_cases(count: usize) -> (Vec<IssCase>, usize) {
    let mut cases = Vec::new();
    let mut skipped = 0;
    let mut seed = 0;
    while cases.len() < count && seed < 10 * count as u64 {
        let mut rng = stream(105, seed);
        let k = LinOp::new(gauss_matrix(&mut rng, 10, 25)).unwrap();
        let idx = sample(&mut rng, 25, 3);
        let support = SignedSupport::from_pairs(
            idx.iter()
                .map(|i| (i, if rng.random_bool(0.5) { Sign::Plus } else { Sign::Minus })),
        );
        match variational::make_source_triple(&k, &support, seed, variational::DEFAULT_MARGIN) {
            Ok(triple) => {
                let f = k.apply(&triple.u_star).unwrap();
                cases.push(IssCase { k, f, triple });
            }
            Err(_) => skipped += 1,
        }
        seed += 1;
    }
    (cases, skipped)
}

/// Max deviation between the flow and Bregman iterates at the midpoints
/// of the intervals between breakpoints.
fn bregman_oracle_gap(case: &IssCase, traj: &iss::IssTrajectory) -> bregkit::Result<f64> {
    let bps = &traj.breakpoints;
    let gap = bps.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    // Twenty steps inside the shortest interval.
    let alpha = 20.0 / gap;
    let t_end = bps.last().copied().unwrap_or(0.0) + gap;
    let pr = RegProblem::new(case.k.clone(), case.f.clone(), alpha, Functional::l1())?;
    let mut state = BregmanState::initial(&pr);
    let mut mids: Vec<f64> = bps.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    mids.push(t_end);
    let mut worst: f64 = 0.0;
    for &t in &mids {
        let target = (t * alpha).round() as usize;
        while state.k < target {
            state = bregman_iter::step(&pr, &state, 1e-10)?;
        }
        let (u, _) = traj.at(state.k as f64 / alpha);
        worst = worst.max((&state.u - &u).amax());
    }
    Ok(worst)
}

fn criteria_5_and_6() -> (Outcome, Outcome) {
    let k2 = LinOp::identity(2);
    let f2 = dvector![3.0, 1.0];
    let worked = iss::iss_solve(&k2, &f2, 100).unwrap();
    let bps_ok = worked.breakpoints.len() == 3
        && (worked.breakpoints[1] - 1.0 / 3.0).abs() <= 1e-12
        && (worked.breakpoints[2] - 1.0).abs() <= 1e-12;
    let states_ok = (&worked.states[1] - dvector![3.0, 0.0]).amax() <= 1e-12
        && (&worked.states[2] - dvector![3.0, 1.0]).amax() <= 1e-12;
    let filter_ok = iss::spectral_filter(&worked, &SpectralFilter::Constant { value: 1.0 })
        .map(|u| (&u - &f2).amax() <= 1e-12)
        .unwrap_or(false);

    let (cases, skipped) = iss_cases(20);
    let mut terminal_err: f64 = 0.0;
    let mut oracle_err: f64 = 0.0;
    let mut p_max: f64 = 0.0;
    let mut decay_rows = 0;
    let mut decay_ok = true;
    let mut errors = Vec::new();
    let mut trajectories = vec![(k2.clone(), f2.clone(), worked.clone())];
    for (i, c) in cases.iter().enumerate() {
        match iss::iss_solve(&c.k, &c.f, 10_000) {
            Ok(traj) => {
                terminal_err = terminal_err.max((traj.final_state() - &c.triple.u_star).amax());
                for (kk, p) in traj.duals.iter().enumerate() {
                    p_max = p_max.max(p.amax());
                    if kk + 1 < traj.breakpoints.len() {
                        let dt = traj.breakpoints[kk + 1] - traj.breakpoints[kk];
                        p_max = p_max.max((p + &traj.slopes[kk] * dt).amax());
                    }
                }
                match bregman_oracle_gap(c, &traj) {
                    Ok(g) => oracle_err = oracle_err.max(g),
                    Err(e) => errors.push(format!("case {i} oracle: {e}")),
                }
                trajectories.push((c.k.clone(), c.f.clone(), traj));
            }
            Err(e) => errors.push(format!("case {i}: {e}")),
        }
    }
    let c5 = outcome(
        bps_ok && states_ok && filter_ok && cases.len() == 20 && terminal_err <= 1e-8 && oracle_err <= 1e-3
            && p_max <= 1.0 + 1e-12
            && errors.is_empty(),
        format!(
            "worked breakpoints {:?}, {} random cases ({skipped} skipped for margin), terminal err {terminal_err:.1e}, \
             oracle err {oracle_err:.1e}, max |p| {p_max:.15}, filter w=1 returns f {filter_ok}, errors {errors:?}",
            worked.breakpoints,
            cases.len()
        ),
    );

    for (k, f, traj) in &trajectories {
        match iss::decay_check(traj, k, f, traj.final_state()) {
            Ok(rows) => {
                decay_rows += rows.len();
                decay_ok &= rows.iter().all(|r| r.holds);
            }
            Err(e) => {
                decay_ok = false;
                errors.push(format!("decay: {e}"));
            }
        }
    }
    let c6 = outcome(
        decay_ok && trajectories.len() == 21,
        format!("{decay_rows} breakpoints over {} trajectories", trajectories.len()),
    );
    (c5, c6)
}

struct FpRun {
    mass_drift: f64,
    min_density: f64,
    monotone: bool,
    tail_rate: Option<f64>,
}

fn fp_run(prob: &FPProblem, u0: &GridFunction, dt: f64, t_end: f64) -> bregkit::Result<FpRun> {
    let u_inf = fokker_planck::steady_state(prob)?;
    let steps = (t_end / dt).round() as usize;
    let mut entropy = Vec::with_capacity(steps + 1);
    let mut mass_drift: f64 = 0.0;
    let mut min_density = f64::INFINITY;
    let mut last = u0.mass();
    fokker_planck::evolve_with(prob, u0, dt, steps, |_, u| {
        mass_drift = mass_drift.max((u.mass() - last).abs());
        last = u.mass();
        min_density = min_density.min(u.min());
        entropy.push(fokker_planck::relative_entropy(u, &u_inf).unwrap_or(f64::NAN));
    })?;
    let report = fokker_planck::dissipation_from_entropy(&entropy, dt);
    Ok(FpRun {
        mass_drift,
        min_density,
        monotone: report.is_ok() && entropy.iter().all(|e| e.is_finite()),
        tail_rate: report.ok().and_then(|r| r.tail_rate),
    })
}

fn criterion_7() -> Outcome {
    let cosine = |grid: &Grid1D| {
        let l = grid.length;
        GridFunction::from_fn(grid, |x| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x / l).cos()).unwrap()
    };
    let interval = Grid1D::new(1.0, 128, Topology::Interval).unwrap();
    let potential = FPProblem::potential(interval, |x| 4.0 * (x - 0.5)).unwrap();
    let ring = Grid1D::new(1.0, 128, Topology::Periodic).unwrap();
    let drift = FPProblem::constant_force(ring, 2.0).unwrap();
    let free_grid = Grid1D::new(1.0, 256, Topology::Periodic).unwrap();
    let free = FPProblem::constant_force(free_grid, 0.0).unwrap();

    let runs = [
        ("interval/potential", fp_run(&potential, &cosine(&interval), 1e-4, 0.5)),
        ("ring/drift c=2", fp_run(&drift, &cosine(&ring), 1e-4, 0.5)),
        ("free n=256", fp_run(&free, &cosine(&free_grid), 1e-5, 0.1)),
    ];
    let target = 8.0 * std::f64::consts::PI.powi(2);
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, run) in &runs {
        match run {
            Ok(r) => {
                pass &= r.mass_drift <= 1e-12 && r.min_density > 0.0 && r.monotone;
                parts.push(format!(
                    "{name}: mass drift {:.1e}, min {:.3}, monotone {}",
                    r.mass_drift, r.min_density, r.monotone
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    let rate = runs[2].1.as_ref().ok().and_then(|r| r.tail_rate);
    let rate_ok = rate.is_some_and(|k| (k - target).abs() <= 0.1 * target);
    parts.push(format!("tail rate {rate:?} vs 8pi^2 = {target:.3}"));
    outcome(pass && rate_ok, parts.join("; "))
}

/// Thomas algorithm for `(1/h) tridiag(−1, 2, −1) u = h·1`.
fn p2_oracle(m: usize) -> Vec<f64> {
    let n = m - 1;
    let h = 1.0 / m as f64;
    let (a, b, c) = (-1.0 / h, 2.0 / h, -1.0 / h);
    let d = vec![h; n];
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = c / b;
    dp[0] = d[0] / b;
    for i in 1..n {
        let den = b - a * cp[i - 1];
        cp[i] = c / den;
        dp[i] = (d[i] - a * dp[i - 1]) / den;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

fn criterion_8() -> Outcome {
    let mut rows = 0;
    let mut passed = 0;
    let mut parts = Vec::new();
    let mut ok = true;
    for (s, p) in [2.0, 3.0, 4.0].into_iter().enumerate() {
        let run = || -> bregkit::Result<galerkin::ProjectionReport> {
            let prob = PLaplaceProblem::new(p, Load::Constant(1.0))?;
            let u_h = galerkin::solve_galerkin(&prob, Mesh1D::new(16)?, 1e-12, 200)?.u;
            let u_ref = galerkin::solve_galerkin(&prob, Mesh1D::new(256)?, 1e-12, 200)?.u;
            let candidates = galerkin::random_candidates(&u_h, 100, 0.02, 108 + s as u64)?;
            galerkin::bregman_projection_check(&prob, &u_ref, &u_h, &candidates)
        };
        match run() {
            Ok(r) => {
                rows += r.rows.len();
                passed += r.rows.iter().filter(|x| x.passed).count();
                parts.push(format!("p={p}: D_h {:.3e}, tol_ref {:.1e}", r.d_galerkin, r.tol_ref));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("p={p}: {e}"));
            }
        }
    }
    let prob = PLaplaceProblem::new(2.0, Load::Constant(1.0)).unwrap();
    let u2 = galerkin::solve_galerkin(&prob, Mesh1D::new(16).unwrap(), 1e-13, 50).unwrap().u;
    let oracle = p2_oracle(16);
    let p2_err = u2.values.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(
        ok && rows == 300 && passed == 300 && p2_err <= 1e-10,
        format!("{passed}/{rows} rows, p=2 vs tridiagonal oracle {p2_err:.1e}; {}", parts.join("; ")),
    )
}

fn criterion_9() -> Outcome {
    let eps = 0.1;
    let half = DiscreteMeasure::uniform(2);
    let swap = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let mut parts = Vec::new();
    let mut pass = true;
    match ot::sinkhorn(&half, &half, &swap, eps, 1e-12, 1000) {
        Ok(plan) => {
            let r = (-1.0 / eps).exp();
            let a = 0.5 / (1.0 + r);
            let b = a * r;
            let err = (plan.cost.ln() - (2.0 * b).ln())
                .abs()
                .max((plan.gamma[(0, 0)].ln() - a.ln()).abs())
                .max((plan.gamma[(0, 1)].ln() - b.ln()).abs());
            pass &= err <= 1e-10 && plan.dual_monotone();
            parts.push(format!("2x2 cost {:.6e}, log error {err:.1e}", plan.cost));
        }
        Err(e) => {
            pass = false;
            parts.push(format!("2x2: {e}"));
        }
    }
    for (seed, n) in [(1u64, 5usize), (3, 6)] {
        let mut rng = stream(seed, 0);
        let c = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0));
        let u = DiscreteMeasure::uniform(n);
        let (exact, _) = ot::exact_ot_bruteforce(&u, &u, &c).unwrap();
        match ot::sinkhorn(&u, &u, &c, 0.005, 1e-8, 100_000) {
            Ok(plan) => {
                let rel = (plan.cost - exact).abs() / exact;
                let res = plan.row_residual.max(plan.col_residual);
                pass &= rel <= 0.01 && res <= 1e-8 && plan.dual_monotone();
                parts.push(format!(
                    "n={n} seed {seed}: cost {:.6} vs exact {exact:.6} (rel {rel:.1e}), residual {res:.1e}, \
                     {} sweeps, monotone {}",
                    plan.cost,
                    plan.iterations,
                    plan.dual_monotone()
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("n={n}: {e}"));
            }
        }
    }
    outcome(pass, parts.join("; "))
}

fn criterion_10() -> Outcome {
    let k = LinOp::identity(4);
    let triple = match variational::source_triple_for(&k, &dvector![2.0, 0.0, 0.0, 0.0], variational::DEFAULT_MARGIN) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("source triple: {e}")),
    };
    let sigma = 0.1;
    let alpha = uq::optimal_alpha(4, sigma, triple.w_star.norm());
    let noise = NoiseModel::new(sigma, 11).unwrap();
    // monte_carlo rejects the run if any sample breaks the identity.
    let first = uq::monte_carlo(&k, &triple, &noise, alpha, 1000);
    let second = uq::monte_carlo(&k, &triple, &noise, alpha, 1000);
    match (first, second) {
        (Ok((r1, s1)), Ok((r2, _))) => {
            let worst = s1
                .iter()
                .map(|s| (s.lhs(alpha, sigma) - s.rhs).abs() / s.rhs)
                .fold(0.0, f64::max);
            let replay = serde_json::to_string(&r1).unwrap() == serde_json::to_string(&r2).unwrap();
            outcome(
                r1.pass && replay && worst <= 1e-6,
                format!(
                    "alpha {alpha}, mean D {:.4e} +- {:.1e} vs bound {:.3}, E identity {:.5} vs {:.5}, \
                     worst per-sample {worst:.1e}, replay identical {replay}",
                    r1.mean_bregman, r1.ci, r1.bound, r1.lhs_mean, r1.rhs
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("{e}")),
    }
}

fn criterion_11() -> Outcome {
    let l1 = Functional::l1();
    let a = SubgradientPair::new(dvector![1.0], dvector![1.0]);
    let b = SubgradientPair::new(dvector![-1.0], dvector![-1.0]);
    let plus = infconv_bregman(&l1, &dvector![3.0], &a, &b).unwrap();
    let minus = infconv_bregman(&l1, &dvector![-3.0], &a, &b).unwrap();
    let d_plus = bregman(&l1, &dvector![3.0], &a).unwrap();
    let d_minus = bregman(&l1, &dvector![-3.0], &a).unwrap();
    let example = plus.value.abs() <= 1e-12 && minus.value.abs() <= 1e-12 && d_plus.abs() <= 1e-12 && (d_minus - 6.0).abs() <= 1e-12;

    let mut rng = stream(111, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let scalar_pair = |rng: &mut ChaCha8Rng| {
            let u = if rng.random_bool(0.25) { 0.0 } else { rng.random_range(-3.0..3.0) };
            SubgradientPair::new(dvector![u], dvector![sign_or(u, rng, 1.0)])
        };
        let p1 = scalar_pair(&mut rng);
        let p2 = scalar_pair(&mut rng);
        let u: f64 = rng.random_range(-3.0..3.0);
        let exact = infconv_bregman(&l1, &dvector![u], &p1, &p2).unwrap();
        // Grid search over v with step 1e-4 on a window containing 0 and u.
        let phi = |v: f64| {
            (u - v).abs() - p1.p[0] * (u - v - p1.u[0]) - p1.u[0].abs() + v.abs() - p2.p[0] * (v - p2.u[0]) - p2.u[0].abs()
        };
        let lo = u.min(0.0) - 1.0;
        let steps = ((u.abs() + 2.0) / 1e-4).ceil() as usize;
        let grid_min = (0..=steps).map(|i| phi(lo + i as f64 * 1e-4)).fold(f64::INFINITY, f64::min);
        worst = worst.max((exact.value - grid_min).abs()).max((phi(exact.argmin[0]) - grid_min).abs());
    }
    outcome(
        example && worst <= 1e-3,
        format!(
            "u=3: {:.1e} (plain {d_plus}), u=-3: {:.1e} (plain {d_minus}); 50 scalar instances, max gap to grid {worst:.1e}",
            plus.value, minus.value
        ),
    )
}

fn print_line(n: usize, o: &Outcome, secs: f64) {
    let line = format!(
        "acceptance criterion {n:>2}: {} [{secs:.2}s] {}\n",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    // Bypass the test harness capture so the lines land in the log.
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn timed(n: usize, f: impl FnOnce() -> Outcome) -> (usize, bool) {
    let t = Instant::now();
    let o = f();
    print_line(n, &o, t.elapsed().as_secs_f64());
    (n, o.pass)
}

#[test]
fn acceptance_criteria() {
    let mut results = vec![
        timed(1, criterion_1),
        timed(2, criterion_2),
        timed(3, criterion_3),
        timed(4, criterion_4),
    ];
    let t = Instant::now();
    let (c5, c6) = criteria_5_and_6();
    print_line(5, &c5, t.elapsed().as_secs_f64());
    print_line(6, &c6, 0.0);
    results.push((5, c5.pass));
    results.push((6, c6.pass));
    results.push(timed(7, criterion_7));
    results.push(timed(8, criterion_8));
    results.push(timed(9, criterion_9));
    results.push(timed(10, criterion_10));
    results.push(timed(11, criterion_11));

    let failed: Vec<usize> = results.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

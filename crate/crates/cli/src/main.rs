use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bregkit::bregman_iter::{self, StoppingRule};
use bregkit::fokker_planck::{self, ForceSpec, FPSpec, Topology};
use bregkit::galerkin::{self, Load, Mesh1D, PLaplaceProblem};
use bregkit::io;
use bregkit::iss::{self, SpectralFilter};
use bregkit::ot::{self, DiscreteMeasure};
use bregkit::uq::{self, NoiseModel};
use bregkit::variational::{self, AlphaRule, RegProblem};
use bregkit::{bregman, subgradient_select, Functional, LinOp, SubgradientPair};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "bregkit", version, about = "Bregman-distance experiments: solvers, flows and checks")]
struct Cli {
    /// JSON file with parameters; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a Bregman distance
    Bregman(BregmanArgs),
    /// Solve a regularized least-squares problem
    Solve(SolveArgs),
    /// Run the Bregman iteration
    Biter(BiterArgs),
    /// Inverse scale space flow and spectral filtering
    Iss(IssArgs),
    /// Fokker-Planck evolution and entropy dissipation
    Fp(FpArgs),
    /// p-Laplace Galerkin solve and projection check
    Galerkin(GalerkinArgs),
    /// Entropic optimal transport
    Sinkhorn(SinkhornArgs),
    /// Monte-Carlo check of the expected error bound
    Uq(UqArgs),
    /// Convergence rate study
    Rate(RateArgs),
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct FunctionalArgs {
    /// l2, l1, entropy or tv
    #[arg(long)]
    functional: Option<String>,
    /// Per-entry weights for l1 (CSV)
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Grid spacing for tv
    #[arg(long)]
    h: Option<f64>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct BregmanArgs {
    #[command(flatten)]
    #[serde(flatten)]
    functional: FunctionalArgs,
    #[arg(long)]
    v: Option<PathBuf>,
    #[arg(long)]
    u: Option<PathBuf>,
    /// Subgradient at u; defaults to the canonical selection
    #[arg(long)]
    p: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct SolveArgs {
    /// `identity:N` or a CSV matrix
    #[arg(long = "K")]
    #[serde(rename = "K")]
    k: Option<String>,
    #[arg(long)]
    f: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    functional: FunctionalArgs,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct BiterArgs {
    #[arg(long = "K")]
    #[serde(rename = "K")]
    k: Option<String>,
    #[arg(long)]
    f: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    functional: FunctionalArgs,
    /// Noise level for the discrepancy rule
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Run a fixed number of steps instead of the discrepancy rule
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Ground truth (CSV) for distance tracking
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct IssArgs {
    #[arg(long = "K")]
    #[serde(rename = "K")]
    k: Option<String>,
    #[arg(long)]
    f: Option<PathBuf>,
    #[arg(long)]
    max_breakpoints: Option<usize>,
    /// Low-pass filter keeping increments before this time
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(skip)]
    filter: Option<SpectralFilter>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct FpArgs {
    /// Domain length
    #[arg(long = "L")]
    #[serde(rename = "L")]
    length: Option<f64>,
    /// Number of cells
    #[arg(long)]
    n: Option<usize>,
    /// periodic or interval
    #[arg(long, value_parser = parse_json_string::<Topology>)]
    topology: Option<Topology>,
    /// Constant force; per-face values go in the config file
    #[arg(long, value_parser = parse_force)]
    force: Option<ForceSpec>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long = "T")]
    #[serde(rename = "T")]
    t_end: Option<f64>,
    /// Initial density (CSV); defaults to 1 + cos(2πx/L)/2
    #[arg(long)]
    u0: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct GalerkinArgs {
    #[arg(long)]
    p: Option<f64>,
    /// Constant load; sampled loads go in the config file
    #[arg(long, value_parser = parse_load)]
    f: Option<Load>,
    /// Coarse element count
    #[arg(long)]
    m: Option<usize>,
    /// Reference element count
    #[arg(long)]
    m_ref: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    /// Amplitude of the candidate perturbations
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct SinkhornArgs {
    #[arg(long)]
    mu: Option<PathBuf>,
    #[arg(long)]
    nu: Option<PathBuf>,
    #[arg(long = "C")]
    #[serde(rename = "C")]
    c: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct UqArgs {
    #[arg(long = "K")]
    #[serde(rename = "K")]
    k: Option<String>,
    /// Sparse ground truth (CSV)
    #[arg(long)]
    u_star: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Defaults to the minimizer of the bound
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct RateArgs {
    #[arg(long = "K")]
    #[serde(rename = "K")]
    k: Option<String>,
    #[arg(long)]
    u_star: Option<PathBuf>,
    /// Comma-separated noise levels
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// alpha = c * delta
    #[arg(long)]
    c: Option<f64>,
    /// Constant alpha, overrides c
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_json_string<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_force(s: &str) -> Result<ForceSpec, String> {
    s.parse::<f64>().map(ForceSpec::Constant).map_err(|e| e.to_string())
}

fn parse_load(s: &str) -> Result<Load, String> {
    s.parse::<f64>().map(Load::Constant).map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Lib(bregkit::Error),
    /// A check ran to completion and did not hold.
    Check(Value),
}

impl From<bregkit::Error> for Failure {
    fn from(e: bregkit::Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T> = Result<T, Failure>;

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Lib(e) if e.is_check_failure() => 2,
            Failure::Lib(_) => 1,
            Failure::Check(_) => 2,
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Failure::Usage(msg) => json!({ "error": "UsageError", "message": msg }),
            Failure::Lib(e) => {
                let mut v = json!({ "error": e.kind(), "message": e.to_string() });
                match e {
                    bregkit::Error::Io { path, .. } | bregkit::Error::Parse { path, .. } => {
                        v["path"] = json!(path);
                    }
                    _ => {}
                }
                v
            }
            Failure::Check(report) => json!({ "error": "CheckFailed", "message": "check did not hold", "report": report }),
        }
    }
}

/// Overlays the flags that were given on the config file contents.
fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> CliResult<T> {
    let mut base = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| bregkit::Error::Io {
                path: path.display().to_string(),
                source,
            })?;
            let v: Value = serde_json::from_str(&text).map_err(|e| bregkit::Error::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            if !v.is_object() {
                return Err(Failure::Usage("config file must hold a JSON object".into()));
            }
            v
        }
        None => json!({}),
    };
    let given = serde_json::to_value(flags).expect("arguments serialize");
    for (key, value) in given.as_object().expect("arguments are a struct") {
        if !value.is_null() {
            base[key] = value.clone();
        }
    }
    serde_json::from_value(base).map_err(|e| Failure::Usage(format!("bad config: {e}")))
}

fn required<T: Clone>(value: &Option<T>, name: &str) -> CliResult<T> {
    value.clone().ok_or_else(|| Failure::Usage(format!("missing required parameter `{name}`")))
}

fn load_operator(spec: &str) -> CliResult<LinOp> {
    if let Some(n) = spec.strip_prefix("identity:") {
        let n: usize = n
            .parse()
            .map_err(|_| Failure::Usage(format!("bad identity size in `{spec}`")))?;
        return Ok(LinOp::identity(n));
    }
    Ok(LinOp::new(io::read_matrix(Path::new(spec))?)?)
}

fn load_functional(args: &FunctionalArgs, n: usize) -> CliResult<Functional> {
    let name = args.functional.as_deref().unwrap_or("l1");
    let j = match name {
        "l2" => Functional::SquaredL2,
        "l1" => match &args.weights {
            Some(path) => Functional::weighted_l1(io::read_vector(path)?.iter().copied().collect()),
            None => Functional::l1(),
        },
        "entropy" => Functional::BoltzmannEntropy,
        "tv" => Functional::tv1d(args.h.unwrap_or(1.0)),
        other => return Err(Failure::Usage(format!("unknown functional `{other}`"))),
    };
    j.validate(n)?;
    Ok(j)
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: Option<&PathBuf>) -> Self {
        Output {
            dir: dir.cloned().unwrap_or_else(|| PathBuf::from("out")),
            files: Vec::new(),
        }
    }

    fn text(&mut self, name: &str, text: &str) -> CliResult<()> {
        io::write_text(&self.dir.join(name), text)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        io::write_json(&self.dir.join(name), value)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

/// What a subcommand hands back: the summary printed on stdout, whether its
/// check held, and the seed it used.
struct Finished {
    summary: Value,
    passed: bool,
    seed: Option<u64>,
}

impl Finished {
    fn ok(summary: Value) -> Self {
        Finished {
            summary,
            passed: true,
            seed: None,
        }
    }
}

fn run_bregman(a: &BregmanArgs, out: &mut Output) -> CliResult<Finished> {
    let v = io::read_vector(&required(&a.v, "v")?)?;
    let u = io::read_vector(&required(&a.u, "u")?)?;
    let j = load_functional(&a.functional, u.len())?;
    let pair = match &a.p {
        Some(p) => SubgradientPair::new(u, io::read_vector(p)?),
        None => subgradient_select(&j, &u)?,
    };
    let gap = pair.certify(&j)?;
    let value = bregman(&j, &v, &pair)?;
    let summary = json!({ "functional": j.name(), "value": value, "certificate_gap": gap });
    out.json("bregman.json", &summary)?;
    Ok(Finished::ok(summary))
}

fn regularized_problem(k: &Option<String>, f: &Option<PathBuf>, alpha: &Option<f64>, fa: &FunctionalArgs) -> CliResult<RegProblem> {
    let k = load_operator(&required(k, "K")?)?;
    let f = io::read_vector(&required(f, "f")?)?;
    let j = load_functional(fa, k.cols())?;
    Ok(RegProblem::new(k, f, required(alpha, "alpha")?, j)?)
}

fn run_solve(a: &SolveArgs, out: &mut Output) -> CliResult<Finished> {
    let problem = regularized_problem(&a.k, &a.f, &a.alpha, &a.functional)?;
    let sol = variational::solve(
        &problem,
        a.tol.unwrap_or(variational::DEFAULT_TOL),
        a.max_iter.unwrap_or(variational::DEFAULT_MAX_ITER),
    )?;
    out.text("u.csv", &io::vector_to_csv(&sol.u))?;
    out.text("p.csv", &io::vector_to_csv(&sol.p))?;
    out.text("w.csv", &io::vector_to_csv(&sol.w))?;
    let summary = json!({
        "objective": sol.objective,
        "kkt_residual": sol.kkt_residual,
        "certified": sol.certified,
        "iterations": sol.iterations,
        "u": sol.u.as_slice(),
    });
    out.json("solution.json", &summary)?;
    Ok(Finished::ok(summary))
}

fn run_biter(a: &BiterArgs, out: &mut Output) -> CliResult<Finished> {
    let problem = regularized_problem(&a.k, &a.f, &a.alpha, &a.functional)?;
    let rule = match (a.iterations, a.delta) {
        (Some(n), _) => StoppingRule::FixedIterations { n },
        (None, Some(delta)) => StoppingRule::Discrepancy {
            delta,
            tau: a.tau.unwrap_or(1.0),
        },
        (None, None) => return Err(Failure::Usage("give either `iterations` or `delta`".into())),
    };
    let truth = a.truth.as_ref().map(|p| io::read_vector(p)).transpose()?;
    let history = bregman_iter::run(&problem, rule, a.max_iter.unwrap_or(1000), a.tol.unwrap_or(1e-10))?;
    let rows = bregman_iter::history_rows(&problem, &history, truth.as_ref())?;
    out.text("history.csv", &bregman_iter::history_to_csv(&rows))?;
    let last = history.last().expect("history is never empty");
    out.text("u.csv", &io::vector_to_csv(&last.u))?;
    let summary = json!({ "steps": last.k, "residual": last.residual, "u": last.u.as_slice() });
    out.json("biter.json", &summary)?;
    Ok(Finished::ok(summary))
}

fn run_iss(a: &IssArgs, out: &mut Output) -> CliResult<Finished> {
    let k = load_operator(&required(&a.k, "K")?)?;
    let f = io::read_vector(&required(&a.f, "f")?)?;
    let traj = iss::iss_solve(&k, &f, a.max_breakpoints.unwrap_or(10_000))?;
    out.text("trajectory.json", &traj.to_json())?;
    out.text("trajectory.csv", &traj.to_csv())?;
    let filter = match (&a.filter, a.cutoff) {
        (Some(filt), _) => Some(filt.clone()),
        (None, Some(c)) => Some(SpectralFilter::lowpass(c)),
        (None, None) => None,
    };
    let mut summary = json!({
        "breakpoints": traj.breakpoints,
        "final_state": traj.final_state().as_slice(),
        "terminal": traj.terminal,
    });
    if let Some(filt) = filter {
        let filtered = iss::spectral_filter(&traj, &filt)?;
        out.text("filtered.csv", &io::vector_to_csv(&filtered))?;
        summary["filtered"] = json!(filtered.as_slice());
    }
    Ok(Finished::ok(summary))
}

fn run_fp(a: &FpArgs, out: &mut Output) -> CliResult<Finished> {
    let spec = FPSpec {
        length: a.length.unwrap_or(1.0),
        n: required(&a.n, "n")?,
        topology: a.topology.unwrap_or(Topology::Periodic),
        force: a.force.clone().unwrap_or(ForceSpec::Constant(0.0)),
        dt: required(&a.dt, "dt")?,
        t_end: required(&a.t_end, "T")?,
        u0: a.u0.as_ref().map(|p| io::read_vector(p).map(|v| v.iter().copied().collect())).transpose()?,
    };
    let prob = spec.problem()?;
    let u0 = spec.initial(&prob.grid)?;
    let u_inf = fokker_planck::steady_state(&prob)?;
    let steps = (spec.t_end / spec.dt).round() as usize;

    let mut entropy = Vec::with_capacity(steps + 1);
    let mut mass_drift: f64 = 0.0;
    let mut min_density = f64::INFINITY;
    let mut last_mass = u0.mass();
    let mut final_state = u0.clone();
    let mut entropy_err = None;
    fokker_planck::evolve_with(&prob, &u0, spec.dt, steps, |_, u| {
        let m = u.mass();
        mass_drift = mass_drift.max((m - last_mass).abs());
        last_mass = m;
        min_density = min_density.min(u.min());
        match fokker_planck::relative_entropy(u, &u_inf) {
            Ok(d) => entropy.push(d),
            Err(e) => entropy_err = entropy_err.take().or(Some(e)),
        }
        final_state = u.clone();
    })?;
    if let Some(e) = entropy_err {
        return Err(e.into());
    }
    out.text("steady.csv", &io::vector_to_csv(&u_inf.values))?;
    out.text("final.csv", &io::vector_to_csv(&final_state.values))?;
    let report = fokker_planck::dissipation_from_entropy(&entropy, spec.dt)?;
    out.text("dissipation.csv", &report.to_csv())?;

    let mass_ok = mass_drift <= 1e-12;
    let summary = json!({
        "steps": steps,
        "tail_rate": report.tail_rate,
        "initial_entropy": entropy.first(),
        "final_entropy": entropy.last(),
        "max_mass_drift": mass_drift,
        "min_density": min_density,
        "mass_conserved": mass_ok,
    });
    out.json("fp.json", &summary)?;
    Ok(Finished {
        summary,
        passed: mass_ok,
        seed: None,
    })
}

fn run_galerkin(a: &GalerkinArgs, out: &mut Output) -> CliResult<Finished> {
    let prob = PLaplaceProblem::new(a.p.unwrap_or(2.0), a.f.clone().unwrap_or(Load::Constant(1.0)))?;
    let tol = a.tol.unwrap_or(1e-12);
    let seed = a.seed.unwrap_or(0);
    let coarse = galerkin::solve_galerkin(&prob, Mesh1D::new(a.m.unwrap_or(16))?, tol, 500)?;
    let reference = galerkin::solve_galerkin(&prob, Mesh1D::new(a.m_ref.unwrap_or(256))?, tol, 500)?;
    let candidates = galerkin::random_candidates(&coarse.u, a.candidates.unwrap_or(100), a.scale.unwrap_or(0.01), seed)?;
    let report = galerkin::bregman_projection_check(&prob, &reference.u, &coarse.u, &candidates)?;
    out.text("u.csv", &io::vector_to_csv(&coarse.u.values))?;
    out.text("projection.csv", &report.to_csv())?;
    let summary = json!({
        "d_galerkin": report.d_galerkin,
        "tol_ref": report.tol_ref,
        "candidates": report.rows.len(),
        "all_passed": report.all_passed(),
        "newton_iterations": coarse.iterations,
        "energy": coarse.energies.last(),
    });
    out.json("galerkin.json", &summary)?;
    Ok(Finished {
        passed: report.all_passed(),
        summary,
        seed: Some(seed),
    })
}

fn run_sinkhorn(a: &SinkhornArgs, out: &mut Output) -> CliResult<Finished> {
    let mu = DiscreteMeasure::new(io::read_vector(&required(&a.mu, "mu")?)?.iter().copied().collect())?;
    let nu = DiscreteMeasure::new(io::read_vector(&required(&a.nu, "nu")?)?.iter().copied().collect())?;
    let c = io::read_matrix(&required(&a.c, "C")?)?;
    let plan = ot::sinkhorn(
        &mu,
        &nu,
        &c,
        required(&a.eps, "eps")?,
        a.tol.unwrap_or(1e-9),
        a.max_iter.unwrap_or(100_000),
    )?;
    out.text("plan.csv", &io::matrix_to_csv(&plan.gamma))?;
    let mut summary = plan.summary();
    summary["dual_monotone"] = json!(plan.dual_monotone());
    out.json("summary.json", &summary)?;
    Ok(Finished {
        passed: plan.dual_monotone(),
        summary,
        seed: None,
    })
}

fn run_uq(a: &UqArgs, out: &mut Output) -> CliResult<Finished> {
    let k = load_operator(&required(&a.k, "K")?)?;
    let u_star = io::read_vector(&required(&a.u_star, "u_star")?)?;
    let triple = variational::source_triple_for(&k, &u_star, a.margin.unwrap_or(variational::DEFAULT_MARGIN))?;
    let sigma = required(&a.sigma, "sigma")?;
    let noise = NoiseModel::new(sigma, a.seed.unwrap_or(0))?;
    let alpha = match a.alpha {
        Some(alpha) => alpha,
        None => uq::optimal_alpha(k.rows(), sigma, triple.w_star.norm()),
    };
    let (report, samples) = uq::monte_carlo(&k, &triple, &noise, alpha, a.samples.unwrap_or(1000))?;
    let rows: Vec<[f64; 4]> = samples.iter().map(|s| [s.d_sym, s.t1, s.t3, s.rhs]).collect();
    out.text("samples.csv", &io::rows_to_csv(&rows))?;
    out.json("report.json", &report)?;
    Ok(Finished {
        summary: serde_json::to_value(&report).expect("report serializes"),
        passed: report.pass,
        seed: Some(noise.seed),
    })
}

fn run_rate(a: &RateArgs, out: &mut Output) -> CliResult<Finished> {
    let k = load_operator(&required(&a.k, "K")?)?;
    let u_star = io::read_vector(&required(&a.u_star, "u_star")?)?;
    let triple = variational::source_triple_for(&k, &u_star, a.margin.unwrap_or(variational::DEFAULT_MARGIN))?;
    let levels = a.levels.clone().unwrap_or_else(|| vec![0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001]);
    let rule = match a.alpha {
        Some(alpha) => AlphaRule::Constant { alpha },
        None => AlphaRule::Proportional { c: a.c.unwrap_or(1.0) },
    };
    let seed = a.seed.unwrap_or(0);
    let rows = variational::rate_study(&k, &triple, &levels, rule, seed, a.tol.unwrap_or(variational::DEFAULT_TOL))?;
    let table: Vec<[f64; 5]> = rows.iter().map(|r| r.as_array()).collect();
    out.text("rate.csv", &io::rows_to_csv(&table))?;
    let summary = json!({ "rows": rows, "w_star_norm": triple.w_star.norm(), "margin": triple.margin });
    out.json("rate.json", &summary)?;
    Ok(Finished {
        summary,
        passed: true,
        seed: Some(seed),
    })
}

fn dispatch(cli: &Cli) -> CliResult<(String, Value, Output, Finished)> {
    let config = cli.config.as_deref();
    macro_rules! go {
        ($name:literal, $args:expr, $run:ident) => {{
            let args = merge($args, config)?;
            let mut out = Output::new(args.out.as_ref());
            let done = $run(&args, &mut out)?;
            let echo = serde_json::to_value(&args).expect("arguments serialize");
            Ok(($name.to_string(), echo, out, done))
        }};
    }
    match &cli.command {
        Command::Bregman(a) => go!("bregman", a, run_bregman),
        Command::Solve(a) => go!("solve", a, run_solve),
        Command::Biter(a) => go!("biter", a, run_biter),
        Command::Iss(a) => go!("iss", a, run_iss),
        Command::Fp(a) => go!("fp", a, run_fp),
        Command::Galerkin(a) => go!("galerkin", a, run_galerkin),
        Command::Sinkhorn(a) => go!("sinkhorn", a, run_sinkhorn),
        Command::Uq(a) => go!("uq", a, run_uq),
        Command::Rate(a) => go!("rate", a, run_rate),
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("BREGKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Failure::Usage(format!("BREGKIT_THREADS must be a count, got `{v}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(())
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("{}", serde_json::to_string_pretty(&f.to_json()).expect("json"));
    ExitCode::from(f.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(Failure::Usage(e.to_string())),
    };
    if let Err(f) = configure_threads() {
        return fail(f);
    }
    let start = Instant::now();
    let (name, echo, mut out, done) = match dispatch(&cli) {
        Ok(r) => r,
        Err(f) => return fail(f),
    };
    let manifest = json!({
        "toolkit": "bregkit",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": name,
        "config": echo,
        "seed": done.seed,
        "wall_time_s": start.elapsed().as_secs_f64(),
        "outputs": out.files.clone(),
    });
    if let Err(f) = out.json("manifest.json", &manifest) {
        return fail(f);
    }
    // A closed stdout (e.g. piped into `head`) is not an error of the run.
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&done.summary).expect("json"));
    if done.passed {
        ExitCode::SUCCESS
    } else {
        fail(Failure::Check(done.summary))
    }
}

//! Subcommand implementations. Each writes its artifacts into the output
//! directory and reports file names on standard error.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use ctsir::fluct::{clt_experiment, covariance_ode, is_psd, zero3, CltRow, CltSettings};
use ctsir::inference::{fit_closed_form, fit_numeric, FitResult, MultiplicativeModel};
use ctsir::io::{self, ObservedOptions};
use ctsir::oracle::{stationary_susceptibles, transient_distribution, Caps, TruncatedChain};
use ctsir::stats::{chi_square, ChiSquareTest, Summary};
use ctsir::{ensemble, map_replicas, simulate, solve_limit, solve_limit_exponential_reduction, EventKind, ModelSpec, SimulationConfig, Weight};

use crate::config::{format_psi, parse_caps, parse_model, parse_psi, RunConfig};
use crate::{Cli, Command, LimitMethod, OUT_DIR_ENV};

pub enum Outcome {
    Passed,
    CheckFailed,
}

pub fn dispatch(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Simulate(a) => {
            let mut cfg = load(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(g) = a.grid_step {
                cfg.grid_step = Some(g);
            }
            let dir = out_dir(cli, &cfg)?;
            simulate_cmd(&cfg, &dir)
        }
        Command::Limit(a) => {
            let mut cfg = load(&a.config)?;
            if let Some(h) = a.h {
                cfg.h = h;
            }
            let dir = out_dir(cli, &cfg)?;
            limit_cmd(&cfg, a.method, &dir)
        }
        Command::Fluct(a) => {
            let mut cfg = load(&a.config)?;
            if let Some(m) = a.replicas {
                cfg.replicas = m;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(h) = a.h {
                cfg.h = h;
            }
            let dir = out_dir(cli, &cfg)?;
            fluct_cmd(&cfg, &dir)
        }
        Command::Fit(a) => {
            let dir = out_dir(cli, &RunConfig::default())?;
            fit_cmd(a, &dir)
        }
        Command::Verify(a) => {
            let mut cfg = load(&a.config)?;
            if let Some(m) = a.replicas {
                cfg.replicas = m;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(c) = &a.caps {
                cfg.caps = Some(parse_caps(c)?);
            }
            if let Some(t) = a.t {
                cfg.horizon = t;
            }
            let dir = out_dir(cli, &cfg)?;
            verify_cmd(&cfg, a.alpha, &dir)
        }
        Command::Stationary(a) => {
            let dir = out_dir(cli, &RunConfig::default())?;
            stationary_cmd(a, &dir)
        }
    }
}

fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::parse(&text).with_context(|| format!("in config {}", path.display()))
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    eprintln!("writing {}", path.display());
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn simulate_cmd(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let traj = simulate(&cfg.simulation())?;
    io::write_event_log(create(dir, "events.jsonl")?, &traj)?;
    let grid = io::uniform_grid(traj.terminal_time, cfg.grid_step())?;
    io::write_trajectory_csv(create(dir, "trajectory.csv")?, &traj, &grid)?;
    let (s, i, r) = traj.final_counts();
    eprintln!(
        "{} events to t = {}; final S = {s}, I = {i}, R = {r}; detections {} spontaneous, {} traced",
        traj.events.len(),
        traj.terminal_time,
        traj.count_of(EventKind::SpontaneousDetection),
        traj.count_of(EventKind::TracedDetection)
    );
    Ok(Outcome::Passed)
}

fn limit_cmd(cfg: &RunConfig, method: LimitMethod, dir: &Path) -> Result<Outcome> {
    let (s0, i0) = cfg.densities();
    let sol = match method {
        LimitMethod::Convolution => solve_limit(&cfg.spec, s0, i0, cfg.horizon, cfg.h)?,
        LimitMethod::Exponential => solve_limit_exponential_reduction(&cfg.spec, s0, i0, cfg.horizon, cfg.h)?,
    };
    io::write_limit_csv(create(dir, "limit.csv")?, &sol)?;
    Ok(Outcome::Passed)
}

#[derive(Serialize)]
struct CovRow {
    t: f64,
    emp_ss: f64,
    emp_si: f64,
    emp_sr: f64,
    emp_ii: f64,
    emp_ir: f64,
    emp_rr: f64,
    th_ss: Option<f64>,
    th_si: Option<f64>,
    th_sr: Option<f64>,
    th_ii: Option<f64>,
    th_ir: Option<f64>,
    th_rr: Option<f64>,
}

/// Linear interpolation of a matrix sequence at fractional index `x`.
fn interpolate(seq: &[[[f64; 3]; 3]], x: f64) -> [[f64; 3]; 3] {
    let k = (x.floor().max(0.0) as usize).min(seq.len() - 1);
    let w = x - k as f64;
    if k + 1 == seq.len() || w <= 0.0 {
        return seq[k];
    }
    let mut out = seq[k];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += w * (seq[k + 1][r][c] - seq[k][r][c]);
        }
    }
    out
}

#[derive(Serialize)]
struct FluctReport {
    n: u64,
    replicas: u64,
    rows: Vec<CltRow>,
    /// Mean z-scores of the terminal projections.
    mean_z: Vec<f64>,
    /// Covariance ODE stayed positive semidefinite on the whole grid.
    theory_psd: Option<bool>,
}

fn fluct_cmd(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let n = cfg.spec.n as f64;
    let sim = cfg.simulation();
    let step = cfg.grid_step();
    let grid = io::uniform_grid(cfg.horizon, step)?;
    let (s0, i0) = cfg.densities();
    let sol = solve_limit(&cfg.spec, s0, i0, cfg.horizon, cfg.h)?;
    let theory = match cfg.spec.psi {
        Weight::Exponential { .. } => Some(covariance_ode(&sol, zero3())?),
        _ => {
            eprintln!("note: no covariance ODE for a non-exponential weight; theory columns left empty");
            None
        }
    };
    let moments = ensemble(&sim, cfg.replicas, &grid)?;
    let mut out = csv::Writer::from_writer(create(dir, "fluct.csv")?);
    for (k, &t) in grid.iter().enumerate() {
        // coordinates (s, i, r_psi) of the renormalized ensemble
        let c = &moments.covariance[k];
        let e = |a: usize, b: usize| n * c[a][b];
        let th = theory.as_ref().map(|cov| interpolate(&cov.sigma, t / cfg.h));
        let pick = |a: usize, b: usize| th.map(|m| m[a][b]);
        out.serialize(CovRow {
            t,
            emp_ss: e(0, 0),
            emp_si: e(0, 1),
            emp_sr: e(0, 2),
            emp_ii: e(1, 1),
            emp_ir: e(1, 2),
            emp_rr: e(2, 2),
            th_ss: pick(0, 0),
            th_si: pick(0, 1),
            th_sr: pick(0, 2),
            th_ii: pick(1, 1),
            th_ir: pick(1, 2),
            th_rr: pick(2, 2),
        })?;
    }
    out.flush()?;
    let settings = CltSettings {
        base: sim,
        s0,
        i0,
        scales: vec![cfg.spec.n],
        replicas: cfg.replicas,
        step: cfg.h,
        test_functions: vec![cfg.spec.psi],
    };
    let rows = clt_experiment(&settings)?;
    let report = FluctReport {
        n: cfg.spec.n,
        replicas: cfg.replicas,
        mean_z: rows[0].mean_z(),
        theory_psd: theory.as_ref().map(|cov| cov.sigma.iter().all(|m| is_psd(m, 1e-10))),
        rows,
    };
    write_json(dir, "fluct.json", &report)?;
    Ok(Outcome::Passed)
}

#[derive(Serialize)]
struct NewtonCheck {
    theta: Vec<f64>,
    std: Vec<Option<f64>>,
    iterations: usize,
    information_psd: bool,
    max_relative_gap: f64,
}

#[derive(Serialize)]
struct FitReport {
    source: String,
    model: String,
    psi: String,
    n: u64,
    lambda2_hat: f64,
    lambda3_hat: f64,
    std_lambda2: Option<f64>,
    std_lambda3: Option<f64>,
    log_likelihood: f64,
    spontaneous_detections: u64,
    traced_detections: u64,
    degenerate: Vec<bool>,
    fisher: Vec<Vec<f64>>,
    newton: Option<NewtonCheck>,
    warnings: Vec<String>,
    fit: FitResult<f64>,
}

fn fit_cmd(a: &crate::FitArgs, dir: &Path) -> Result<Outcome> {
    let model = parse_model(&a.model)?;
    let mut warnings = Vec::new();
    let (traj, source) = if let Some(path) = &a.log {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let traj = io::read_event_log(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
        (traj, path.display().to_string())
    } else {
        let path = a.observed.as_ref().expect("clap enforces one source");
        let psi = parse_psi(a.psi.as_deref().ok_or_else(|| ctsir::Error::Usage("--psi is required with --observed".into()))?)?;
        let mut opts = ObservedOptions::new(ModelSpec { n: a.n, psi, tracing: model.with_coefficient(0.0), ..ModelSpec::zero() });
        opts.initial_infectives = a.i0;
        opts.initial_susceptibles = a.s0;
        opts.origin = a.origin.clone();
        opts.horizon = a.horizon;
        if let Some(p) = &a.population {
            opts.population = io::read_population(File::open(p).with_context(|| format!("opening {}", p.display()))?)?;
        }
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let obs = io::read_observed(file, &opts).with_context(|| format!("reading {}", path.display()))?;
        for w in &obs.warnings {
            eprintln!("warning: {w}");
        }
        warnings = obs.warnings;
        (obs.trajectory, path.display().to_string())
    };
    let psi = match &a.psi {
        Some(p) => parse_psi(p)?,
        None => traj.config.spec.psi,
    };
    let fit = fit_closed_form(&traj, model, &psi)?;
    let newton = if a.newton {
        if fit.degenerate.iter().any(|&d| d) {
            return Err(ctsir::Error::Usage("numeric fit needs both detection types in the log".into()).into());
        }
        let start = [0.5 * fit.lambda2(), 0.5 * fit.lambda3()];
        let num = fit_numeric(&traj, &MultiplicativeModel(model), model, &psi, &start)?;
        let gap = (0..2).map(|j| ((num.theta[j] - fit.theta[j]) / fit.theta[j]).abs()).fold(0.0, f64::max);
        Some(NewtonCheck { theta: num.theta, std: num.std, iterations: num.iterations, information_psd: num.information_psd, max_relative_gap: gap })
    } else {
        None
    };
    let report = FitReport {
        source,
        model: a.model.trim().to_uppercase(),
        psi: format_psi(&psi),
        n: fit.n,
        lambda2_hat: fit.lambda2(),
        lambda3_hat: fit.lambda3(),
        std_lambda2: fit.std[0],
        std_lambda3: fit.std[1],
        log_likelihood: fit.log_likelihood,
        spontaneous_detections: fit.counts.0,
        traced_detections: fit.counts.1,
        degenerate: fit.degenerate.clone(),
        fisher: fit.fisher.clone(),
        newton,
        warnings,
        fit,
    };
    write_json(dir, "fit.json", &report)?;
    // a closed pipe on stdout is not a failure of the fit
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&report)?);
    Ok(Outcome::Passed)
}

#[derive(Serialize)]
struct MarginalCheck {
    name: &'static str,
    observed: Vec<u64>,
    expected: Vec<f64>,
    test: ChiSquareTest,
}

#[derive(Serialize)]
struct VerifyReport {
    t: f64,
    replicas: u64,
    initial: (u64, u64, u64),
    caps: Caps,
    lost: f64,
    truncation: f64,
    alpha: f64,
    marginals: Vec<MarginalCheck>,
    pass: bool,
}

/// Observed counts and expectations over `0..=cap` plus one overflow cell.
fn marginal_cells(values: &[u64], pmf: &[f64], m: u64) -> (Vec<u64>, Vec<f64>) {
    let cap = pmf.len();
    let mut obs = vec![0u64; cap + 1];
    for &v in values {
        obs[(v as usize).min(cap)] += 1;
    }
    let mut exp: Vec<f64> = pmf.iter().map(|p| p * m as f64).collect();
    exp.push((1.0 - pmf.iter().sum::<f64>()).max(0.0) * m as f64);
    (obs, exp)
}

fn verify_cmd(cfg: &RunConfig, alpha: f64, dir: &Path) -> Result<Outcome> {
    let spec = &cfg.spec;
    if !matches!(spec.psi, Weight::Constant { .. }) {
        return Err(ctsir::Error::Usage("verify needs a constant weight function (psi = const:L)".into()).into());
    }
    let t = cfg.horizon;
    let caps = match cfg.caps {
        Some((s, i, r)) => Caps::new(s, i, r),
        None => Caps::default_for(spec, cfg.s0, cfg.i0, t),
    };
    let chain = TruncatedChain::new(spec, caps, 1.0)?;
    let law = transient_distribution(&chain, (cfg.s0, cfg.i0, 0), t, cfg.epsilon)?;
    let sim = SimulationConfig { stop: Default::default(), ..cfg.simulation() };
    let finals = map_replicas(&sim, cfg.replicas, |_, traj| Ok(traj.final_counts()))?;
    let mut marginals = Vec::new();
    let columns: [(&'static str, Vec<f64>, fn(&(u64, u64, u64)) -> u64); 3] = [
        ("S", law.marginal_s(), |c| c.0),
        ("I", law.marginal_i(), |c| c.1),
        ("R", law.marginal_r(), |c| c.2),
    ];
    for (name, pmf, pick) in columns {
        let values: Vec<u64> = finals.iter().map(pick).collect();
        let (observed, expected) = marginal_cells(&values, &pmf, cfg.replicas);
        let test = chi_square(&observed, &expected)?;
        eprintln!("{name}: chi2 = {:.3}, dof = {}, p = {:.4}", test.statistic, test.dof, test.p_value);
        marginals.push(MarginalCheck { name, observed, expected, test });
    }
    let pass = marginals.iter().all(|m| m.test.p_value > alpha);
    let report = VerifyReport {
        t,
        replicas: cfg.replicas,
        initial: (cfg.s0, cfg.i0, 0),
        caps,
        lost: law.lost,
        truncation: law.truncation,
        alpha,
        marginals,
        pass,
    };
    write_json(dir, "verify.json", &report)?;
    Ok(if pass { Outcome::Passed } else { Outcome::CheckFailed })
}

#[derive(Serialize)]
struct StationaryReport {
    lambda0: f64,
    mu0: f64,
    t: f64,
    replicas: u64,
    poisson_mean: f64,
    summary: Summary,
    observed: Vec<u64>,
    expected: Vec<f64>,
    test: ChiSquareTest,
    max_balance_residual: f64,
    alpha: f64,
    pass: bool,
}

fn stationary_cmd(a: &crate::StationaryArgs, dir: &Path) -> Result<Outcome> {
    let spec = ModelSpec { lambda0: a.lambda0, mu0: a.mu0, ..ModelSpec::zero() };
    let sim = SimulationConfig::new(spec, a.s0, 0, a.t).with_seed(a.seed);
    let law = stationary_susceptibles(a.lambda0, a.mu0, a.k_max)?;
    let counts = map_replicas(&sim, a.replicas, |_, traj| Ok(traj.final_counts().0))?;
    let (observed, expected) = marginal_cells(&counts, &law.pmf, a.replicas);
    let test = chi_square(&observed, &expected)?;
    let summary = Summary::of(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    eprintln!("mean S = {:.4} (Poisson mean {}), chi2 p = {:.4}", summary.mean, law.mean, test.p_value);
    let pass = test.p_value > a.alpha;
    let report = StationaryReport {
        lambda0: a.lambda0,
        mu0: a.mu0,
        t: a.t,
        replicas: a.replicas,
        poisson_mean: law.mean,
        summary,
        observed,
        expected,
        max_balance_residual: law.residuals.iter().fold(0.0, |m, r| m.max(r.abs())),
        test,
        alpha: a.alpha,
        pass,
    };
    write_json(dir, "stationary.json", &report)?;
    Ok(Outcome::Passed)
}

//! Command-line driver: every verification campaign as a subcommand writing
//! CSV and JSON reports into `--out-dir`.
//!
//! Replica `r` of a campaign always draws from stream `r` of a generator
//! keyed by the master seed and the campaign label, and results are gathered
//! in replica order, so reports are byte-identical across reruns regardless
//! of the worker count.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::coupling::{CheckPolicy, CoupledHitting, Coupling, CouplingError, CouplingKind};
use crate::lattice::{leq_partial, BoxGeometry, KernelKind, Site};
use crate::offspring::bernoulli_sum_law;
use crate::oracle::{self, OrderViolation};
use crate::rng::{derive_seed, replica_rng};
use crate::simulator::{simulate_ct, HitTime, Process, SimError, StepKernel};
use crate::stats::{
    dominance_test_labeled, estimate_prob, DominanceStatus, DominanceVerdict, EmpiricalSample,
    MIN_DOMINANCE_SAMPLES,
};

/// Tolerance for the oracle ordering audits.
pub const AUDIT_TOL: f64 = 1e-10;

#[derive(Debug, Parser)]
#[command(name = "brw-lab", version, about = "Branching random walk simulation and verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of replicas.
    #[arg(long, global = true)]
    pub replicas: Option<u64>,
    /// Directory for CSV/JSON reports.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Override any config key, e.g. `--set n=4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Escape-probability grid and ordering audit.
    OracleGrid,
    /// Coupled replicas with invariant checks and hitting-time verdicts.
    Couple {
        /// axis-shift-1, diag-shift or axis-shift-2.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Rescaled generalized walks against the continuous-time walk.
    VerifyCorollary,
    /// Site-count dominance under free evolution.
    VerifyCounts,
    /// Plain hitting-time replicas, compared with the oracle CDF.
    Simulate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::OracleGrid => "oracle-grid",
            Command::Couple { .. } => "couple",
            Command::VerifyCorollary => "verify-corollary",
            Command::VerifyCounts => "verify-counts",
            Command::Simulate => "simulate",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("claim violated: {0}")]
    Violated(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::Violated(_) => 4,
            CliError::Io { .. } => 5,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<oracle::OracleError> for CliError {
    fn from(e: oracle::OracleError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<crate::lattice::LatticeError> for CliError {
    fn from(e: crate::lattice::LatticeError) -> Self {
        CliError::Config(ConfigError::Invalid(e.to_string()))
    }
}

fn io_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Resolves the configuration: defaults for the command, then the config
/// file, then `--set` overrides, then the dedicated flags.
pub fn resolve_config(command: &Command, common: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = defaults_for(command);
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for o in &common.overrides {
        cfg.apply_assignment(o)?;
    }
    if let Command::Couple { kind: Some(k) } = command {
        cfg.set("kind", k)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = common.replicas {
        cfg.replicas = r;
    }
    Ok(cfg.resolve()?)
}

/// Command-specific defaults layered over [`ExperimentConfig::default`].
pub fn defaults_for(command: &Command) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    match command {
        Command::OracleGrid | Command::Simulate => {}
        Command::Couple { .. } => c.n = 4,
        Command::VerifyCorollary => c.replicas = 100_000,
        Command::VerifyCounts => {
            c.kernel = KernelKind::Lazy;
            c.steps = 4;
            c.pairs = vec![(Site::xy(1, 0), Site::xy(2, 0))];
        }
    }
    c
}

/// Runs `f` on every replica index, gathering results in index order and
/// reporting the lowest-indexed error.
pub fn run_replicas<T, E, F>(replicas: u64, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(u64) -> Result<T, E> + Sync + Send,
{
    let results: Vec<Result<T, E>> = (0..replicas).into_par_iter().map(f).collect();
    results.into_iter().collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn coord_header(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).collect()
}

fn opt_time(t: Option<HitTime>) -> String {
    t.map(|t| t.to_string()).unwrap_or_default()
}

/// Report envelope shared by every command.
#[derive(Debug, Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
    result: &'a T,
}

fn write_report<T: Serialize>(out: &Path, file: &str, command: &str, cfg: &ExperimentConfig, result: &T) -> Result<(), CliError> {
    write_json(
        &out.join(file),
        &Envelope {
            command,
            seed: cfg.seed,
            config: cfg,
            result,
        },
    )
}

/// Resolves the configuration, runs the command and returns a one-line summary.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = resolve_config(&cli.command, &cli.common)?;
    let out = &cli.common.out_dir;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    match &cli.command {
        Command::OracleGrid => cmd_oracle_grid(&cfg, out).map(|r| r.summary()),
        Command::Couple { .. } => cmd_couple(&cfg, out).map(|r| r.summary()),
        Command::VerifyCorollary => cmd_verify_corollary(&cfg, out).map(|r| r.summary()),
        Command::VerifyCounts => cmd_verify_counts(&cfg, out).map(|r| r.summary()),
        Command::Simulate => cmd_simulate(&cfg, out).map(|r| r.summary()),
    }
}

// ---------------------------------------------------------------- oracle-grid

#[derive(Debug, Clone, Serialize)]
pub struct AuditSection {
    pub pairs_checked: usize,
    pub violations: Vec<OrderViolation>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleGridReport {
    pub iterations: u64,
    pub residual: f64,
    pub tolerance: f64,
    pub interior_sites: usize,
    pub vacuous: bool,
    pub escape_monotonicity: AuditSection,
    /// Lazy kernel only.
    pub cdf_dominance: Option<AuditSection>,
}

impl OracleGridReport {
    pub fn violation_count(&self) -> usize {
        self.escape_monotonicity.violations.len()
            + self.cdf_dominance.as_ref().map_or(0, |c| c.violations.len())
    }

    fn summary(&self) -> String {
        format!(
            "oracle-grid: {} sweeps, residual {:.3e}, {} ordering violations{}",
            self.iterations,
            self.residual,
            self.violation_count(),
            if self.vacuous { " (vacuous audit)" } else { "" }
        )
    }
}

/// Writes `grid.csv` and `audit.json`.
pub fn cmd_oracle_grid(cfg: &ExperimentConfig, out: &Path) -> Result<OracleGridReport, CliError> {
    let geom = BoxGeometry::new(cfg.dim, cfg.n)?;
    let law = cfg.offspring_law()?;
    let e = oracle::escape_probability_grid(&geom, cfg.kernel, &law, cfg.eps, cfg.max_iter)?;

    let mut header = coord_header(cfg.dim);
    header.extend(["p".to_string(), "q".to_string(), "boundary".to_string()]);
    let rows: Vec<Vec<String>> = e
        .p
        .iter()
        .zip(&e.q.values)
        .map(|((s, p), q)| {
            let mut r: Vec<String> = s.coords().iter().map(|c| c.to_string()).collect();
            r.push(format!("{p:.17e}"));
            r.push(format!("{q:.17e}"));
            r.push((s.sup_norm() == cfg.n).to_string());
            r
        })
        .collect();
    write_csv(&out.join("grid.csv"), &header, &rows)?;

    let (pairs_checked, violations) = oracle::audit_increasing(&e.p, AUDIT_TOL);
    let cdf_dominance = if cfg.kernel == KernelKind::Lazy {
        let cdf = oracle::hitting_cdf_grid(&geom, cfg.kernel, &law, cfg.t_max)?;
        let (pairs_checked, violations) = oracle::audit_cdf_dominance(&cdf, AUDIT_TOL);
        Some(AuditSection {
            pairs_checked,
            violations,
        })
    } else {
        None
    };
    let report = OracleGridReport {
        iterations: e.iterations,
        residual: e.residual,
        tolerance: AUDIT_TOL,
        interior_sites: geom.interior_sites().count(),
        vacuous: pairs_checked == 0,
        escape_monotonicity: AuditSection {
            pairs_checked,
            violations,
        },
        cdf_dominance,
    };
    write_report(out, "audit.json", "oracle-grid", cfg, &report)?;
    if report.violation_count() > 0 {
        return Err(CliError::Violated(format!(
            "{} ordering violations in the oracle grid",
            report.violation_count()
        )));
    }
    Ok(report)
}

// --------------------------------------------------------------------- couple

#[derive(Debug, Clone, Serialize)]
pub struct FreeRunSection {
    pub replicas: u64,
    pub steps: u64,
    pub capped: u64,
    pub extinct: u64,
    pub even_diagonal_checks: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoupleReport {
    pub kind: CouplingKind,
    pub replicas: u64,
    pub invariant_violations: u64,
    pub tau0_observed: u64,
    pub ordering_exceptions: u64,
    pub s_mismatches: u64,
    pub u_mismatches: u64,
    pub censored_horizon: u64,
    pub censored_cap: u64,
    pub tau_verdict: Option<DominanceVerdict>,
    pub t_verdict: Option<DominanceVerdict>,
    pub free_run: Option<FreeRunSection>,
}

impl CoupleReport {
    fn summary(&self) -> String {
        format!(
            "couple {}: {} replicas, 0 invariant violations, {} ordering exceptions on {} observed paths, tau verdict {}",
            self.kind,
            self.replicas,
            self.ordering_exceptions,
            self.tau0_observed,
            self.tau_verdict
                .as_ref()
                .map_or("skipped".to_string(), |v| v.status.to_string())
        )
    }
}

fn coupling_from(cfg: &ExperimentConfig) -> Result<Coupling, CliError> {
    let law = cfg.offspring_law()?;
    let check = match cfg.check_every {
        0 => CheckPolicy::Off,
        1 => CheckPolicy::EveryStep,
        k => CheckPolicy::Every(k),
    };
    Ok(Coupling::new(cfg.kind, law)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?
        .with_sampling(cfg.sampling)
        .with_cap(cfg.cap)
        .with_check(check))
}

fn coupling_failure(out: &Path, e: CouplingError) -> CliError {
    match e {
        CouplingError::Violation(v) => {
            let dump = v.to_string();
            // best effort: the violation itself is the error being reported
            let _ = fs::write(out.join("violation.txt"), format!("{dump}\n"));
            CliError::Invariant(dump)
        }
        CouplingError::RadiusTooSmall { .. } | CouplingError::NotPlanar(_) | CouplingError::UnexpectedSurvival { .. } => {
            CliError::Config(ConfigError::Invalid(e.to_string()))
        }
        other => CliError::Failed(other.to_string()),
    }
}

fn verdict(x: &EmpiricalSample, y: &EmpiricalSample, alpha: f64, claim: &str) -> Option<DominanceVerdict> {
    (x.len() >= MIN_DOMINANCE_SAMPLES && y.len() >= MIN_DOMINANCE_SAMPLES)
        .then(|| dominance_test_labeled(x, y, alpha, claim).expect("sample sizes checked"))
}

fn hit_sample<I: IntoIterator<Item = HitTime>>(times: I) -> EmpiricalSample {
    EmpiricalSample::from_counts(times.into_iter().map(HitTime::value))
}

/// Writes `replicas.csv` and `couple.json`.
pub fn cmd_couple(cfg: &ExperimentConfig, out: &Path) -> Result<CoupleReport, CliError> {
    if cfg.dim != 2 {
        return Err(ConfigError::Invalid("couplings are planar (dim = 2)".into()).into());
    }
    let coupling = coupling_from(cfg)?;
    let geom = BoxGeometry::new(2, cfg.n)?;
    let stream = derive_seed(cfg.seed, "couple-hitting");
    let runs: Vec<CoupledHitting> = run_replicas(cfg.replicas, |r| {
        let mut rng = replica_rng(stream, r);
        coupling.run_coupled_hitting(&geom, cfg.horizon, &mut rng)
    })
    .map_err(|e| coupling_failure(out, e))?;

    let header: Vec<String> = [
        "replica", "kind", "S", "T0", "T1", "U0", "U1", "tau0", "tau1", "censor", "max_population",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = runs
        .iter()
        .enumerate()
        .map(|(r, h)| {
            vec![
                r.to_string(),
                cfg.kind.to_string(),
                opt_time(h.near.s),
                opt_time(h.near.t),
                opt_time(h.far.t),
                opt_time(h.near.u),
                opt_time(h.far.u),
                h.near.tau.to_string(),
                h.far.tau.to_string(),
                h.censored.map(|c| c.to_string()).unwrap_or_default(),
                h.max_population.to_string(),
            ]
        })
        .collect();
    write_csv(&out.join("replicas.csv"), &header, &rows)?;

    let count = |f: &dyn Fn(&CoupledHitting) -> bool| runs.iter().filter(|h| f(h)).count() as u64;
    let tau0 = hit_sample(runs.iter().map(|h| h.near.tau));
    let tau1 = hit_sample(runs.iter().map(|h| h.far.tau));
    let t0 = hit_sample(runs.iter().filter_map(|h| h.near.t));
    let t1 = hit_sample(runs.iter().filter_map(|h| h.far.t));

    let free_run = if cfg.steps > 0 {
        let stream = derive_seed(cfg.seed, "couple-free");
        let even_checks = cfg.kind == CouplingKind::AxisShift2;
        let results = run_replicas(cfg.replicas, |r| {
            let mut rng = replica_rng(stream, r);
            let mut checks = 0u64;
            let run = coupling.run_free(cfg.steps, &mut rng, |s| {
                if even_checks && s.t % 2 == 0 {
                    checks += 1;
                    let bad = s.even_diagonal_violations();
                    if let Some(z) = bad.first() {
                        return Err(CouplingError::Violation(Box::new(crate::coupling::InvariantViolation {
                            invariant: crate::coupling::Invariant::EvenDiagonal,
                            kind: s.kind,
                            t: s.t,
                            detail: format!("even-diagonal count ordering fails at {z}"),
                            dump: s.to_string(),
                        })));
                    }
                }
                Ok(())
            })?;
            Ok::<_, CouplingError>((run, checks))
        })
        .map_err(|e| coupling_failure(out, e))?;
        Some(FreeRunSection {
            replicas: cfg.replicas,
            steps: cfg.steps,
            capped: results.iter().filter(|(r, _)| r.capped).count() as u64,
            extinct: results.iter().filter(|(r, _)| r.extinct).count() as u64,
            even_diagonal_checks: results.iter().map(|(_, c)| c).sum(),
        })
    } else {
        None
    };

    let report = CoupleReport {
        kind: cfg.kind,
        replicas: cfg.replicas,
        invariant_violations: 0,
        tau0_observed: count(&|h| h.near.tau.is_observed()),
        ordering_exceptions: count(&|h| !h.ordered()),
        s_mismatches: count(&|h| h.near.s != h.far.s),
        u_mismatches: count(&|h| h.near.u != h.far.u),
        censored_horizon: count(&|h| h.censored == Some(crate::simulator::Censor::Horizon)),
        censored_cap: count(&|h| h.censored == Some(crate::simulator::Censor::Cap)),
        tau_verdict: verdict(&tau0, &tau1, cfg.alpha, "tau1 <=_st tau0"),
        t_verdict: verdict(&t0, &t1, cfg.alpha, "T1 <=_st T0"),
        free_run,
    };
    write_report(out, "couple.json", "couple", cfg, &report)?;
    if report.ordering_exceptions > 0 || report.s_mismatches > 0 {
        return Err(CliError::Invariant(format!(
            "{} ordering exceptions, {} shared-component mismatches",
            report.ordering_exceptions, report.s_mismatches
        )));
    }
    if report.tau_verdict.as_ref().is_some_and(|v| v.status == DominanceStatus::Violated) {
        return Err(CliError::Violated("tau1 <=_st tau0".into()));
    }
    Ok(report)
}

// ------------------------------------------------------------------- simulate

#[derive(Debug, Clone, Serialize)]
pub struct CdfPoint {
    pub t: u64,
    pub hits: u64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub oracle: Option<f64>,
    pub oracle_inside: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub replicas: u64,
    pub start: Site,
    pub censored_horizon: u64,
    pub censored_cap: u64,
    pub cdf: Vec<CdfPoint>,
    pub escape_by_horizon: CdfPoint,
    pub oracle_escape: Option<f64>,
}

impl SimulateReport {
    fn summary(&self) -> String {
        let inside = self.cdf.iter().filter(|p| p.oracle_inside == Some(true)).count();
        format!(
            "simulate: {} replicas, oracle inside the interval at {}/{} times",
            self.replicas,
            inside,
            self.cdf.len()
        )
    }
}

/// Writes `hitting.csv` and `simulate.json`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<SimulateReport, CliError> {
    let geom = BoxGeometry::new(cfg.dim, cfg.n)?;
    let law = cfg.offspring_law()?;
    let process = Process::new(StepKernel::new(cfg.kernel, cfg.dim)?, law.clone())?
        .with_cap(cfg.cap)
        .with_sampling(cfg.sampling);
    let stream = derive_seed(cfg.seed, "simulate");
    let runs = run_replicas(cfg.replicas, |r| {
        let mut rng = replica_rng(stream, r);
        process.run_hitting(cfg.start, &geom, cfg.horizon, &mut rng)
    })?;
    let header: Vec<String> = ["replica", "tau", "censor", "started_on_boundary", "final_population"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = runs
        .iter()
        .enumerate()
        .map(|(r, h)| {
            vec![
                r.to_string(),
                h.tau.to_string(),
                h.censored.map(|c| c.to_string()).unwrap_or_default(),
                h.started_on_boundary.to_string(),
                h.final_population.to_string(),
            ]
        })
        .collect();
    write_csv(&out.join("hitting.csv"), &header, &rows)?;

    let exact = cfg.kernel != KernelKind::Generalized && cfg.survival == 0.0;
    let t_top = cfg.times.iter().copied().max().unwrap_or(0);
    let cdf_grid = if exact {
        Some(oracle::hitting_cdf_grid(&geom, cfg.kernel, &law, t_top)?)
    } else {
        None
    };
    let point = |t: u64, oracle: Option<f64>| -> Result<CdfPoint, CliError> {
        let hits = runs
            .iter()
            .filter(|h| h.tau.value().is_some_and(|v| v <= t))
            .count() as u64;
        let (estimate, lower, upper) =
            estimate_prob(hits, cfg.replicas, cfg.alpha).map_err(|e| CliError::Failed(e.to_string()))?;
        Ok(CdfPoint {
            t,
            hits,
            estimate,
            lower,
            upper,
            oracle,
            oracle_inside: oracle.map(|o| lower <= o && o <= upper),
        })
    };
    let cdf = cfg
        .times
        .iter()
        .map(|&t| point(t, cdf_grid.as_ref().and_then(|g| g.cdf(&cfg.start, t))))
        .collect::<Result<Vec<_>, _>>()?;
    let oracle_escape = if exact {
        let e = oracle::escape_probability_grid(&geom, cfg.kernel, &law, cfg.eps, cfg.max_iter)?;
        e.p.get(&cfg.start)
    } else {
        None
    };
    let report = SimulateReport {
        replicas: cfg.replicas,
        start: cfg.start,
        censored_horizon: runs.iter().filter(|h| h.censored == Some(crate::simulator::Censor::Horizon)).count() as u64,
        censored_cap: runs.iter().filter(|h| h.censored == Some(crate::simulator::Censor::Cap)).count() as u64,
        cdf,
        escape_by_horizon: point(cfg.horizon, None)?,
        oracle_escape,
    };
    write_report(out, "simulate.json", "simulate", cfg, &report)?;
    Ok(report)
}

// -------------------------------------------------------------- verify-counts

#[derive(Debug, Clone, Serialize)]
pub struct CountPairResult {
    pub x: Site,
    pub y: Site,
    pub skipped: Option<String>,
    pub verdict: Option<DominanceVerdict>,
    pub mean_x: f64,
    pub mean_y: f64,
    pub oracle_mean_x: f64,
    pub oracle_mean_y: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CountsReport {
    pub replicas: u64,
    pub steps: u64,
    pub censored: u64,
    pub pairs: Vec<CountPairResult>,
}

impl CountsReport {
    fn summary(&self) -> String {
        let statuses: Vec<String> = self
            .pairs
            .iter()
            .map(|p| match (&p.verdict, &p.skipped) {
                (Some(v), _) => format!("{}<={}: {}", p.y, p.x, v.status),
                (None, _) => format!("{}<={}: skipped", p.y, p.x),
            })
            .collect();
        format!("verify-counts: {}", statuses.join(", "))
    }
}

fn distinct_sites(pairs: &[(Site, Site)]) -> Vec<Site> {
    let mut v: Vec<Site> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
    v.sort();
    v.dedup();
    v
}

fn mean(xs: &[u64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64
}

/// Writes `counts.csv` and `counts.json`.
pub fn cmd_verify_counts(cfg: &ExperimentConfig, out: &Path) -> Result<CountsReport, CliError> {
    for (x, y) in &cfg.pairs {
        if !leq_partial(x, y)? {
            return Err(ConfigError::Invalid(format!("pair {x} : {y} is not ordered coordinatewise")).into());
        }
    }
    let law = cfg.offspring_law()?;
    let process = Process::new(StepKernel::new(cfg.kernel, cfg.dim)?, law.clone())?
        .with_cap(cfg.cap)
        .with_sampling(cfg.sampling);
    let sites = distinct_sites(&cfg.pairs);
    let stream = derive_seed(cfg.seed, "verify-counts");
    let samples: Vec<Option<Vec<u64>>> = run_replicas(cfg.replicas, |r| {
        let mut rng = replica_rng(stream, r);
        match process.evolve(cfg.start, cfg.steps, &mut rng) {
            Ok(f) => Ok(Some(sites.iter().map(|s| f.get(s)).collect())),
            Err(SimError::CapExceeded { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    })?;

    let mut header = vec!["replica".to_string()];
    header.extend(sites.iter().map(|s| format!("count{s}")));
    let rows: Vec<Vec<String>> = samples
        .iter()
        .enumerate()
        .map(|(r, s)| {
            let mut row = vec![r.to_string()];
            match s {
                Some(c) => row.extend(c.iter().map(|v| v.to_string())),
                None => row.extend(sites.iter().map(|_| "capped".to_string())),
            }
            row
        })
        .collect();
    write_csv(&out.join("counts.csv"), &header, &rows)?;

    let radius = cfg.start.sup_norm() + cfg.steps as i32 + 1;
    let mean_field = oracle::expected_counts_discrete(&cfg.start, cfg.kernel, &law, cfg.steps, radius)?;
    let column = |site: &Site| -> Vec<Option<u64>> {
        let i = sites.binary_search(site).expect("site listed");
        samples.iter().map(|s| s.as_ref().map(|c| c[i])).collect()
    };
    let parity_ok = |s: &Site| {
        cfg.kernel != KernelKind::Strict
            || (i64::from(s.parity()) - i64::from(cfg.start.parity()) - cfg.steps as i64).rem_euclid(2) == 0
    };
    let pairs = cfg
        .pairs
        .iter()
        .map(|(x, y)| {
            let cx = column(x);
            let cy = column(y);
            let observed = |c: &[Option<u64>]| c.iter().flatten().copied().collect::<Vec<u64>>();
            let skipped = (!parity_ok(x) || !parity_ok(y))
                .then(|| "count is zero almost surely at this parity".to_string());
            let verdict = if skipped.is_none() {
                verdict(
                    &EmpiricalSample::from_counts(cx.iter().copied()),
                    &EmpiricalSample::from_counts(cy.iter().copied()),
                    cfg.alpha,
                    &format!("count{y} <=_st count{x}"),
                )
            } else {
                None
            };
            CountPairResult {
                x: *x,
                y: *y,
                skipped,
                verdict,
                mean_x: mean(&observed(&cx)),
                mean_y: mean(&observed(&cy)),
                oracle_mean_x: mean_field.get(x).unwrap_or(0.0),
                oracle_mean_y: mean_field.get(y).unwrap_or(0.0),
            }
        })
        .collect::<Vec<_>>();
    let report = CountsReport {
        replicas: cfg.replicas,
        steps: cfg.steps,
        censored: samples.iter().filter(|s| s.is_none()).count() as u64,
        pairs,
    };
    write_report(out, "counts.json", "verify-counts", cfg, &report)?;
    if let Some(p) = report
        .pairs
        .iter()
        .find(|p| p.verdict.as_ref().is_some_and(|v| v.status == DominanceStatus::Violated))
    {
        return Err(CliError::Violated(format!("count{} <=_st count{}", p.y, p.x)));
    }
    Ok(report)
}

// ----------------------------------------------------------- verify-corollary

#[derive(Debug, Clone, Serialize)]
pub struct LadderRow {
    pub big_n: u64,
    pub probe: Site,
    pub gamma_site: Site,
    pub gamma_steps: u64,
    pub survival: f64,
    pub gamma_exact: f64,
    pub gamma_mc: Option<f64>,
    pub gamma_mc_censored: u64,
    pub zeta_oracle: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ZetaPairResult {
    pub x: Site,
    pub y: Site,
    /// Farther site dominated: `zeta(y) <=_st zeta(x)`.
    pub farther_dominated: Option<DominanceVerdict>,
    /// Reverse reading: `zeta(x) <=_st zeta(y)`.
    pub nearer_dominated: Option<DominanceVerdict>,
    pub mean_x: f64,
    pub mean_y: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorollaryReport {
    pub lambda: f64,
    pub t: f64,
    pub zeta_total_mass: f64,
    pub zeta_error_estimate: f64,
    pub ladder: Vec<LadderRow>,
    /// Per probe: does `|gamma - zeta|` shrink strictly along the ladder?
    pub trend_shrinking: Vec<(Site, bool)>,
    pub zeta_censored: u64,
    pub pairs: Vec<ZetaPairResult>,
}

impl CorollaryReport {
    pub fn trend_ok(&self) -> bool {
        self.trend_shrinking.iter().all(|(_, ok)| *ok)
    }

    fn summary(&self) -> String {
        let statuses: Vec<String> = self
            .pairs
            .iter()
            .map(|p| {
                format!(
                    "{}<={}: {}",
                    p.y,
                    p.x,
                    p.farther_dominated
                        .as_ref()
                        .map_or("skipped".to_string(), |v| v.status.to_string())
                )
            })
            .collect();
        format!(
            "verify-corollary: ladder trend {}, {}",
            if self.trend_ok() { "shrinking" } else { "not shrinking" },
            statuses.join(", ")
        )
    }
}

/// Writes `ladder.csv` and `corollary.json`.
pub fn cmd_verify_corollary(cfg: &ExperimentConfig, out: &Path) -> Result<CorollaryReport, CliError> {
    if cfg.dim != 2 {
        return Err(ConfigError::Invalid("the corollary campaign is planar (dim = 2)".into()).into());
    }
    for s in cfg.probes.iter().chain(cfg.pairs.iter().flat_map(|(a, b)| [a, b])) {
        if s.coords().iter().any(|&c| c < 0) {
            return Err(ConfigError::Invalid(format!("site {s} is not in the positive quadrant")).into());
        }
    }
    let origin = Site::xy(0, 0);
    let zeta = oracle::expected_counts_ct(&origin, cfg.lambda, cfg.t, cfg.radius, None)?;

    let mut ladder = Vec::new();
    for &big_n in &cfg.ladder {
        let law = bernoulli_sum_law(cfg.lambda, big_n)
            .and_then(|l| match cfg.ladder_survival {
                Some(pi) => l.with_survival(pi),
                None => Ok(l),
            })
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let steps = 2 * (big_n as f64 * cfg.t).floor() as u64;
        let window = steps as i32 + 1;
        let mean_field = oracle::expected_counts_discrete(&origin, KernelKind::Generalized, &law, steps, window)?;
        let process = Process::new(StepKernel::new(KernelKind::Generalized, 2)?, law.clone())?
            .with_cap(cfg.cap)
            .with_sampling(cfg.sampling);
        let stream = derive_seed(derive_seed(cfg.seed, "corollary-gamma"), &big_n.to_string());
        let fields = run_replicas(cfg.gamma_replicas, |r| {
            let mut rng = replica_rng(stream, r);
            match process.evolve(origin, steps, &mut rng) {
                Ok(f) => Ok(Some(f)),
                Err(SimError::CapExceeded { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })?;
        let censored = fields.iter().filter(|f| f.is_none()).count() as u64;
        for probe in &cfg.probes {
            let gamma_site = Site::xy(2 * probe.x(), 2 * probe.y());
            let gamma_exact = mean_field.get(&gamma_site).unwrap_or(0.0);
            let zeta_oracle = zeta.m.get(probe).unwrap_or(0.0);
            let gamma_mc = (cfg.gamma_replicas > 0 && censored == 0).then(|| {
                fields.iter().flatten().map(|f| f.get(&gamma_site) as f64).sum::<f64>() / cfg.gamma_replicas as f64
            });
            ladder.push(LadderRow {
                big_n,
                probe: *probe,
                gamma_site,
                gamma_steps: steps,
                survival: law.survival(),
                gamma_exact,
                gamma_mc,
                gamma_mc_censored: censored,
                zeta_oracle,
                gap: (gamma_exact - zeta_oracle).abs(),
            });
        }
    }
    let trend_shrinking = cfg
        .probes
        .iter()
        .map(|p| {
            let gaps: Vec<f64> = ladder.iter().filter(|r| r.probe == *p).map(|r| r.gap).collect();
            (*p, gaps.windows(2).all(|w| w[1] < w[0]))
        })
        .collect::<Vec<_>>();

    let sites = distinct_sites(&cfg.pairs);
    let stream = derive_seed(cfg.seed, "corollary-zeta");
    let samples: Vec<Option<Vec<u64>>> = run_replicas(cfg.replicas, |r| {
        let mut rng = replica_rng(stream, r);
        match simulate_ct(origin, cfg.lambda, cfg.t, cfg.cap, &mut rng) {
            Ok(f) => Ok(Some(sites.iter().map(|s| f.get(s)).collect())),
            Err(SimError::CapExceeded { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    })?;
    let column = |site: &Site| -> Vec<Option<u64>> {
        let i = sites.binary_search(site).expect("site listed");
        samples.iter().map(|s| s.as_ref().map(|c| c[i])).collect()
    };
    let pairs: Vec<ZetaPairResult> = cfg
        .pairs
        .iter()
        .map(|(x, y)| {
            let sx = EmpiricalSample::from_counts(column(x));
            let sy = EmpiricalSample::from_counts(column(y));
            ZetaPairResult {
                x: *x,
                y: *y,
                farther_dominated: verdict(&sx, &sy, cfg.alpha, &format!("zeta{y} <=_st zeta{x}")),
                nearer_dominated: verdict(&sy, &sx, cfg.alpha, &format!("zeta{x} <=_st zeta{y}")),
                mean_x: sx.values().iter().sum::<f64>() / sx.len() as f64,
                mean_y: sy.values().iter().sum::<f64>() / sy.len() as f64,
            }
        })
        .collect();

    let header: Vec<String> = [
        "N", "probe", "gamma_site", "gamma_steps", "survival", "gamma_exact", "gamma_mc",
        "gamma_mc_censored", "zeta_oracle", "gap",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = ladder
        .iter()
        .map(|r| {
            vec![
                r.big_n.to_string(),
                r.probe.to_string(),
                r.gamma_site.to_string(),
                r.gamma_steps.to_string(),
                format!("{:.17e}", r.survival),
                format!("{:.17e}", r.gamma_exact),
                r.gamma_mc.map(|v| format!("{v:.17e}")).unwrap_or_default(),
                r.gamma_mc_censored.to_string(),
                format!("{:.17e}", r.zeta_oracle),
                format!("{:.17e}", r.gap),
            ]
        })
        .collect();
    write_csv(&out.join("ladder.csv"), &header, &rows)?;

    let report = CorollaryReport {
        lambda: cfg.lambda,
        t: cfg.t,
        zeta_total_mass: zeta.total_mass,
        zeta_error_estimate: zeta.error_estimate,
        ladder,
        trend_shrinking,
        zeta_censored: samples.iter().filter(|s| s.is_none()).count() as u64,
        pairs,
    };
    write_report(out, "corollary.json", "verify-corollary", cfg, &report)?;
    if let Some(p) = report.pairs.iter().find(|p| {
        p.farther_dominated
            .as_ref()
            .is_some_and(|v| v.status == DominanceStatus::Violated)
    }) {
        return Err(CliError::Violated(format!("zeta{} <=_st zeta{}", p.y, p.x)));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("brw-lab").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_and_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        fs::write(&path, "seed = 3\nn = 2\nreplicas = 7\n").unwrap();
        let c = cli(&[
            "couple",
            "--kind",
            "diag-shift",
            "--config",
            path.to_str().unwrap(),
            "--set",
            "n=5",
            "--seed",
            "11",
        ]);
        let cfg = resolve_config(&c.command, &c.common).unwrap();
        assert_eq!((cfg.seed, cfg.n, cfg.replicas), (11, 5, 7));
        assert_eq!(cfg.kind, CouplingKind::DiagShift);
        assert_eq!(cfg.horizon, 250);
    }

    #[test]
    fn config_errors_exit_with_two() {
        let c = cli(&["simulate", "--set", "bogus=1"]);
        let err = resolve_config(&c.command, &c.common).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let c = cli(&["simulate", "--replicas", "0"]);
        assert_eq!(resolve_config(&c.command, &c.common).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn unit_box_grid_audit_is_vacuous() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = defaults_for(&Command::OracleGrid);
        cfg.n = 1;
        let r = cmd_oracle_grid(&cfg.resolve().unwrap(), dir.path()).unwrap();
        assert!(r.vacuous);
        assert!(dir.path().join("grid.csv").exists());
    }

    #[test]
    fn supercritical_without_deaths_escapes_surely() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = defaults_for(&Command::OracleGrid);
        cfg.law = vec![0.0, 0.5, 0.5];
        let r = cmd_oracle_grid(&cfg.resolve().unwrap(), dir.path()).unwrap();
        assert_eq!(r.violation_count(), 0);
        let text = fs::read_to_string(dir.path().join("grid.csv")).unwrap();
        for line in text.lines().skip(1) {
            let p: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
            assert!(p > 1.0 - 1e-10, "{line}");
        }
    }

    #[test]
    fn small_couple_campaign_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = defaults_for(&Command::Couple { kind: None });
        cfg.replicas = 150;
        cfg.steps = 6;
        cfg.kind = CouplingKind::AxisShift2;
        cfg.survival = 0.3;
        let r = cmd_couple(&cfg.resolve().unwrap(), dir.path()).unwrap();
        assert_eq!(r.ordering_exceptions, 0);
        assert!(r.tau_verdict.is_some());
        let csv = fs::read_to_string(dir.path().join("replicas.csv")).unwrap();
        assert!(csv.starts_with("replica,kind,S,T0,T1,U0,U1,tau0,tau1,censor,max_population\n"));
        assert_eq!(csv.lines().count(), 151);
    }

    #[test]
    fn survival_outside_axis_shift_2_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = defaults_for(&Command::Couple { kind: None });
        cfg.survival = 0.3;
        let err = cmd_couple(&cfg.resolve().unwrap(), dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn zero_time_corollary_is_the_initial_condition() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = defaults_for(&Command::VerifyCorollary);
        cfg.t = 0.0;
        cfg.replicas = 200;
        cfg.probes = vec![Site::xy(0, 0), Site::xy(1, 0)];
        let r = cmd_verify_corollary(&cfg.resolve().unwrap(), dir.path()).unwrap();
        for row in &r.ladder {
            let expect = if row.probe == Site::xy(0, 0) { 1.0 } else { 0.0 };
            assert_eq!(row.gamma_exact, expect);
            assert_eq!(row.zeta_oracle, expect);
        }
    }

    #[test]
    fn ladder_survival_override_reaches_every_rung() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = defaults_for(&Command::VerifyCorollary);
        cfg.replicas = 200;
        cfg.ladder = vec![20, 40];
        cfg.ladder_survival = Some(0.5);
        let r = cmd_verify_corollary(&cfg.clone().resolve().unwrap(), dir.path()).unwrap();
        assert!(r.ladder.iter().all(|row| row.survival == 0.5));
        cfg.ladder_survival = None;
        let r = cmd_verify_corollary(&cfg.resolve().unwrap(), dir.path()).unwrap();
        assert!((r.ladder[0].survival - (0.95f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn trivial_count_pair_is_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = defaults_for(&Command::VerifyCounts);
        cfg.replicas = 200;
        cfg.pairs = vec![(Site::xy(1, 0), Site::xy(1, 0))];
        let r = cmd_verify_counts(&cfg.resolve().unwrap(), dir.path()).unwrap();
        assert_eq!(r.pairs[0].verdict.as_ref().unwrap().status, DominanceStatus::Consistent);
    }

    #[test]
    fn strict_parity_mismatch_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = defaults_for(&Command::VerifyCounts);
        cfg.kernel = KernelKind::Strict;
        cfg.steps = 3;
        cfg.replicas = 100;
        cfg.pairs = vec![(Site::xy(1, 0), Site::xy(2, 1)), (Site::xy(0, 0), Site::xy(1, 1))];
        let r = cmd_verify_counts(&cfg.resolve().unwrap(), dir.path()).unwrap();
        assert!(r.pairs[0].skipped.is_none());
        assert!(r.pairs[1].skipped.is_some());
    }

    #[test]
    fn unordered_count_pair_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = defaults_for(&Command::VerifyCounts);
        cfg.pairs = vec![(Site::xy(2, 0), Site::xy(1, 0))];
        let err = cmd_verify_counts(&cfg.resolve().unwrap(), dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}

//! Command-line front end: `run`, `verify` and `list-scenarios`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::diagnostics::{
    audit_gradients_with, check_gram_psd, circular_orbit_check, oracle_equivalence, write_history,
    write_snapshots, DiagnosticsError, GradientFn, HISTORY_FILE,
};
use crate::scenario::{bundled_scenario, bundled_scenarios, resolve_scenario, Algorithm, TimeGrid};
use crate::solver::{run, IterationObserver, IterationRecord};
use crate::measure::{GramSystem, Mixture};

pub const OUT_DIR_ENV: &str = "OMMFC_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "results";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ommfc", version, about = "Occupation-measure mean-field control via Frank-Wolfe")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a scenario and write history.csv plus snapshots.
    Run(RunArgs),
    /// Run the verification suites.
    Verify(VerifyArgs),
    /// Print the bundled scenarios.
    ListScenarios,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgorithmArg {
    Fw,
    Fcfw,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Fw => Algorithm::Fw,
            AlgorithmArg::Fcfw => Algorithm::Fcfw,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario file or bundled scenario name.
    #[arg(long)]
    pub scenario: String,
    /// Output directory [default: $OMMFC_OUT_DIR or ./results]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: the scenario's algorithm, fcfw when unset]
    #[arg(long, value_enum)]
    pub algorithm: Option<AlgorithmArg>,
    /// Outer iterations, overriding the scenario.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated grid indices, or fractions of T when written with a
    /// decimal point [default: 0,N_t]
    #[arg(long, value_delimiter = ',')]
    pub snapshot_times: Option<Vec<String>>,
    /// Worker threads [default: all cores]
    #[arg(long)]
    pub threads: Option<usize>,
    /// Write zero in the lmo_seconds column.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Gradients,
    Psd,
    Oracles,
    Orbit,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Run only these suites [default: all]
    #[arg(long, value_enum, value_delimiter = ',')]
    pub suite: Vec<Suite>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Resolves `--snapshot-times` tokens against the grid.
pub fn parse_snapshot_times(tokens: &[String], grid: &TimeGrid) -> Result<Vec<usize>, String> {
    let mut out = Vec::with_capacity(tokens.len());
    for raw in tokens {
        let t = raw.trim();
        let index = if t.contains('.') {
            let f: f64 = t.parse().map_err(|_| format!("bad snapshot time `{t}`"))?;
            if !(0.0..=1.0).contains(&f) {
                return Err(format!("snapshot fraction {t} outside [0, 1]"));
            }
            (f * grid.steps as f64).round() as usize
        } else {
            t.parse().map_err(|_| format!("bad snapshot time `{t}`"))?
        };
        if index > grid.steps {
            return Err(format!("snapshot index {index} outside grid 0..={}", grid.steps));
        }
        out.push(index);
    }
    Ok(out)
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, String> {
    match threads {
        None => Ok(f()),
        Some(0) => Err("--threads must be positive".into()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| e.to_string()),
    }
}

fn io_exit(e: &DiagnosticsError) -> i32 {
    match e {
        DiagnosticsError::TimeIndex { .. } => EXIT_CONFIG,
        _ => EXIT_IO,
    }
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut cfg = match resolve_scenario(&args.scenario) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(a) = args.algorithm {
        cfg.solver.algorithm = a.into();
    }
    if let Some(k) = args.iters {
        cfg.solver.outer_iterations = k;
    }
    if let Some(s) = args.seed {
        cfg.solver.rng_seed = s;
    }
    let times = match &args.snapshot_times {
        Some(tokens) => parse_snapshot_times(tokens, &cfg.grid),
        None => Ok(vec![0, cfg.grid.steps]),
    };
    let times = match times {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    let dir = args
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));

    let result = match with_pool(args.threads, || run(&cfg, &mut ())) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => {
            let _ = writeln!(err, "error: solver failed: {e}");
            return EXIT_FAILURE;
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };

    if let Err(e) = std::fs::create_dir_all(&dir) {
        let _ = writeln!(err, "error: cannot create {}: {e}", dir.display());
        return EXIT_IO;
    }
    if let Err(e) = write_history(&result, dir.join(HISTORY_FILE), !args.no_timing) {
        let _ = writeln!(err, "error: {e}");
        return io_exit(&e);
    }
    if let Err(e) = write_snapshots(&result, &times, &dir) {
        let _ = writeln!(err, "error: {e}");
        return io_exit(&e);
    }
    let _ = writeln!(
        out,
        "{}: {} iterations, J = {:.10e}, wrote {}",
        cfg.name,
        result.history.len() - 1,
        result.final_objective(),
        dir.display()
    );
    EXIT_OK
}

struct PsdWatch {
    worst: f64,
    failures: usize,
    checked: usize,
}

impl IterationObserver for PsdWatch {
    fn on_iteration(&mut self, _: &IterationRecord, _: &Mixture, gram: &GramSystem) {
        self.checked += 1;
        match check_gram_psd(gram) {
            Ok(c) => {
                self.worst = self.worst.min(c.min_eigenvalue / c.max_eigenvalue.max(1.0));
                if !c.pass {
                    self.failures += 1;
                }
            }
            Err(_) => self.failures += 1,
        }
    }
}

fn suite_gradients(seed: u64, gradient: &GradientFn<'_>, out: &mut dyn Write) -> bool {
    let mut ok = true;
    for name in ["uav2d_single", "sat_constellation"] {
        let cfg = bundled_scenario(name).expect("bundled scenario");
        let report = audit_gradients_with(&cfg, 20, seed, gradient);
        let _ = writeln!(
            out,
            "  {name}: {} trials, max rel err {:.3e}, zero-dependence {:.3e}",
            report.trials, report.max_relative_error, report.zero_dependence_abs_error
        );
        ok &= report.pass;
    }
    ok
}

fn suite_psd(out: &mut dyn Write) -> bool {
    let mut cfg = bundled_scenario("uav2d_single").expect("bundled scenario");
    cfg.grid = TimeGrid::new(cfg.grid.horizon, 30);
    cfg.solver.outer_iterations = 8;
    cfg.solver.lmo_steps = 60;
    let mut watch = PsdWatch {
        worst: f64::INFINITY,
        failures: 0,
        checked: 0,
    };
    if let Err(e) = run(&cfg, &mut watch) {
        let _ = writeln!(out, "  run failed: {e}");
        return false;
    }
    let _ = writeln!(
        out,
        "  {} Gram matrices, worst min/max eigenvalue ratio {:.3e}",
        watch.checked, watch.worst
    );
    watch.failures == 0
}

fn suite_oracles(seed: u64, out: &mut dyn Write) -> bool {
    let r = oracle_equivalence(50, seed);
    let _ = writeln!(
        out,
        "  {} instances, objective rel err {:.3e}, rebuild abs err {:.3e}",
        r.instances, r.max_objective_rel_error, r.max_rebuild_abs_error
    );
    r.max_objective_rel_error < 1e-10 && r.max_rebuild_abs_error <= 1e-14
}

fn suite_orbit(out: &mut dyn Write) -> bool {
    let c = circular_orbit_check(398600.0, 7000.0, &TimeGrid::new(6000.0, 150));
    let _ = writeln!(
        out,
        "  radius deviation {:.3e} km, energy drift {:.3e}",
        c.max_radius_deviation, c.max_relative_energy_drift
    );
    c.max_radius_deviation < 1.0 && c.max_relative_energy_drift < 1e-6
}

/// Runs the selected suites with `gradient` standing in for the adjoint.
pub fn verify_with(
    suites: &[Suite],
    seed: u64,
    gradient: &GradientFn<'_>,
    out: &mut dyn Write,
) -> i32 {
    let all = [Suite::Gradients, Suite::Psd, Suite::Oracles, Suite::Orbit];
    let selected = if suites.is_empty() { &all[..] } else { suites };
    let mut ok = true;
    for &suite in selected {
        let (name, pass) = match suite {
            Suite::Gradients => ("gradients", suite_gradients(seed, gradient, out)),
            Suite::Psd => ("psd", suite_psd(out)),
            Suite::Oracles => ("oracles", suite_oracles(seed, out)),
            Suite::Orbit => ("orbit", suite_orbit(out)),
        };
        let _ = writeln!(out, "{name}: {}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    }
    if ok {
        EXIT_OK
    } else {
        EXIT_FAILURE
    }
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let adjoint: &GradientFn<'_> = &|p, xi, u| p.cost_and_gradient(xi, u).map(|(_, g, _)| g);
    match with_pool(args.threads, || {
        let mut buf = Vec::new();
        let code = verify_with(&args.suite, args.seed, adjoint, &mut buf);
        (code, buf)
    }) {
        Ok((code, buf)) => {
            let _ = out.write_all(&buf);
            code
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_CONFIG
        }
    }
}

pub fn cmd_list(out: &mut dyn Write) -> i32 {
    for s in bundled_scenarios() {
        let _ = writeln!(out, "{:<20} {}", s.name, s.description);
    }
    EXIT_OK
}

/// Parses `args` (program name first) and dispatches. Returns the exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match &cli.command {
        Command::Run(a) => cmd_run(a, out, err),
        Command::Verify(a) => cmd_verify(a, out, err),
        Command::ListScenarios => cmd_list(out),
    }
}

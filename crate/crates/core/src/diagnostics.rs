//! Verification and export: convergence histories, slope fits, Gram PSD
//! checks, gradient audits, orbit conservation and particle snapshots.

pub mod oracle;

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dynamics::{rollout, ControlGrid};
use crate::measure::{
    extend_gram, kernel_sq, objective, squared_distance, EnsembleMember, GramSystem, Mixture,
    TrajectoryEnsemble,
};
use crate::ocp::{FrozenField, LmoProblem, OcpError};
use crate::scenario::{
    sample_initial_states, CostSpec, DynamicsSpec, ScenarioConfig, TerminalCost, TimeGrid,
};
use crate::solver::{IterationRecord, RunResult};

pub const HISTORY_FILE: &str = "history.csv";
pub const HISTORY_HEADER: [&str; 5] = ["iter", "objective", "gap_displayed", "gap_surrogate", "lmo_seconds"];
/// Relative eigenvalue tolerance of the PSD check.
pub const PSD_TOL: f64 = 1e-8;
/// Pass threshold of the adjoint-vs-finite-difference audit.
pub const GRADIENT_AUDIT_TOL: f64 = 1e-5;
/// Relative symmetry tolerance accepted by the PSD check.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("malformed history row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("time index {index} outside grid 0..={steps}")]
    TimeIndex { index: usize, steps: usize },
    #[error("need at least 3 usable points for a slope fit, got {0}")]
    TooFewPoints(usize),
    #[error("matrix not symmetric: relative asymmetry {0:e}")]
    NotSymmetric(f64),
    #[error("empty Gram system")]
    EmptyGram,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, DiagnosticsError> {
    let file = File::create(path).map_err(|source| DiagnosticsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> DiagnosticsError + '_ {
    move |source| DiagnosticsError::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// 17 significant digits.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the convergence history. When `timing` is false the
/// `lmo_seconds` column is written as zero, so repeated runs are
/// byte-identical.
pub fn write_history(result: &RunResult, path: impl AsRef<Path>, timing: bool) -> Result<(), DiagnosticsError> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(HISTORY_HEADER).map_err(csv_err(path))?;
    for r in &result.history {
        let seconds = if timing { r.lmo_seconds } else { 0.0 };
        w.write_record([
            r.iteration.to_string(),
            fmt(r.objective),
            fmt(r.gap_displayed),
            fmt(r.gap_surrogate),
            fmt(seconds),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| DiagnosticsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<IterationRecord>, DiagnosticsError> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        if rec.len() != HISTORY_HEADER.len() {
            return Err(DiagnosticsError::Malformed {
                row,
                message: format!("expected {} fields, got {}", HISTORY_HEADER.len(), rec.len()),
            });
        }
        let num = |i: usize| {
            rec[i].parse::<f64>().map_err(|e| DiagnosticsError::Malformed {
                row,
                message: format!("{}: {e}", HISTORY_HEADER[i]),
            })
        };
        out.push(IterationRecord {
            iteration: rec[0].parse().map_err(|e| DiagnosticsError::Malformed {
                row,
                message: format!("iter: {e}"),
            })?,
            objective: num(1)?,
            gap_displayed: num(2)?,
            gap_surrogate: num(3)?,
            lmo_seconds: num(4)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRow {
    pub time_index: usize,
    pub atom: usize,
    pub atom_weight: f64,
    pub source: usize,
    pub source_weight: f64,
    pub position: Vec<f64>,
}

/// Every weighted particle of the mixture at grid index `n`. Atoms with zero
/// weight are omitted.
pub fn snapshot_table(mix: &Mixture, n: usize) -> Result<Vec<SnapshotRow>, DiagnosticsError> {
    let steps = mix.grid().steps;
    if n > steps {
        return Err(DiagnosticsError::TimeIndex { index: n, steps });
    }
    let mut rows = Vec::new();
    for (a, (atom, &beta)) in mix.atoms().iter().zip(mix.weights()).enumerate() {
        if beta == 0.0 {
            continue;
        }
        let pd = atom.position_dim();
        for (s, m) in atom.members().iter().enumerate() {
            rows.push(SnapshotRow {
                time_index: n,
                atom: a,
                atom_weight: beta,
                source: s,
                source_weight: m.weight,
                position: m.position(n, pd).to_vec(),
            });
        }
    }
    Ok(rows)
}

/// `sum atom_weight * source_weight` over a snapshot.
pub fn snapshot_mass(rows: &[SnapshotRow]) -> f64 {
    rows.iter().map(|r| r.atom_weight * r.source_weight).sum()
}

pub fn snapshot_file_name(n: usize) -> String {
    format!("snapshot_t{n}.csv")
}

/// Writes `snapshot_t{n}.csv` into `dir` for every requested index.
pub fn write_snapshots(
    result: &RunResult,
    times: &[usize],
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, DiagnosticsError> {
    let dir = dir.as_ref();
    let steps = result.mixture.grid().steps;
    if let Some(&bad) = times.iter().find(|&&n| n > steps) {
        return Err(DiagnosticsError::TimeIndex { index: bad, steps });
    }
    let pd = result.mixture.atoms()[0].position_dim();
    let mut header = vec![
        "time_index".to_string(),
        "atom".into(),
        "atom_weight".into(),
        "source".into(),
        "source_weight".into(),
    ];
    header.extend((0..pd).map(|i| format!("x{i}")));
    let mut paths = Vec::with_capacity(times.len());
    for &n in times {
        let path = dir.join(snapshot_file_name(n));
        let mut w = csv_writer(&path)?;
        w.write_record(&header).map_err(csv_err(&path))?;
        for row in snapshot_table(&result.mixture, n)? {
            let mut rec = vec![
                row.time_index.to_string(),
                row.atom.to_string(),
                fmt(row.atom_weight),
                row.source.to_string(),
                fmt(row.source_weight),
            ];
            rec.extend(row.position.iter().map(|v| fmt(*v)));
            w.write_record(&rec).map_err(csv_err(&path))?;
        }
        w.flush().map_err(|source| DiagnosticsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub used: usize,
    /// Rows in the window dropped for a nonpositive displayed gap.
    pub excluded: usize,
}

/// Least-squares slope of `log(gap_displayed)` against `log(k)` for
/// `k_min <= k <= k_max`.
pub fn fit_loglog_slope(
    history: &[IterationRecord],
    k_min: usize,
    k_max: usize,
) -> Result<SlopeFit, DiagnosticsError> {
    let k_min = k_min.max(1);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = 0;
    for r in history.iter().filter(|r| r.iteration >= k_min && r.iteration <= k_max) {
        if r.gap_displayed > 0.0 {
            xs.push((r.iteration as f64).ln());
            ys.push(r.gap_displayed.ln());
        } else {
            excluded += 1;
        }
    }
    let n = xs.len();
    if n < 3 {
        return Err(DiagnosticsError::TooFewPoints(n));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let slope = sxy / sxx;
    Ok(SlopeFit {
        slope,
        intercept: my - slope * mx,
        used: n,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdCheck {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub pass: bool,
}

/// Symmetric eigensolve of `H`; passes iff
/// `min eig >= -PSD_TOL * max(1, max eig)`.
pub fn check_gram_psd(gram: &GramSystem) -> Result<PsdCheck, DiagnosticsError> {
    if gram.is_empty() {
        return Err(DiagnosticsError::EmptyGram);
    }
    let scale = gram.h.amax().max(f64::MIN_POSITIVE);
    let asym = (&gram.h - gram.h.transpose()).amax() / scale;
    if asym > SYMMETRY_TOL {
        return Err(DiagnosticsError::NotSymmetric(asym));
    }
    let eig = gram.h.clone().symmetric_eigenvalues();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(PsdCheck {
        min_eigenvalue: min,
        max_eigenvalue: max,
        pass: min >= -PSD_TOL * max.max(1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientAudit {
    pub trials: usize,
    /// Max over trials of `|adjoint - fd|_inf / |fd|_inf`.
    pub max_relative_error: f64,
    /// Max absolute gradient entry on an instance where the cost does not
    /// depend on the controls at all.
    pub zero_dependence_abs_error: f64,
    pub pass: bool,
}

/// Gradient provider under audit; the default is the adjoint sweep.
pub type GradientFn<'a> = dyn Fn(&LmoProblem<'_>, &[f64], &ControlGrid) -> Result<ControlGrid, OcpError> + Sync + 'a;

/// Central differences of the oracle cost with per-entry step `h`.
pub fn finite_difference_gradient(
    problem: &LmoProblem<'_>,
    xi: &[f64],
    controls: &ControlGrid,
    h: f64,
) -> Result<ControlGrid, OcpError> {
    let mut out = ControlGrid::zeros(controls.control_dim(), controls.steps());
    let mut probe = controls.clone();
    for i in 0..controls.as_flat().len() {
        let base = controls.as_flat()[i];
        probe.as_flat_mut()[i] = base + h;
        let plus = problem.cost(xi, &probe)?;
        probe.as_flat_mut()[i] = base - h;
        let minus = problem.cost(xi, &probe)?;
        probe.as_flat_mut()[i] = base;
        out.as_flat_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

struct AuditInstance {
    grid: TimeGrid,
    cost: CostSpec,
    mixture: Option<Mixture>,
    xi: Vec<f64>,
    controls: ControlGrid,
}

fn random_controls<R: Rng>(rng: &mut R, spec: &DynamicsSpec, steps: usize, scale: f64) -> ControlGrid {
    let flat = (0..steps * spec.control_dim())
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    let mut c = ControlGrid::from_flat(spec.control_dim(), flat);
    for n in 0..steps {
        let p = spec.project_control(c.control(n));
        c.control_mut(n).copy_from_slice(&p);
    }
    c
}

fn audit_instance<R: Rng>(rng: &mut R, cfg: &ScenarioConfig) -> AuditInstance {
    let spec = &cfg.dynamics;
    let (grid, scale) = match spec {
        DynamicsSpec::SingleIntegrator { .. } => (
            TimeGrid::new(cfg.grid.horizon, rng.random_range(3..=10)),
            2.0,
        ),
        DynamicsSpec::Keplerian { control_bound, .. } => (TimeGrid::new(cfg.grid.horizon, 6), *control_bound),
    };
    let starts = sample_initial_states(&cfg.initial, cfg.solver.rng_seed).expect("validated scenario");
    let xi = starts[rng.random_range(0..starts.len())].0.clone();
    let mut cost = cfg.cost.clone();
    if cost.interaction_weight == 0.0 {
        cost.interaction_weight = 1.0;
    }
    let atom_count = rng.random_range(1..=3);
    let atoms: Vec<_> = (0..atom_count)
        .map(|_| {
            let controls = random_controls(rng, spec, grid.steps, scale);
            let trajectory = rollout(spec, &grid, &xi, &controls).expect("audit rollout");
            Arc::new(
                TrajectoryEnsemble::new(
                    grid,
                    spec.position_dim(),
                    vec![EnsembleMember {
                        weight: 1.0,
                        trajectory,
                        controls,
                    }],
                )
                .expect("valid ensemble"),
            )
        })
        .collect();
    let mut w: Vec<f64> = (0..atom_count).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    let mixture = Mixture::new(atoms, w).expect("valid mixture");
    AuditInstance {
        grid,
        cost,
        mixture: Some(mixture),
        xi,
        controls: random_controls(rng, spec, grid.steps, scale),
    }
}

fn fd_step(spec: &DynamicsSpec) -> f64 {
    1e-6 * spec.control_bound().unwrap_or(1.0)
}

/// Compares `gradient` against central finite differences on `trials` random
/// small instances of the scenario's dynamics family, plus one instance whose
/// cost ignores the controls entirely.
pub fn audit_gradients_with(
    cfg: &ScenarioConfig,
    trials: usize,
    seed: u64,
    gradient: &GradientFn<'_>,
) -> GradientAudit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = &cfg.dynamics;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let inst = audit_instance(&mut rng, cfg);
        let field = match &inst.mixture {
            Some(m) => FrozenField::new(m, &inst.cost),
            None => FrozenField::empty(&inst.grid, spec.position_dim()),
        };
        let problem = LmoProblem {
            spec,
            grid: &inst.grid,
            cost: &inst.cost,
            field: &field,
        };
        let err = match (
            gradient(&problem, &inst.xi, &inst.controls),
            finite_difference_gradient(&problem, &inst.xi, &inst.controls, fd_step(spec)),
        ) {
            (Ok(g), Ok(fd)) => {
                let scale = fd.as_flat().iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let diff = g
                    .as_flat()
                    .iter()
                    .zip(fd.as_flat())
                    .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
                if scale > 0.0 {
                    diff / scale
                } else {
                    diff
                }
            }
            _ => f64::INFINITY,
        };
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }

    // no terminal, running or interaction dependence on the controls
    let mut cost = cfg.cost.clone();
    cost.control_weight = 0.0;
    cost.interaction_weight = 0.0;
    cost.obstacles.clear();
    cost.terminal = TerminalCost::None;
    let grid = TimeGrid::new(cfg.grid.horizon, 4);
    let field = FrozenField::empty(&grid, spec.position_dim());
    let problem = LmoProblem {
        spec,
        grid: &grid,
        cost: &cost,
        field: &field,
    };
    let scale = spec.control_bound().unwrap_or(1.0);
    let controls = random_controls(&mut rng, spec, grid.steps, scale);
    let xi = sample_initial_states(&cfg.initial, cfg.solver.rng_seed).expect("validated scenario")[0]
        .0
        .clone();
    let zero_dep = match gradient(&problem, &xi, &controls) {
        Ok(g) => g.as_flat().iter().fold(0.0f64, |a, v| a.max(v.abs())),
        Err(_) => f64::INFINITY,
    };

    GradientAudit {
        trials,
        max_relative_error: worst,
        zero_dependence_abs_error: zero_dep,
        pass: worst < GRADIENT_AUDIT_TOL && zero_dep < 1e-12,
    }
}

pub fn audit_gradients(cfg: &ScenarioConfig, trials: usize, seed: u64) -> GradientAudit {
    audit_gradients_with(cfg, trials, seed, &|p, xi, u| p.cost_and_gradient(xi, u).map(|(_, g, _)| g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitCheck {
    pub max_radius_deviation: f64,
    pub max_relative_energy_drift: f64,
}

/// Zero-thrust rollout of a circular orbit of radius `r0`.
pub fn circular_orbit_check(grav_param: f64, r0: f64, grid: &TimeGrid) -> OrbitCheck {
    let spec = DynamicsSpec::Keplerian {
        grav_param,
        control_bound: 1.0,
    };
    let v = (grav_param / r0).sqrt();
    let traj = rollout(&spec, grid, &[r0, 0.0, 0.0, 0.0, v, 0.0], &ControlGrid::zeros(3, grid.steps))
        .expect("circular orbit never reaches the origin");
    let energy = |s: &[f64]| {
        let r = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
        0.5 * (s[3] * s[3] + s[4] * s[4] + s[5] * s[5]) - grav_param / r
    };
    let e0 = energy(traj.state(0));
    let mut out = OrbitCheck {
        max_radius_deviation: 0.0,
        max_relative_energy_drift: 0.0,
    };
    for n in 0..traj.len() {
        let s = traj.state(n);
        let r = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
        out.max_radius_deviation = out.max_radius_deviation.max((r - r0).abs());
        out.max_relative_energy_drift = out
            .max_relative_energy_drift
            .max(((energy(s) - e0) / e0).abs());
    }
    out
}

/// Weighted mean of the kernel over all particle pairs at grid index `n`,
/// self-pairs included.
pub fn mean_pairwise_kernel(mix: &Mixture, sigma: f64, n: usize) -> f64 {
    let mut parts = Vec::new();
    for (atom, &beta) in mix.atoms().iter().zip(mix.weights()) {
        if beta == 0.0 {
            continue;
        }
        for m in atom.members() {
            parts.push((beta * m.weight, m.position(n, atom.position_dim())));
        }
    }
    let mut total = 0.0;
    for (wa, a) in &parts {
        for (wb, b) in &parts {
            total += wa * wb * kernel_sq(sigma, squared_distance(a, b));
        }
    }
    total
}

/// Weighted mean of `f` applied to the terminal position of every particle.
pub fn mean_terminal<F: Fn(&[f64]) -> f64>(mix: &Mixture, f: F) -> f64 {
    let mut total = 0.0;
    for (atom, &beta) in mix.atoms().iter().zip(mix.weights()) {
        let steps = atom.grid().steps;
        for m in atom.members() {
            total += beta * m.weight * f(m.position(steps, atom.position_dim()));
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleEquivalence {
    pub instances: usize,
    pub max_objective_rel_error: f64,
    pub max_rebuild_abs_error: f64,
}

/// Quadratic-form objective vs the naive double sum, and incremental vs full
/// Gram construction, on random small instances.
pub fn oracle_equivalence(instances: usize, seed: u64) -> OracleEquivalence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_obj: f64 = 0.0;
    let mut worst_rebuild: f64 = 0.0;
    for _ in 0..instances {
        let inst = oracle::random_instance(&mut rng, 3, 4, 8);
        let mut gram = GramSystem::empty();
        for k in 0..inst.atoms.len() {
            gram = extend_gram(&gram, &inst.atoms[..k], &inst.atoms[k], &inst.cost).expect("compatible atoms");
        }
        let qp = objective(&inst.weights, &gram).expect("aligned");
        let naive = oracle::naive_objective(&inst.atoms, &inst.weights, &inst.cost);
        worst_obj = worst_obj.max((qp - naive).abs() / naive.abs().max(f64::MIN_POSITIVE));
        let rebuilt = GramSystem::build(&inst.atoms, &inst.cost).expect("compatible atoms");
        worst_rebuild = worst_rebuild
            .max((&rebuilt.h - &gram.h).amax())
            .max((&rebuilt.c - &gram.c).amax());
    }
    OracleEquivalence {
        instances,
        max_objective_rel_error: worst_obj,
        max_rebuild_abs_error: worst_rebuild,
    }
}

/// Exact optimum of a decoupled linear-quadratic instance: single
/// integrator, no interaction, no obstacles, quadratic terminal cost. Each
/// source's problem is written as a dense quadratic in the stacked controls
/// and solved by Cholesky. `None` when the scenario is outside that class.
pub fn dense_lq_optimum(cfg: &ScenarioConfig) -> Option<f64> {
    let DynamicsSpec::SingleIntegrator { dim } = cfg.dynamics else {
        return None;
    };
    let TerminalCost::Quadratic { weight, target } = &cfg.cost.terminal else {
        return None;
    };
    if cfg.cost.interaction_weight != 0.0 || !cfg.cost.obstacles.is_empty() {
        return None;
    }
    let a = match cfg.cost.control_form {
        crate::scenario::ControlCostForm::HalfSquared => cfg.cost.control_weight,
        crate::scenario::ControlCostForm::Squared => 2.0 * cfg.cost.control_weight,
    };
    let n = cfg.grid.steps;
    let dt = cfg.grid.dt();
    let size = n * dim;
    let q = nalgebra::DMatrix::from_fn(size, size, |i, j| {
        let diag = if i == j { a * dt } else { 0.0 };
        let coupling = if i % dim == j % dim { weight * dt * dt } else { 0.0 };
        diag + coupling
    });
    let chol = q.cholesky()?;
    let mut total = 0.0;
    for (xi, pi) in sample_initial_states(&cfg.initial, cfg.solver.rng_seed).ok()? {
        let offset: Vec<f64> = xi.iter().zip(target).map(|(x, g)| x - g).collect();
        let b = nalgebra::DVector::from_fn(size, |i, _| weight * dt * offset[i % dim]);
        let u = chol.solve(&(-&b));
        let constant = 0.5 * weight * offset.iter().map(|v| v * v).sum::<f64>();
        total += pi * (constant + 0.5 * b.dot(&u));
    }
    Some(total)
}

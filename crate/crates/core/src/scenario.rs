//! Problem statement: dynamics family, costs, interaction kernel, initial
//! distribution, time grid and solver options.
//!
//! Scenario files are JSON. Every optional field has a default (see
//! [`SolverOptions::default`] and the `#[serde(default)]` markers below), and
//! every load or validation error carries the dotted path of the offending
//! field, e.g. `grid.T` or `cost.obstacles[0].radius`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the initial weights summing to one.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("invalid value at `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("unsupported density descriptor: {0}")]
    UnsupportedDensity(String),
}

impl ScenarioError {
    /// Dotted path of the field the error refers to, when there is one.
    pub fn field(&self) -> Option<&str> {
        match self {
            ScenarioError::Parse { field, .. }
            | ScenarioError::Schema { field, .. }
            | ScenarioError::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// Uniform time discretization shared by every trajectory of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N_t")]
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Self {
        Self { horizon, steps }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsSpec {
    /// `x' = u` in 2 or 3 dimensions.
    SingleIntegrator { dim: usize },
    /// Two-body gravity plus thrust acceleration, state `(r, v)` in km, km/s.
    Keplerian {
        /// Gravitational parameter in km^3/s^2.
        grav_param: f64,
        /// Thrust acceleration bound in km/s^2.
        control_bound: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCostForm {
    /// `(alpha / 2) |u|^2`
    #[default]
    HalfSquared,
    /// `alpha |u|^2`
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalCost {
    None,
    /// `(weight / 2) |p - target|^2` on the position components.
    Quadratic { weight: f64, target: Vec<f64> },
    /// `weight (|r| - radius)^2` on the position components.
    RadiusTarget { weight: f64, radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default)]
    pub margin: f64,
    pub gain: f64,
}

impl Obstacle {
    /// Radius used by the penalty: geometric radius plus safety margin.
    pub fn effective_radius(&self) -> f64 {
        self.radius + self.margin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub control_weight: f64,
    #[serde(default)]
    pub control_form: ControlCostForm,
    pub terminal: TerminalCost,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    /// Coefficient of the full same-time double integral of the kernel.
    #[serde(default)]
    pub interaction_weight: f64,
    /// Gaussian kernel width sigma.
    pub kernel_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedState {
    pub state: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Density {
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    UniformBox { low: Vec<f64>, high: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDistribution {
    PointMass {
        state: Vec<f64>,
    },
    DiscreteSet {
        points: Vec<WeightedState>,
    },
    Sampled {
        density: Density,
        count: usize,
        /// Overrides `solver.rng_seed` for the draw when present.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Circular orbit at `radius` with phase fixed at `(radius, 0, 0)`, moving
    /// along +y. Only valid for Keplerian dynamics; resolved into a point
    /// mass by [`ScenarioConfig::from_json_str`].
    CircularOrbit {
        radius: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fw,
    #[default]
    Fcfw,
}

/// Default projected-gradient step of the weight QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStepRule {
    /// `1 / (trace(H) / k + 1)` for a dictionary of `k` atoms.
    Trace,
    /// `1 / lambda_max(H)`.
    #[default]
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub algorithm: Algorithm,
    pub outer_iterations: usize,
    pub lmo_steps: usize,
    pub lmo_learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub qp_pgd_steps: usize,
    /// Fixed projected-gradient step; overrides `qp_step_rule` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qp_pgd_learning_rate: Option<f64>,
    pub qp_step_rule: QpStepRule,
    /// Stop once the surrogate gap drops below this value. Off when `None`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_tol: Option<f64>,
    pub weight_prune_tol: f64,
    pub rng_seed: u64,
    /// Start each oracle solve from the cheapest of the previous oracle result
    /// and the active dictionary atoms.
    pub warm_start: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Fcfw,
            outer_iterations: 100,
            lmo_steps: 400,
            lmo_learning_rate: 0.2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            qp_pgd_steps: 2000,
            qp_pgd_learning_rate: None,
            qp_step_rule: QpStepRule::Spectral,
            gap_tol: None,
            weight_prune_tol: 1e-12,
            rng_seed: 0,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub dynamics: DynamicsSpec,
    pub grid: TimeGrid,
    pub cost: CostSpec,
    pub initial: InitialDistribution,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl ScenarioConfig {
    /// Parses a scenario document, resolves derived initial conditions and
    /// validates the result.
    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|err| {
            let path = err.path().to_string();
            let inner = err.into_inner();
            let message = inner.to_string();
            if inner.is_syntax() || inner.is_eof() || inner.is_io() {
                ScenarioError::Parse {
                    field: path,
                    message,
                }
            } else {
                ScenarioError::Schema {
                    field: schema_field(&path, &message),
                    message,
                }
            }
        })?;
        if let InitialDistribution::CircularOrbit { radius } = cfg.initial {
            let DynamicsSpec::Keplerian { grav_param, .. } = cfg.dynamics else {
                return Err(invalid(
                    "initial.kind",
                    "circular_orbit requires keplerian dynamics",
                ));
            };
            if !(radius > 0.0) || !(grav_param > 0.0) {
                return Err(invalid("initial.radius", "radius must be positive"));
            }
            let speed = (grav_param / radius).sqrt();
            cfg.initial = InitialDistribution::PointMass {
                state: vec![radius, 0.0, 0.0, 0.0, speed, 0.0],
            };
        }
        validate(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization cannot fail")
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }
}

/// Completes a serde error path so that a missing field is named in full,
/// e.g. `grid` + "missing field `T`" becomes `grid.T`.
fn schema_field(path: &str, message: &str) -> String {
    let missing = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    match missing {
        Some(name) if path.is_empty() || path == "." => name.to_string(),
        Some(name) => format!("{path}.{name}"),
        None => path.to_string(),
    }
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ScenarioConfig::from_json_str(&text)
}

/// A scenario shipped with the crate.
#[derive(Debug, Clone, Copy)]
pub struct BundledScenario {
    pub name: &'static str,
    pub description: &'static str,
    pub source: &'static str,
}

const BUNDLED: [BundledScenario; 4] = [
    BundledScenario {
        name: "sat_constellation",
        description: "Keplerian rideshare deployment from a 7000 km LEO to an 8000 km target orbit",
        source: include_str!("../scenarios/sat_constellation.json"),
    },
    BundledScenario {
        name: "uav2d_multisource",
        description: "2D swarm launched from 10 bases, single circular obstacle, Gaussian repulsion",
        source: include_str!("../scenarios/uav2d_multisource.json"),
    },
    BundledScenario {
        name: "uav2d_single",
        description: "2D swarm from a point mass at the origin, single circular obstacle, Gaussian repulsion",
        source: include_str!("../scenarios/uav2d_single.json"),
    },
    BundledScenario {
        name: "uav3d_obstacles",
        description: "3D swarm with ten spherical obstacles and Gaussian repulsion",
        source: include_str!("../scenarios/uav3d_obstacles.json"),
    },
];

/// Bundled scenarios, sorted by name.
pub fn bundled_scenarios() -> &'static [BundledScenario] {
    &BUNDLED
}

pub fn bundled_scenario(name: &str) -> Result<ScenarioConfig, ScenarioError> {
    let entry = BUNDLED
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| ScenarioError::Io {
            path: name.to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such bundled scenario"),
        })?;
    ScenarioConfig::from_json_str(entry.source)
}

/// Loads `arg` as a file path when it exists, otherwise as a bundled
/// scenario name.
pub fn resolve_scenario(arg: &str) -> Result<ScenarioConfig, ScenarioError> {
    let path = Path::new(arg);
    if path.exists() {
        return load_scenario(path);
    }
    if BUNDLED.iter().any(|s| s.name == arg) {
        return bundled_scenario(arg);
    }
    Err(ScenarioError::Io {
        path: arg.to_string(),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
    })
}

fn check_nonneg(field: &str, v: f64) -> Result<(), ScenarioError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite and nonnegative, got {v}")))
    }
}

fn check_pos(field: &str, v: f64) -> Result<(), ScenarioError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite and positive, got {v}")))
    }
}

fn check_dim(field: &str, v: &[f64], dim: usize) -> Result<(), ScenarioError> {
    if v.len() != dim {
        return Err(invalid(
            field,
            format!("dimension mismatch: expected {dim}, got {}", v.len()),
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid(field, "non-finite component"));
    }
    Ok(())
}

/// Checks every invariant of the configuration and cross-checks dimensions.
pub fn validate(cfg: ScenarioConfig) -> Result<ScenarioConfig, ScenarioError> {
    if cfg.grid.steps < 1 {
        return Err(invalid("grid.N_t", "must be at least 1"));
    }
    check_pos("grid.T", cfg.grid.horizon)?;

    match cfg.dynamics {
        DynamicsSpec::SingleIntegrator { dim } => {
            if dim != 2 && dim != 3 {
                return Err(invalid("dynamics.dim", format!("must be 2 or 3, got {dim}")));
            }
        }
        DynamicsSpec::Keplerian {
            grav_param,
            control_bound,
        } => {
            check_pos("dynamics.grav_param", grav_param)?;
            check_pos("dynamics.control_bound", control_bound)?;
        }
    }
    let pos_dim = cfg.dynamics.position_dim();
    let state_dim = cfg.dynamics.state_dim();

    let cost = &cfg.cost;
    check_nonneg("cost.control_weight", cost.control_weight)?;
    check_nonneg("cost.interaction_weight", cost.interaction_weight)?;
    check_pos("cost.kernel_width", cost.kernel_width)?;
    match &cost.terminal {
        TerminalCost::None => {}
        TerminalCost::Quadratic { weight, target } => {
            check_nonneg("cost.terminal.weight", *weight)?;
            check_dim("cost.terminal.target", target, pos_dim)?;
        }
        TerminalCost::RadiusTarget { weight, radius } => {
            check_nonneg("cost.terminal.weight", *weight)?;
            check_pos("cost.terminal.radius", *radius)?;
        }
    }
    for (i, obs) in cost.obstacles.iter().enumerate() {
        let at = |f: &str| format!("cost.obstacles[{i}].{f}");
        check_dim(&at("center"), &obs.center, pos_dim)?;
        check_pos(&at("radius"), obs.radius)?;
        check_nonneg(&at("margin"), obs.margin)?;
        check_nonneg(&at("gain"), obs.gain)?;
    }

    match &cfg.initial {
        InitialDistribution::PointMass { state } => {
            check_dim("initial.state", state, state_dim)?;
        }
        InitialDistribution::DiscreteSet { points } => {
            if points.is_empty() {
                return Err(invalid("initial.points", "must be nonempty"));
            }
            let mut sum = 0.0;
            for (i, p) in points.iter().enumerate() {
                check_dim(&format!("initial.points[{i}].state"), &p.state, state_dim)?;
                check_pos(&format!("initial.points[{i}].weight"), p.weight)?;
                sum += p.weight;
            }
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(invalid(
                    "initial.points",
                    format!("weights sum to {sum}, expected 1"),
                ));
            }
        }
        InitialDistribution::Sampled { density, count, .. } => {
            if *count < 1 {
                return Err(invalid("initial.count", "must be at least 1"));
            }
            match density {
                Density::Gaussian { mean, std } => {
                    check_dim("initial.density.mean", mean, state_dim)?;
                    check_dim("initial.density.std", std, state_dim)?;
                    for s in std {
                        check_nonneg("initial.density.std", *s)?;
                    }
                }
                Density::UniformBox { low, high } => {
                    check_dim("initial.density.low", low, state_dim)?;
                    check_dim("initial.density.high", high, state_dim)?;
                    if low.iter().zip(high).any(|(l, h)| l > h) {
                        return Err(invalid("initial.density", "low exceeds high"));
                    }
                }
            }
        }
        InitialDistribution::CircularOrbit { .. } => {
            return Err(invalid(
                "initial.kind",
                "circular_orbit must be resolved before validation",
            ));
        }
    }

    let s = &cfg.solver;
    if s.outer_iterations < 1 {
        return Err(invalid("solver.outer_iterations", "must be at least 1"));
    }
    if s.lmo_steps < 1 {
        return Err(invalid("solver.lmo_steps", "must be at least 1"));
    }
    check_pos("solver.lmo_learning_rate", s.lmo_learning_rate)?;
    for (f, b) in [("solver.adam_beta1", s.adam_beta1), ("solver.adam_beta2", s.adam_beta2)] {
        if !(0.0..1.0).contains(&b) {
            return Err(invalid(f, format!("must lie in [0, 1), got {b}")));
        }
    }
    check_pos("solver.adam_epsilon", s.adam_epsilon)?;
    if let Some(lr) = s.qp_pgd_learning_rate {
        check_pos("solver.qp_pgd_learning_rate", lr)?;
    }
    if let Some(tol) = s.gap_tol {
        check_nonneg("solver.gap_tol", tol)?;
    }
    check_nonneg("solver.weight_prune_tol", s.weight_prune_tol)?;

    Ok(cfg)
}

/// Support points `(xi, pi)` of the initial distribution.
pub fn sample_initial_states(
    dist: &InitialDistribution,
    seed: u64,
) -> Result<Vec<(Vec<f64>, f64)>, ScenarioError> {
    match dist {
        InitialDistribution::PointMass { state } => Ok(vec![(state.clone(), 1.0)]),
        InitialDistribution::DiscreteSet { points } => {
            Ok(points.iter().map(|p| (p.state.clone(), p.weight)).collect())
        }
        InitialDistribution::Sampled {
            density,
            count,
            seed: own_seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(own_seed.unwrap_or(seed));
            let weight = 1.0 / *count as f64;
            let mut out = Vec::with_capacity(*count);
            match density {
                Density::Gaussian { mean, std } => {
                    let normals = mean
                        .iter()
                        .zip(std)
                        .map(|(&m, &s)| {
                            Normal::new(m, s).map_err(|e| {
                                ScenarioError::UnsupportedDensity(format!("gaussian: {e}"))
                            })
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    for _ in 0..*count {
                        let x = normals.iter().map(|d| d.sample(&mut rng)).collect();
                        out.push((x, weight));
                    }
                }
                Density::UniformBox { low, high } => {
                    let boxes = low
                        .iter()
                        .zip(high)
                        .map(|(&l, &h)| {
                            Uniform::new_inclusive(l, h).map_err(|e| {
                                ScenarioError::UnsupportedDensity(format!("uniform_box: {e}"))
                            })
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    for _ in 0..*count {
                        let x = boxes.iter().map(|d| d.sample(&mut rng)).collect();
                        out.push((x, weight));
                    }
                }
            }
            Ok(out)
        }
        InitialDistribution::CircularOrbit { .. } => Err(ScenarioError::UnsupportedDensity(
            "circular_orbit must be resolved into a point mass first".into(),
        )),
    }
}

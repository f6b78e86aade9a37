//! Occupation-measure mean-field control.
//!
//! A population objective over trajectory ensembles is minimized with
//! Frank-Wolfe; each linear-minimization step is a batch of classical optimal
//! control problems solved by adjoint gradients.

pub mod cli;
pub mod diagnostics;
pub mod dynamics;
pub mod measure;
pub mod ocp;
pub mod scenario;
pub mod solver;

pub use dynamics::{rollout, ControlGrid, StateTrajectory};
pub use measure::{GramSystem, Mixture, TrajectoryEnsemble};
pub use scenario::{load_scenario, resolve_scenario, ScenarioConfig};
pub use solver::{fcfw_run, fw_run, run, RunResult};

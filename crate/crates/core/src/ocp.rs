//! The linear-minimization oracle.
//!
//! Linearizing the objective at the current mixture gives the running cost
//!
//! ```text
//! g(t_n, x, u) = l0(x, u) + 2 lambda sum_i beta_i sum_m pi_m W(|x - x_i(t_n, xi_m)|)
//! ```
//!
//! and the oracle decomposes into one classical optimal-control problem per
//! initial state. Each is solved over zero-order-hold controls by Adam, with
//! gradients of the discrete cost obtained by a reverse sweep through the RK4
//! rollout.

use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{rollout_tape, ControlGrid, DynamicsError, StateTrajectory, MAX_STATE_DIM};
use crate::measure::{
    control_cost_gradient, kernel_sq, obstacle_gradient, running_cost, squared_distance,
    terminal_cost, terminal_gradient, EnsembleMember, MeasureError, Mixture, TrajectoryEnsemble,
};
use crate::scenario::{CostSpec, DynamicsSpec, SolverOptions, TimeGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("non-finite cost at Adam iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("time index {index} out of range (N_t = {steps})")]
    TimeIndex { index: usize, steps: usize },
    #[error("oracle failed for initial state {index}: {source}")]
    Member {
        index: usize,
        #[source]
        source: Box<OcpError>,
    },
    #[error("no initial states")]
    Empty,
}

/// The current population, frozen for one oracle call: every active
/// (atom, member) pair flattened into a weighted point cloud per time index.
#[derive(Debug, Clone)]
pub struct FrozenField {
    steps: usize,
    position_dim: usize,
    interaction_weight: f64,
    kernel_width: f64,
    /// `beta_i * pi_m` per point.
    weights: Vec<f64>,
    /// `positions[(n * P + p) * pd ..]`, `P = weights.len()`.
    positions: Vec<f64>,
}

impl FrozenField {
    pub fn new(mix: &Mixture, cost: &CostSpec) -> Self {
        let grid = *mix.grid();
        let pd = mix.atoms()[0].position_dim();
        let mut sources = Vec::new();
        for (atom, &beta) in mix.atoms().iter().zip(mix.weights()) {
            if beta == 0.0 {
                continue;
            }
            for m in atom.members() {
                sources.push((beta * m.weight, m));
            }
        }
        let count = sources.len();
        let mut positions = vec![0.0; grid.steps * count * pd];
        for n in 0..grid.steps {
            for (p, (_, m)) in sources.iter().enumerate() {
                let at = (n * count + p) * pd;
                positions[at..at + pd].copy_from_slice(m.position(n, pd));
            }
        }
        Self {
            steps: grid.steps,
            position_dim: pd,
            interaction_weight: cost.interaction_weight,
            kernel_width: cost.kernel_width,
            weights: sources.iter().map(|(w, _)| *w).collect(),
            positions,
        }
    }

    /// A field with no population, i.e. `g = l0`.
    pub fn empty(grid: &TimeGrid, position_dim: usize) -> Self {
        Self {
            steps: grid.steps,
            position_dim,
            interaction_weight: 0.0,
            kernel_width: 1.0,
            weights: Vec::new(),
            positions: Vec::new(),
        }
    }

    pub fn point_count(&self) -> usize {
        self.weights.len()
    }

    fn point(&self, n: usize, p: usize) -> &[f64] {
        let at = (n * self.weights.len() + p) * self.position_dim;
        &self.positions[at..at + self.position_dim]
    }

    /// `2 lambda sum_p w_p W(|x - y_p(t_n)|)`.
    pub fn interaction(&self, n: usize, x: &[f64]) -> f64 {
        if self.interaction_weight == 0.0 {
            return 0.0;
        }
        let mut s = 0.0;
        for (p, w) in self.weights.iter().enumerate() {
            s += w * kernel_sq(self.kernel_width, squared_distance(x, self.point(n, p)));
        }
        2.0 * self.interaction_weight * s
    }

    /// Accumulates `scale * d/dx interaction(n, x)` into `out`.
    fn interaction_gradient(&self, n: usize, x: &[f64], scale: f64, out: &mut [f64]) {
        if self.interaction_weight == 0.0 {
            return;
        }
        let inv_s2 = 1.0 / (self.kernel_width * self.kernel_width);
        let k = -2.0 * self.interaction_weight * inv_s2 * scale;
        for (p, w) in self.weights.iter().enumerate() {
            let y = self.point(n, p);
            let wk = w * kernel_sq(self.kernel_width, squared_distance(x, y)) * k;
            for i in 0..x.len() {
                out[i] += wk * (x[i] - y[i]);
            }
        }
    }
}

/// Everything one per-initial-state oracle solve reads.
#[derive(Debug, Clone, Copy)]
pub struct LmoProblem<'a> {
    pub spec: &'a DynamicsSpec,
    pub grid: &'a TimeGrid,
    pub cost: &'a CostSpec,
    pub field: &'a FrozenField,
}

/// `g(t_n, x, u)` with `x` the position components.
pub fn linearized_running_cost(
    field: &FrozenField,
    n: usize,
    x: &[f64],
    u: &[f64],
    cost: &CostSpec,
) -> Result<f64, OcpError> {
    if n >= field.steps {
        return Err(OcpError::TimeIndex {
            index: n,
            steps: field.steps,
        });
    }
    Ok(running_cost(cost, x, u) + field.interaction(n, x))
}

impl LmoProblem<'_> {
    fn check(&self) -> Result<(), OcpError> {
        if self.field.steps != self.grid.steps || self.field.position_dim != self.spec.position_dim() {
            return Err(OcpError::Measure(MeasureError::GridMismatch));
        }
        Ok(())
    }

    fn cost_of(&self, traj: &StateTrajectory, controls: &ControlGrid) -> f64 {
        let pd = self.spec.position_dim();
        let mut running = 0.0;
        for n in 0..self.grid.steps {
            let x = &traj.state(n)[..pd];
            running += running_cost(self.cost, x, controls.control(n)) + self.field.interaction(n, x);
        }
        self.grid.dt() * running + terminal_cost(self.cost, &traj.terminal()[..pd])
    }

    /// Discrete oracle cost `dt sum_n g(t_n, x_n, u_n) + Psi(x_N)`.
    pub fn cost(&self, xi: &[f64], controls: &ControlGrid) -> Result<f64, OcpError> {
        self.check()?;
        let tape = rollout_tape(self.spec, self.grid, xi, controls)?;
        Ok(self.cost_of(&tape.trajectory, controls))
    }

    /// Cost, its gradient with respect to every control entry, and the
    /// trajectory. The gradient is exact for the discrete cost.
    pub fn cost_and_gradient(
        &self,
        xi: &[f64],
        controls: &ControlGrid,
    ) -> Result<(f64, ControlGrid, StateTrajectory), OcpError> {
        self.check()?;
        let tape = rollout_tape(self.spec, self.grid, xi, controls)?;
        let traj = &tape.trajectory;
        let value = self.cost_of(traj, controls);

        let sd = self.spec.state_dim();
        let pd = self.spec.position_dim();
        let dt = self.grid.dt();
        let h = dt;
        let mut grad = ControlGrid::zeros(self.spec.control_dim(), self.grid.steps);
        let mut adj = [0.0; MAX_STATE_DIM];
        terminal_gradient(self.cost, &traj.terminal()[..pd], &mut adj[..pd]);
        let mut bar_x = [0.0; MAX_STATE_DIM];
        for n in (0..self.grid.steps).rev() {
            let gu = grad.control_mut(n);
            tape.step_vjp(self.spec, h, n, &adj[..sd], &mut bar_x[..sd], gu)?;
            control_cost_gradient(self.cost, controls.control(n), dt, gu);
            let x = &traj.state(n)[..pd];
            obstacle_gradient(self.cost, x, dt, &mut bar_x[..pd]);
            self.field.interaction_gradient(n, x, dt, &mut bar_x[..pd]);
            adj[..sd].copy_from_slice(&bar_x[..sd]);
        }
        Ok((value, grad, tape.trajectory))
    }
}

pub fn lmo_cost(problem: &LmoProblem<'_>, xi: &[f64], controls: &ControlGrid) -> Result<f64, OcpError> {
    problem.cost(xi, controls)
}

pub fn lmo_gradient(
    problem: &LmoProblem<'_>,
    xi: &[f64],
    controls: &ControlGrid,
) -> Result<ControlGrid, OcpError> {
    problem.cost_and_gradient(xi, controls).map(|(_, g, _)| g)
}

/// First and second moment state of Adam over a flat parameter vector.
#[derive(Debug, Clone)]
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(len: usize, opts: &SolverOptions) -> Self {
        Self {
            lr: opts.lmo_learning_rate,
            beta1: opts.adam_beta1,
            beta2: opts.adam_beta2,
            eps: opts.adam_epsilon,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmoSolution {
    pub trajectory: StateTrajectory,
    pub controls: ControlGrid,
    pub cost: f64,
}

fn project_all(spec: &DynamicsSpec, controls: &mut ControlGrid) {
    if spec.control_bound().is_some() {
        for n in 0..controls.steps() {
            spec.project_control_in_place(controls.control_mut(n));
        }
    }
}

/// Runs `opts.lmo_steps` projected Adam iterations from `warm_start` (zero
/// controls when absent) and returns the best iterate seen.
pub fn solve_lmo(
    problem: &LmoProblem<'_>,
    xi: &[f64],
    opts: &SolverOptions,
    warm_start: Option<&ControlGrid>,
) -> Result<LmoSolution, OcpError> {
    let mut controls = match warm_start {
        Some(w) => w.clone(),
        None => ControlGrid::zeros(problem.spec.control_dim(), problem.grid.steps),
    };
    project_all(problem.spec, &mut controls);
    let mut adam = Adam::new(controls.as_flat().len(), opts);
    let mut best: Option<LmoSolution> = None;
    for iteration in 0..=opts.lmo_steps {
        let last = iteration == opts.lmo_steps;
        let (value, grad, traj) = if last {
            let tape = rollout_tape(problem.spec, problem.grid, xi, &controls)?;
            let v = problem.cost_of(&tape.trajectory, &controls);
            (v, None, tape.trajectory)
        } else {
            let (v, g, t) = problem.cost_and_gradient(xi, &controls)?;
            (v, Some(g), t)
        };
        if !value.is_finite() {
            return Err(OcpError::NonFinite { iteration });
        }
        if best.as_ref().is_none_or(|b| value < b.cost) {
            best = Some(LmoSolution {
                trajectory: traj,
                controls: controls.clone(),
                cost: value,
            });
        }
        if let Some(g) = grad {
            adam.step(controls.as_flat_mut(), g.as_flat());
            project_all(problem.spec, &mut controls);
        }
    }
    Ok(best.expect("at least one iterate is evaluated"))
}

/// Solves one oracle problem per initial state (in parallel, results in input
/// order) and assembles the weighted ensemble. Returns the member costs too.
///
/// Each member starts from whichever candidate ensemble's controls for that
/// member have the lowest oracle cost (zero controls when `candidates` is
/// empty), so the returned member never costs more than any candidate.
pub fn solve_lmo_ensemble(
    problem: &LmoProblem<'_>,
    states: &[(Vec<f64>, f64)],
    opts: &SolverOptions,
    candidates: &[&TrajectoryEnsemble],
) -> Result<(TrajectoryEnsemble, Vec<f64>), OcpError> {
    if states.is_empty() {
        return Err(OcpError::Empty);
    }
    if let Some(w) = candidates.iter().find(|w| w.len() != states.len()) {
        return Err(OcpError::Measure(MeasureError::Dimension {
            expected: states.len(),
            got: w.len(),
        }));
    }
    let solutions = states
        .par_iter()
        .enumerate()
        .map(|(index, (xi, _))| {
            let member = |e: OcpError| OcpError::Member {
                index,
                source: Box::new(e),
            };
            let mut warm: Option<(&ControlGrid, f64)> = None;
            for c in candidates {
                let controls = &c.members()[index].controls;
                let value = problem.cost(xi, controls).map_err(member)?;
                if warm.is_none_or(|(_, best)| value < best) {
                    warm = Some((controls, value));
                }
            }
            solve_lmo(problem, xi, opts, warm.map(|(c, _)| c)).map_err(member)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let costs = solutions.iter().map(|s| s.cost).collect();
    let members = solutions
        .into_iter()
        .zip(states)
        .map(|(s, (_, weight))| EnsembleMember {
            weight: *weight,
            trajectory: s.trajectory,
            controls: s.controls,
        })
        .collect();
    let ens = TrajectoryEnsemble::new(*problem.grid, problem.spec.position_dim(), members)?;
    Ok((ens, costs))
}

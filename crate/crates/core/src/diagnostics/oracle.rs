//! Straight-loop evaluators used as independent references for the
//! quadratic-form objective, Gram entries and linearized costs.
//!
//! Nothing here calls into the cost or kernel helpers of [`crate::measure`];
//! every formula is written out again as a direct quadrature.

use std::sync::Arc;

use rand::Rng;

use crate::dynamics::{rollout, ControlGrid, StateTrajectory};
use crate::measure::{EnsembleMember, TrajectoryEnsemble};
use crate::scenario::{ControlCostForm, CostSpec, DynamicsSpec, Obstacle, TerminalCost, TimeGrid};

fn gauss(sigma: f64, a: &[f64], b: &[f64]) -> f64 {
    let mut r2 = 0.0;
    for k in 0..a.len() {
        r2 += (a[k] - b[k]).powi(2);
    }
    (-r2 / (2.0 * sigma.powi(2))).exp()
}

fn ell0(cost: &CostSpec, x: &[f64], u: &[f64]) -> f64 {
    let mut usq = 0.0;
    for v in u {
        usq += v.powi(2);
    }
    let effort = match cost.control_form {
        ControlCostForm::HalfSquared => cost.control_weight / 2.0 * usq,
        ControlCostForm::Squared => cost.control_weight * usq,
    };
    let mut obstacle = 0.0;
    for o in &cost.obstacles {
        let mut d2 = 0.0;
        for k in 0..x.len() {
            d2 += (x[k] - o.center[k]).powi(2);
        }
        let gap = o.radius + o.margin - d2.sqrt();
        if gap > 0.0 {
            obstacle += o.gain * gap.powi(2);
        }
    }
    effort + obstacle
}

fn psi(cost: &CostSpec, x: &[f64]) -> f64 {
    match &cost.terminal {
        TerminalCost::None => 0.0,
        TerminalCost::Quadratic { weight, target } => {
            let mut d2 = 0.0;
            for k in 0..x.len() {
                d2 += (x[k] - target[k]).powi(2);
            }
            weight / 2.0 * d2
        }
        TerminalCost::RadiusTarget { weight, radius } => {
            let mut r2 = 0.0;
            for v in x {
                r2 += v.powi(2);
            }
            weight * (r2.sqrt() - radius).powi(2)
        }
    }
}

fn pos(m: &EnsembleMember, n: usize, pd: usize) -> &[f64] {
    &m.trajectory.state(n)[..pd]
}

/// `sum_m pi_m [dt sum_n l0 + Psi]`.
pub fn naive_atom_cost(a: &TrajectoryEnsemble, cost: &CostSpec) -> f64 {
    let grid = a.grid();
    let pd = a.position_dim();
    let mut total = 0.0;
    for m in a.members() {
        let mut s = 0.0;
        for n in 0..grid.steps {
            s += grid.dt() * ell0(cost, pos(m, n, pd), m.controls.control(n));
        }
        s += psi(cost, pos(m, grid.steps, pd));
        total += m.weight * s;
    }
    total
}

/// `2 lambda dt sum_n sum_m sum_m' pi_m pi_m' W`.
pub fn naive_gram_entry(a: &TrajectoryEnsemble, b: &TrajectoryEnsemble, cost: &CostSpec) -> f64 {
    let grid = a.grid();
    let pd = a.position_dim();
    let mut total = 0.0;
    for n in 0..grid.steps {
        for ma in a.members() {
            for mb in b.members() {
                total += 2.0
                    * cost.interaction_weight
                    * grid.dt()
                    * ma.weight
                    * mb.weight
                    * gauss(cost.kernel_width, pos(ma, n, pd), pos(mb, n, pd));
            }
        }
    }
    total
}

/// The discretized objective of a mixture, evaluated as running + terminal
/// cost of every weighted member plus `lambda` times the same-time double
/// sum over all weighted (atom, member) pairs, self-pairs included.
pub fn naive_objective(atoms: &[Arc<TrajectoryEnsemble>], weights: &[f64], cost: &CostSpec) -> f64 {
    let grid = atoms[0].grid();
    let pd = atoms[0].position_dim();
    let mut total = 0.0;
    for (a, &beta) in atoms.iter().zip(weights) {
        total += beta * naive_atom_cost(a, cost);
    }
    let mut interaction = 0.0;
    for n in 0..grid.steps {
        for (a, &ba) in atoms.iter().zip(weights) {
            for ma in a.members() {
                for (b, &bb) in atoms.iter().zip(weights) {
                    for mb in b.members() {
                        interaction += ba * ma.weight * bb * mb.weight
                            * gauss(cost.kernel_width, pos(ma, n, pd), pos(mb, n, pd));
                    }
                }
            }
        }
    }
    total + cost.interaction_weight * grid.dt() * interaction
}

/// Discrete oracle cost of one trajectory against a frozen mixture.
pub fn naive_linearized_cost(
    traj: &StateTrajectory,
    controls: &ControlGrid,
    atoms: &[Arc<TrajectoryEnsemble>],
    weights: &[f64],
    cost: &CostSpec,
    grid: &TimeGrid,
    pd: usize,
) -> f64 {
    let mut total = 0.0;
    for n in 0..grid.steps {
        let x = &traj.state(n)[..pd];
        let mut field = 0.0;
        for (a, &beta) in atoms.iter().zip(weights) {
            for m in a.members() {
                field += beta * m.weight * gauss(cost.kernel_width, x, pos(m, n, pd));
            }
        }
        total += grid.dt() * (ell0(cost, x, controls.control(n)) + 2.0 * cost.interaction_weight * field);
    }
    total + psi(cost, &traj.state(grid.steps)[..pd])
}

/// A small random single-integrator problem: cost, grid and a weighted set of
/// rolled-out atoms.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub spec: DynamicsSpec,
    pub grid: TimeGrid,
    pub cost: CostSpec,
    pub atoms: Vec<Arc<TrajectoryEnsemble>>,
    pub weights: Vec<f64>,
}

/// Draws an instance with at most `max_atoms` atoms, `max_members` members
/// per atom and `max_steps` grid steps.
pub fn random_instance<R: Rng>(rng: &mut R, max_atoms: usize, max_members: usize, max_steps: usize) -> RandomInstance {
    let dim = rng.random_range(2..=3);
    let spec = DynamicsSpec::SingleIntegrator { dim };
    let grid = TimeGrid::new(rng.random_range(0.5..3.0), rng.random_range(1..=max_steps));
    let obstacles = (0..rng.random_range(0..=2))
        .map(|_| Obstacle {
            center: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            radius: rng.random_range(0.2..0.8),
            margin: rng.random_range(0.0..0.2),
            gain: rng.random_range(1.0..100.0),
        })
        .collect();
    let cost = CostSpec {
        control_weight: rng.random_range(0.0..1.0),
        control_form: if rng.random_bool(0.5) {
            ControlCostForm::HalfSquared
        } else {
            ControlCostForm::Squared
        },
        terminal: TerminalCost::Quadratic {
            weight: rng.random_range(0.0..30.0),
            target: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        },
        obstacles,
        interaction_weight: rng.random_range(0.0..2.0),
        kernel_width: rng.random_range(0.2..1.0),
    };
    let members = rng.random_range(1..=max_members);
    let mut raw: Vec<f64> = (0..members).map(|_| rng.random_range(0.1..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter_mut().for_each(|w| *w /= sum);
    // exact unit sum on the last member
    let head: f64 = raw[..members - 1].iter().sum();
    raw[members - 1] = 1.0 - head;
    let starts: Vec<Vec<f64>> = (0..members)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();

    let atom_count = rng.random_range(1..=max_atoms);
    let atoms = (0..atom_count)
        .map(|_| {
            let members = starts
                .iter()
                .zip(&raw)
                .map(|(xi, &w)| {
                    let flat = (0..grid.steps * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let controls = ControlGrid::from_flat(dim, flat);
                    let trajectory = rollout(&spec, &grid, xi, &controls).expect("single integrator rollout");
                    EnsembleMember {
                        weight: w,
                        trajectory,
                        controls,
                    }
                })
                .collect();
            Arc::new(TrajectoryEnsemble::new(grid, dim, members).expect("valid ensemble"))
        })
        .collect();
    let mut weights: Vec<f64> = (0..atom_count).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    RandomInstance {
        spec,
        grid,
        cost,
        atoms,
        weights,
    }
}

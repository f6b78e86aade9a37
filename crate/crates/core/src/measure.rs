//! Discrete occupation measures.
//!
//! A [`TrajectoryEnsemble`] carries one aggregated occupation/terminal measure
//! pair: `M` classical trajectories, one per support point of the initial
//! distribution, weighted by that point's mass. A [`Mixture`] is a convex
//! combination of ensembles. Over a fixed dictionary of ensembles the
//! objective is the quadratic `c^T b + 1/2 b^T H b`, whose data live in a
//! [`GramSystem`].
//!
//! All time integrals use the left-endpoint rule on the shared grid, and the
//! same-time kernel coupling pairs equal grid indices.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{ControlGrid, StateTrajectory};
use crate::scenario::{ControlCostForm, CostSpec, TerminalCost, TimeGrid};

/// Tolerance on mixture weights summing to one.
pub const MIXTURE_SUM_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("time grid mismatch")]
    GridMismatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("step size {0} outside (0, 1]")]
    StepSize(f64),
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian kernel `exp(-r^2 / (2 sigma^2))` at separation `r`.
pub fn kernel(cost: &CostSpec, r: f64) -> f64 {
    kernel_sq(cost.kernel_width, r * r)
}

#[inline]
pub(crate) fn kernel_sq(sigma: f64, r2: f64) -> f64 {
    (-r2 / (2.0 * sigma * sigma)).exp()
}

/// `sum_k gain_k * max(0, R_k + margin_k - |x - c_k|)^2`.
pub fn obstacle_potential(cost: &CostSpec, x: &[f64]) -> f64 {
    cost.obstacles
        .iter()
        .map(|o| {
            let d = squared_distance(x, &o.center).sqrt();
            let pen = (o.effective_radius() - d).max(0.0);
            o.gain * pen * pen
        })
        .sum()
}

/// Accumulates `scale * grad V_obs(x)` into `out`.
pub(crate) fn obstacle_gradient(cost: &CostSpec, x: &[f64], scale: f64, out: &mut [f64]) {
    for o in &cost.obstacles {
        let d = squared_distance(x, &o.center).sqrt();
        let pen = o.effective_radius() - d;
        // the potential has no gradient at the exact center by symmetry
        if pen > 0.0 && d > 0.0 {
            let coef = -2.0 * o.gain * pen / d * scale;
            for i in 0..out.len() {
                out[i] += coef * (x[i] - o.center[i]);
            }
        }
    }
}

pub fn control_cost(cost: &CostSpec, u: &[f64]) -> f64 {
    let sq: f64 = u.iter().map(|v| v * v).sum();
    match cost.control_form {
        ControlCostForm::HalfSquared => 0.5 * cost.control_weight * sq,
        ControlCostForm::Squared => cost.control_weight * sq,
    }
}

pub(crate) fn control_cost_gradient(cost: &CostSpec, u: &[f64], scale: f64, out: &mut [f64]) {
    let k = match cost.control_form {
        ControlCostForm::HalfSquared => cost.control_weight,
        ControlCostForm::Squared => 2.0 * cost.control_weight,
    } * scale;
    for (o, v) in out.iter_mut().zip(u) {
        *o += k * v;
    }
}

/// Running cost `l0(x, u)`: control effort plus obstacle penalty on the
/// position components `pos`.
pub fn running_cost(cost: &CostSpec, pos: &[f64], u: &[f64]) -> f64 {
    control_cost(cost, u) + obstacle_potential(cost, pos)
}

/// Terminal cost evaluated on the position components of the final state.
pub fn terminal_cost(cost: &CostSpec, pos: &[f64]) -> f64 {
    match &cost.terminal {
        TerminalCost::None => 0.0,
        TerminalCost::Quadratic { weight, target } => 0.5 * weight * squared_distance(pos, target),
        TerminalCost::RadiusTarget { weight, radius } => {
            let r = pos.iter().map(|v| v * v).sum::<f64>().sqrt();
            weight * (r - radius) * (r - radius)
        }
    }
}

pub(crate) fn terminal_gradient(cost: &CostSpec, pos: &[f64], out: &mut [f64]) {
    match &cost.terminal {
        TerminalCost::None => {}
        TerminalCost::Quadratic { weight, target } => {
            for i in 0..pos.len() {
                out[i] += weight * (pos[i] - target[i]);
            }
        }
        TerminalCost::RadiusTarget { weight, radius } => {
            let r = pos.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r > 0.0 {
                let k = 2.0 * weight * (r - radius) / r;
                for i in 0..pos.len() {
                    out[i] += k * pos[i];
                }
            }
        }
    }
}

/// One member of an ensemble: the classical trajectory started from one
/// support point of the initial distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub weight: f64,
    pub trajectory: StateTrajectory,
    pub controls: ControlGrid,
}

impl EnsembleMember {
    pub fn position(&self, n: usize, pos_dim: usize) -> &[f64] {
        &self.trajectory.state(n)[..pos_dim]
    }
}

/// Output of one linear-minimization step: `M` weighted trajectories on a
/// shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    grid: TimeGrid,
    position_dim: usize,
    members: Vec<EnsembleMember>,
}

impl TrajectoryEnsemble {
    pub fn new(
        grid: TimeGrid,
        position_dim: usize,
        members: Vec<EnsembleMember>,
    ) -> Result<Self, MeasureError> {
        if members.is_empty() {
            return Err(MeasureError::InvalidEnsemble("no members".into()));
        }
        let sum: f64 = members.iter().map(|m| m.weight).sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(MeasureError::InvalidEnsemble(format!(
                "member weights sum to {sum}"
            )));
        }
        for m in &members {
            if m.trajectory.len() != grid.steps + 1 || m.controls.steps() != grid.steps {
                return Err(MeasureError::GridMismatch);
            }
            if m.trajectory.state_dim() < position_dim {
                return Err(MeasureError::Dimension {
                    expected: position_dim,
                    got: m.trajectory.state_dim(),
                });
            }
        }
        Ok(Self {
            grid,
            position_dim,
            members,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn position_dim(&self) -> usize {
        self.position_dim
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn check_compatible(&self, other: &TrajectoryEnsemble) -> Result<(), MeasureError> {
        if self.grid != other.grid {
            return Err(MeasureError::GridMismatch);
        }
        if self.position_dim != other.position_dim {
            return Err(MeasureError::Dimension {
                expected: self.position_dim,
                got: other.position_dim,
            });
        }
        Ok(())
    }
}

/// Linear cost `c_i` of one atom: weighted running cost quadrature plus
/// terminal cost.
pub fn atom_linear_cost(ens: &TrajectoryEnsemble, cost: &CostSpec) -> f64 {
    let dt = ens.grid.dt();
    let pd = ens.position_dim;
    ens.members
        .iter()
        .map(|m| {
            let running: f64 = (0..ens.grid.steps)
                .map(|n| running_cost(cost, m.position(n, pd), m.controls.control(n)))
                .sum();
            m.weight * (dt * running + terminal_cost(cost, m.position(ens.grid.steps, pd)))
        })
        .sum()
}

/// Interaction entry `H_ij = 2 lambda dt sum_n sum_{m,m'} pi_m pi_m' W(...)`.
///
/// Exactly symmetric under swapped arguments: the member-pair sum is formed
/// in both row-major and column-major order and the two are added, which is
/// commutative in floating point.
pub fn interaction_gram_entry(
    a: &TrajectoryEnsemble,
    b: &TrajectoryEnsemble,
    cost: &CostSpec,
) -> Result<f64, MeasureError> {
    a.check_compatible(b)?;
    if cost.interaction_weight == 0.0 {
        return Ok(0.0);
    }
    let pd = a.position_dim;
    let sigma = cost.kernel_width;
    let (ma, mb) = (a.members.len(), b.members.len());
    let mut pair = vec![0.0; ma * mb];
    for (p, ia) in a.members.iter().enumerate() {
        for (q, ib) in b.members.iter().enumerate() {
            let mut s = 0.0;
            for n in 0..a.grid.steps {
                s += kernel_sq(sigma, squared_distance(ia.position(n, pd), ib.position(n, pd)));
            }
            pair[p * mb + q] = ia.weight * ib.weight * s;
        }
    }
    let mut row_major = 0.0;
    for v in &pair {
        row_major += v;
    }
    let mut col_major = 0.0;
    for q in 0..mb {
        for p in 0..ma {
            col_major += pair[p * mb + q];
        }
    }
    Ok(cost.interaction_weight * a.grid.dt() * (row_major + col_major))
}

/// Convex combination of atoms. Zero weights are allowed; the fully
/// corrective solver keeps inactive atoms in its dictionary.
#[derive(Debug, Clone)]
pub struct Mixture {
    atoms: Vec<Arc<TrajectoryEnsemble>>,
    weights: Vec<f64>,
}

impl Mixture {
    pub fn single(atom: Arc<TrajectoryEnsemble>) -> Self {
        Self {
            atoms: vec![atom],
            weights: vec![1.0],
        }
    }

    pub fn new(atoms: Vec<Arc<TrajectoryEnsemble>>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(MeasureError::Dimension {
                expected: atoms.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(MeasureError::InvalidEnsemble("negative mixture weight".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > MIXTURE_SUM_TOL {
            return Err(MeasureError::InvalidEnsemble(format!("mixture weights sum to {sum}")));
        }
        for a in &atoms[1..] {
            atoms[0].check_compatible(a)?;
            if a.len() != atoms[0].len() {
                return Err(MeasureError::Dimension {
                    expected: atoms[0].len(),
                    got: a.len(),
                });
            }
        }
        Ok(Self { atoms, weights })
    }

    pub fn atoms(&self) -> &[Arc<TrajectoryEnsemble>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn grid(&self) -> &TimeGrid {
        self.atoms[0].grid()
    }

    /// Replaces the weight vector, keeping the atoms.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self, MeasureError> {
        Mixture::new(self.atoms.clone(), weights)
    }

    /// Appends an atom with weight zero.
    pub fn push_inactive(&mut self, atom: Arc<TrajectoryEnsemble>) -> Result<(), MeasureError> {
        self.atoms[0].check_compatible(&atom)?;
        self.atoms.push(atom);
        self.weights.push(0.0);
        Ok(())
    }
}

/// `(1 - step) * mix + step * new_atom`, then drops atoms whose weight fell
/// below `prune_tol` and renormalizes. Returns the new mixture and the indices
/// (into the combined atom list, new atom last) that survived, so a
/// [`GramSystem`] can be kept aligned.
pub fn convex_combine(
    mix: &Mixture,
    new_atom: Arc<TrajectoryEnsemble>,
    step: f64,
    prune_tol: f64,
) -> Result<(Mixture, Vec<usize>), MeasureError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(MeasureError::StepSize(step));
    }
    mix.atoms[0].check_compatible(&new_atom)?;
    let mut atoms = mix.atoms.clone();
    let mut weights: Vec<f64> = mix.weights.iter().map(|w| (1.0 - step) * w).collect();
    atoms.push(new_atom);
    weights.push(step);

    let keep: Vec<usize> = (0..atoms.len()).filter(|&i| weights[i] >= prune_tol && weights[i] > 0.0).collect();
    let atoms: Vec<_> = keep.iter().map(|&i| atoms[i].clone()).collect();
    let mut weights: Vec<f64> = keep.iter().map(|&i| weights[i]).collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    Ok((Mixture::new(atoms, weights)?, keep))
}

/// Quadratic data of the objective over a fixed atom dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSystem {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl Default for GramSystem {
    fn default() -> Self {
        Self::empty()
    }
}

impl GramSystem {
    pub fn empty() -> Self {
        Self {
            h: DMatrix::zeros(0, 0),
            c: DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    /// `H * weights`.
    pub fn h_times(&self, weights: &[f64]) -> Vec<f64> {
        let k = self.len();
        (0..k)
            .map(|i| (0..k).map(|j| self.h[(i, j)] * weights[j]).sum())
            .collect()
    }

    /// Keeps only the listed atoms, in order.
    pub fn retain(&self, keep: &[usize]) -> GramSystem {
        let k = keep.len();
        GramSystem {
            h: DMatrix::from_fn(k, k, |i, j| self.h[(keep[i], keep[j])]),
            c: DVector::from_fn(k, |i, _| self.c[keep[i]]),
        }
    }

    /// Builds the system from scratch, entry by entry.
    pub fn build(atoms: &[Arc<TrajectoryEnsemble>], cost: &CostSpec) -> Result<GramSystem, MeasureError> {
        let k = atoms.len();
        let mut h = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                h[(i, j)] = interaction_gram_entry(&atoms[i], &atoms[j], cost)?;
            }
        }
        let c = DVector::from_fn(k, |i, _| atom_linear_cost(&atoms[i], cost));
        Ok(GramSystem { h, c })
    }
}

/// `J(b) = c^T b + 1/2 b^T H b`.
pub fn objective(weights: &[f64], gram: &GramSystem) -> Result<f64, MeasureError> {
    if weights.len() != gram.len() {
        return Err(MeasureError::Dimension {
            expected: gram.len(),
            got: weights.len(),
        });
    }
    let hb = gram.h_times(weights);
    let mut lin = 0.0;
    let mut quad = 0.0;
    for i in 0..weights.len() {
        lin += gram.c[i] * weights[i];
        quad += weights[i] * hb[i];
    }
    Ok(lin + 0.5 * quad)
}

/// Objective of a mixture whose atoms are aligned with `gram`.
pub fn mixture_objective(mix: &Mixture, gram: &GramSystem) -> Result<f64, MeasureError> {
    objective(mix.weights(), gram)
}

/// Appends the row/column of `new_atom` against `atoms` plus its diagonal and
/// linear cost. Existing entries are copied untouched. Row entries are
/// computed in parallel.
pub fn extend_gram(
    gram: &GramSystem,
    atoms: &[Arc<TrajectoryEnsemble>],
    new_atom: &TrajectoryEnsemble,
    cost: &CostSpec,
) -> Result<GramSystem, MeasureError> {
    let k = gram.len();
    if atoms.len() != k {
        return Err(MeasureError::Dimension {
            expected: k,
            got: atoms.len(),
        });
    }
    let row = atoms
        .par_iter()
        .map(|a| interaction_gram_entry(a, new_atom, cost))
        .collect::<Result<Vec<f64>, _>>()?;
    let diag = interaction_gram_entry(new_atom, new_atom, cost)?;
    let mut h = DMatrix::zeros(k + 1, k + 1);
    h.view_mut((0, 0), (k, k)).copy_from(&gram.h);
    for (i, v) in row.into_iter().enumerate() {
        h[(i, k)] = v;
        h[(k, i)] = v;
    }
    h[(k, k)] = diag;
    let mut c = DVector::zeros(k + 1);
    c.rows_mut(0, k).copy_from(&gram.c);
    c[k] = atom_linear_cost(new_atom, cost);
    Ok(GramSystem { h, c })
}

/// Components of the objective of a mixture, for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub control: f64,
    pub obstacle: f64,
    pub terminal: f64,
    pub interaction: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.control + self.obstacle + self.terminal + self.interaction
    }
}

/// Splits `J` into control, obstacle, terminal and interaction parts.
pub fn cost_breakdown(mix: &Mixture, gram: &GramSystem, cost: &CostSpec) -> CostBreakdown {
    let mut out = CostBreakdown::default();
    for (atom, &beta) in mix.atoms().iter().zip(mix.weights()) {
        if beta == 0.0 {
            continue;
        }
        let dt = atom.grid.dt();
        let pd = atom.position_dim;
        for m in atom.members() {
            let w = beta * m.weight;
            for n in 0..atom.grid.steps {
                out.control += w * dt * control_cost(cost, m.controls.control(n));
                out.obstacle += w * dt * obstacle_potential(cost, m.position(n, pd));
            }
            out.terminal += w * terminal_cost(cost, m.position(atom.grid.steps, pd));
        }
    }
    let hb = gram.h_times(mix.weights());
    out.interaction = 0.5 * mix.weights().iter().zip(&hb).map(|(a, b)| a * b).sum::<f64>();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Obstacle;

    fn uav_cost(lambda: f64) -> CostSpec {
        CostSpec {
            control_weight: 0.1,
            control_form: ControlCostForm::HalfSquared,
            terminal: TerminalCost::Quadratic {
                weight: 30.0,
                target: vec![5.0, 3.0],
            },
            obstacles: vec![],
            interaction_weight: lambda,
            kernel_width: 0.25,
        }
    }

    fn stationary(grid: TimeGrid, at: &[f64]) -> TrajectoryEnsemble {
        let n = grid.steps;
        let mut data = Vec::new();
        for _ in 0..=n {
            data.extend_from_slice(at);
        }
        TrajectoryEnsemble::new(
            grid,
            at.len(),
            vec![EnsembleMember {
                weight: 1.0,
                trajectory: StateTrajectory::from_flat(at.len(), data),
                controls: ControlGrid::zeros(at.len(), n),
            }],
        )
        .unwrap()
    }

    #[test]
    fn kernel_values() {
        let cost = uav_cost(0.5);
        assert_eq!(kernel(&cost, 0.0), 1.0);
        assert!((kernel(&cost, 0.25) - (-0.5f64).exp()).abs() < 1e-16);
        assert!((kernel(&cost, 0.25) - 0.606531).abs() < 1e-6);
        assert!(kernel(&cost, 2.5) < 2e-22);
    }

    #[test]
    fn obstacle_values() {
        let mut cost = uav_cost(0.0);
        cost.obstacles = vec![Obstacle {
            center: vec![2.5, 1.5],
            radius: 0.8,
            margin: 0.0,
            gain: 1e3,
        }];
        assert!((obstacle_potential(&cost, &[2.5, 1.5]) - 640.0).abs() < 1e-9);
        assert_eq!(obstacle_potential(&cost, &[5.0, 3.0]), 0.0);
        cost.obstacles[0].margin = 0.2;
        assert!((obstacle_potential(&cost, &[2.5, 1.5]) - 1000.0).abs() < 1e-9);
        assert_eq!(obstacle_potential(&cost, &[2.5, 2.51]), 0.0);
    }

    #[test]
    fn stationary_at_target_costs_nothing() {
        let grid = TimeGrid::new(3.0, 10);
        assert_eq!(atom_linear_cost(&stationary(grid, &[5.0, 3.0]), &uav_cost(0.0)), 0.0);
    }

    #[test]
    fn unit_offset_terminal_cost() {
        let grid = TimeGrid::new(3.0, 10);
        let c = atom_linear_cost(&stationary(grid, &[4.0, 3.0]), &uav_cost(0.0));
        assert!((c - 15.0).abs() < 1e-12);
    }

    #[test]
    fn self_interaction_of_point_particle() {
        for steps in [1, 7, 150] {
            let e = stationary(TimeGrid::new(3.0, steps), &[1.0, 1.0]);
            let h = interaction_gram_entry(&e, &e, &uav_cost(0.5)).unwrap();
            assert!((h - 3.0).abs() < 1e-12, "{h}");
        }
    }

    #[test]
    fn distant_particles_do_not_interact() {
        let grid = TimeGrid::new(3.0, 10);
        let a = stationary(grid, &[0.0, 0.0]);
        let b = stationary(grid, &[2.5, 0.0]);
        let h = interaction_gram_entry(&a, &b, &uav_cost(0.5)).unwrap();
        assert!(h < 1e-20 * 2.0 * 0.5 * 3.0);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let a = stationary(TimeGrid::new(3.0, 10), &[0.0, 0.0]);
        let b = stationary(TimeGrid::new(3.0, 11), &[0.0, 0.0]);
        assert_eq!(
            interaction_gram_entry(&a, &b, &uav_cost(0.5)).unwrap_err(),
            MeasureError::GridMismatch
        );
    }

    #[test]
    fn single_atom_objective() {
        let grid = TimeGrid::new(3.0, 10);
        let e = Arc::new(stationary(grid, &[4.0, 3.0]));
        let gram = extend_gram(&GramSystem::empty(), &[], &e, &uav_cost(0.5)).unwrap();
        assert_eq!(gram.len(), 1);
        let j = objective(&[1.0], &gram).unwrap();
        assert!((j - (gram.c[0] + 0.5 * gram.h[(0, 0)])).abs() < 1e-15);
        assert!((j - 16.5).abs() < 1e-12);
        assert!(objective(&[0.5, 0.5], &gram).is_err());
    }

    #[test]
    fn zero_interaction_is_linear() {
        let grid = TimeGrid::new(3.0, 10);
        let atoms = vec![
            Arc::new(stationary(grid, &[4.0, 3.0])),
            Arc::new(stationary(grid, &[1.0, 3.0])),
        ];
        let gram = GramSystem::build(&atoms, &uav_cost(0.0)).unwrap();
        let b = [0.3, 0.7];
        let j = objective(&b, &gram).unwrap();
        assert_eq!(j, gram.c[0] * 0.3 + gram.c[1] * 0.7);
    }

    #[test]
    fn combine_weights() {
        let grid = TimeGrid::new(3.0, 4);
        let a = Arc::new(stationary(grid, &[0.0, 0.0]));
        let b = Arc::new(stationary(grid, &[1.0, 0.0]));
        let mix = Mixture::single(a.clone());
        let (m1, keep) = convex_combine(&mix, b.clone(), 1.0, 1e-12).unwrap();
        assert_eq!(keep, vec![1]);
        assert_eq!(m1.weights(), &[1.0]);
        assert!(Arc::ptr_eq(&m1.atoms()[0], &b));
        let (m2, keep) = convex_combine(&mix, b.clone(), 2.0 / 3.0, 1e-12).unwrap();
        assert_eq!(keep, vec![0, 1]);
        assert!((m2.weights()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((m2.weights()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(convex_combine(&mix, b.clone(), 0.0, 1e-12).is_err());
        assert!(convex_combine(&mix, b, 1.5, 1e-12).is_err());
    }

    #[test]
    fn combine_keeps_simplex() {
        let grid = TimeGrid::new(3.0, 4);
        let mut mix = Mixture::single(Arc::new(stationary(grid, &[0.0, 0.0])));
        for k in 0..200 {
            let atom = Arc::new(stationary(grid, &[k as f64, 0.0]));
            mix = convex_combine(&mix, atom, 2.0 / (k as f64 + 2.0), 1e-12).unwrap().0;
            let sum: f64 = mix.weights().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(mix.weights().iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn extension_preserves_existing_entries() {
        let grid = TimeGrid::new(3.0, 6);
        let cost = uav_cost(0.5);
        let atoms: Vec<_> = (0..4)
            .map(|k| Arc::new(stationary(grid, &[0.1 * k as f64, 0.05 * k as f64])))
            .collect();
        let mut gram = GramSystem::empty();
        for k in 0..atoms.len() {
            let before = gram.clone();
            gram = extend_gram(&gram, &atoms[..k], &atoms[k], &cost).unwrap();
            for i in 0..k {
                assert_eq!(gram.c[i].to_bits(), before.c[i].to_bits());
                for j in 0..k {
                    assert_eq!(gram.h[(i, j)].to_bits(), before.h[(i, j)].to_bits());
                }
            }
        }
        let rebuilt = GramSystem::build(&atoms, &cost).unwrap();
        assert!((&rebuilt.h - &gram.h).amax() <= 1e-14);
        assert!((&rebuilt.c - &gram.c).amax() <= 1e-14);
    }

    #[test]
    fn retain_selects_rows_and_columns() {
        let gram = GramSystem {
            h: DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]),
            c: DVector::from_vec(vec![7.0, 8.0, 9.0]),
        };
        let r = gram.retain(&[0, 2]);
        assert_eq!(r.h, DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 6.0]));
        assert_eq!(r.c, DVector::from_vec(vec![7.0, 9.0]));
    }
}

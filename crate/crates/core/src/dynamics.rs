//! Drift fields, their Jacobians, control projection and RK4 rollouts with a
//! zero-order-hold control per grid step.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::scenario::{DynamicsSpec, TimeGrid};

/// Largest state dimension of any supported dynamics family.
pub(crate) const MAX_STATE_DIM: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("gravitational singularity: |r| = 0")]
    Singularity,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("integration failed at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<DynamicsError>,
    },
}

impl DynamicsSpec {
    pub fn state_dim(&self) -> usize {
        match *self {
            DynamicsSpec::SingleIntegrator { dim } => dim,
            DynamicsSpec::Keplerian { .. } => 6,
        }
    }

    pub fn control_dim(&self) -> usize {
        match *self {
            DynamicsSpec::SingleIntegrator { dim } => dim,
            DynamicsSpec::Keplerian { .. } => 3,
        }
    }

    /// Number of leading state components that are spatial position.
    pub fn position_dim(&self) -> usize {
        match *self {
            DynamicsSpec::SingleIntegrator { dim } => dim,
            DynamicsSpec::Keplerian { .. } => 3,
        }
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<(), DynamicsError> {
        if x.len() != self.state_dim() {
            return Err(DynamicsError::Dimension {
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if u.len() != self.control_dim() {
            return Err(DynamicsError::Dimension {
                expected: self.control_dim(),
                got: u.len(),
            });
        }
        Ok(())
    }

    pub fn drift(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        self.check_dims(x, u)?;
        let mut out = vec![0.0; self.state_dim()];
        self.drift_into(x, u, &mut out)?;
        Ok(out)
    }

    pub(crate) fn drift_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
        match *self {
            DynamicsSpec::SingleIntegrator { dim } => {
                out[..dim].copy_from_slice(&u[..dim]);
            }
            DynamicsSpec::Keplerian { grav_param, .. } => {
                let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
                if r2 == 0.0 {
                    return Err(DynamicsError::Singularity);
                }
                let r = r2.sqrt();
                let k = -grav_param / (r2 * r);
                for i in 0..3 {
                    out[i] = x[3 + i];
                    out[3 + i] = k * x[i] + u[i];
                }
            }
        }
        Ok(())
    }

    /// Exact `(df/dx, df/du)`.
    pub fn drift_jacobians(
        &self,
        x: &[f64],
        u: &[f64],
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
        self.check_dims(x, u)?;
        let (sd, cd) = (self.state_dim(), self.control_dim());
        let mut fx = DMatrix::zeros(sd, sd);
        let mut fu = DMatrix::zeros(sd, cd);
        match *self {
            DynamicsSpec::SingleIntegrator { dim } => {
                for i in 0..dim {
                    fu[(i, i)] = 1.0;
                }
            }
            DynamicsSpec::Keplerian { grav_param, .. } => {
                let g = gravity_gradient(grav_param, &x[..3])?;
                for i in 0..3 {
                    fx[(i, 3 + i)] = 1.0;
                    fu[(3 + i, i)] = 1.0;
                    for j in 0..3 {
                        fx[(3 + i, j)] = g[i][j];
                    }
                }
            }
        }
        Ok((fx, fu))
    }

    /// Accumulates `w^T df/dx` into `gx` and `w^T df/du` into `gu`.
    pub(crate) fn drift_vjp(
        &self,
        x: &[f64],
        w: &[f64],
        gx: &mut [f64],
        gu: &mut [f64],
    ) -> Result<(), DynamicsError> {
        match *self {
            DynamicsSpec::SingleIntegrator { dim } => {
                for i in 0..dim {
                    gu[i] += w[i];
                }
            }
            DynamicsSpec::Keplerian { grav_param, .. } => {
                let g = gravity_gradient(grav_param, &x[..3])?;
                for i in 0..3 {
                    let mut acc = 0.0;
                    for j in 0..3 {
                        acc += g[j][i] * w[3 + j];
                    }
                    gx[i] += acc;
                    gx[3 + i] += w[i];
                    gu[i] += w[3 + i];
                }
            }
        }
        Ok(())
    }

    /// Radial projection onto the thrust ball; identity for unbounded controls.
    pub fn project_control(&self, u: &[f64]) -> Vec<f64> {
        let mut out = u.to_vec();
        self.project_control_in_place(&mut out);
        out
    }

    pub(crate) fn project_control_in_place(&self, u: &mut [f64]) {
        if let DynamicsSpec::Keplerian { control_bound, .. } = *self {
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > control_bound {
                let s = control_bound / norm;
                for v in u.iter_mut() {
                    *v *= s;
                }
                // rounding can leave the scaled norm one ulp above the bound
                let again = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                if again > control_bound {
                    let s = control_bound / again * (1.0 - f64::EPSILON);
                    for v in u.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }
    }

    pub fn control_bound(&self) -> Option<f64> {
        match *self {
            DynamicsSpec::SingleIntegrator { .. } => None,
            DynamicsSpec::Keplerian { control_bound, .. } => Some(control_bound),
        }
    }
}

/// `d(-mu r / |r|^3) / dr = -mu (I / |r|^3 - 3 r r^T / |r|^5)`.
fn gravity_gradient(mu: f64, r: &[f64]) -> Result<[[f64; 3]; 3], DynamicsError> {
    let r2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    if r2 == 0.0 {
        return Err(DynamicsError::Singularity);
    }
    let rn = r2.sqrt();
    let inv3 = 1.0 / (r2 * rn);
    let inv5 = inv3 / r2;
    let mut g = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let delta = if i == j { 1.0 } else { 0.0 };
            g[i][j] = -mu * (delta * inv3 - 3.0 * r[i] * r[j] * inv5);
        }
    }
    Ok(g)
}

/// States at the `N_t + 1` grid nodes, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    state_dim: usize,
    data: Vec<f64>,
}

impl StateTrajectory {
    pub fn from_flat(state_dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len() % state_dim, 0);
        Self { state_dim, data }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Number of stored states (`N_t + 1`).
    pub fn len(&self) -> usize {
        self.data.len() / self.state_dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn state(&self, n: usize) -> &[f64] {
        &self.data[n * self.state_dim..(n + 1) * self.state_dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}

/// One control vector per grid step, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    control_dim: usize,
    data: Vec<f64>,
}

impl ControlGrid {
    pub fn zeros(control_dim: usize, steps: usize) -> Self {
        Self {
            control_dim,
            data: vec![0.0; control_dim * steps],
        }
    }

    pub fn from_flat(control_dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len() % control_dim, 0);
        Self { control_dim, data }
    }

    pub fn constant(u: &[f64], steps: usize) -> Self {
        let mut data = Vec::with_capacity(u.len() * steps);
        for _ in 0..steps {
            data.extend_from_slice(u);
        }
        Self {
            control_dim: u.len(),
            data,
        }
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn steps(&self) -> usize {
        self.data.len() / self.control_dim
    }

    pub fn control(&self, n: usize) -> &[f64] {
        &self.data[n * self.control_dim..(n + 1) * self.control_dim]
    }

    pub fn control_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.data[n * self.control_dim..(n + 1) * self.control_dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Forward pass record: the trajectory plus every RK4 stage input, which the
/// reverse sweep needs.
#[derive(Debug, Clone)]
pub(crate) struct RolloutTape {
    pub trajectory: StateTrajectory,
    /// `stages[(n * 4 + s) * sd ..]` is the input of stage `s` at step `n`.
    stages: Vec<f64>,
}

fn rk4_step(
    spec: &DynamicsSpec,
    h: f64,
    x: &[f64],
    u: &[f64],
    next: &mut [f64],
    stages: &mut [f64],
) -> Result<(), DynamicsError> {
    let sd = x.len();
    let mut k = [[0.0; MAX_STATE_DIM]; 4];
    let mut y = [0.0; MAX_STATE_DIM];
    let coef = [0.0, 0.5 * h, 0.5 * h, h];
    for s in 0..4 {
        for i in 0..sd {
            y[i] = if s == 0 { x[i] } else { x[i] + coef[s] * k[s - 1][i] };
        }
        stages[s * sd..(s + 1) * sd].copy_from_slice(&y[..sd]);
        spec.drift_into(&y[..sd], u, &mut k[s][..sd])?;
    }
    for i in 0..sd {
        next[i] = x[i] + h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
    }
    Ok(())
}

pub(crate) fn rollout_tape(
    spec: &DynamicsSpec,
    grid: &TimeGrid,
    xi: &[f64],
    controls: &ControlGrid,
) -> Result<RolloutTape, DynamicsError> {
    let sd = spec.state_dim();
    if xi.len() != sd {
        return Err(DynamicsError::Dimension {
            expected: sd,
            got: xi.len(),
        });
    }
    if controls.control_dim() != spec.control_dim() {
        return Err(DynamicsError::Dimension {
            expected: spec.control_dim(),
            got: controls.control_dim(),
        });
    }
    if controls.steps() != grid.steps {
        return Err(DynamicsError::Dimension {
            expected: grid.steps,
            got: controls.steps(),
        });
    }
    let steps = grid.steps;
    let h = grid.dt();
    let mut data = vec![0.0; (steps + 1) * sd];
    let mut stages = vec![0.0; steps * 4 * sd];
    data[..sd].copy_from_slice(xi);
    for n in 0..steps {
        let (done, rest) = data.split_at_mut((n + 1) * sd);
        let x = &done[n * sd..];
        let next = &mut rest[..sd];
        rk4_step(
            spec,
            h,
            x,
            controls.control(n),
            next,
            &mut stages[n * 4 * sd..(n + 1) * 4 * sd],
        )
        .map_err(|e| DynamicsError::Step {
            step: n,
            source: Box::new(e),
        })?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite { step: n + 1 });
        }
    }
    Ok(RolloutTape {
        trajectory: StateTrajectory {
            state_dim: sd,
            data,
        },
        stages,
    })
}

/// Integrates `x' = f(x, u)` from `xi` with classical RK4, holding each
/// step's control constant.
pub fn rollout(
    spec: &DynamicsSpec,
    grid: &TimeGrid,
    xi: &[f64],
    controls: &ControlGrid,
) -> Result<StateTrajectory, DynamicsError> {
    rollout_tape(spec, grid, xi, controls).map(|t| t.trajectory)
}

impl RolloutTape {
    /// Reverse sweep through step `n`: given the cotangent of `x_{n+1}`,
    /// writes the cotangent of `x_n` into `bar_x` and accumulates the
    /// control cotangent into `bar_u`.
    pub(crate) fn step_vjp(
        &self,
        spec: &DynamicsSpec,
        h: f64,
        n: usize,
        bar_next: &[f64],
        bar_x: &mut [f64],
        bar_u: &mut [f64],
    ) -> Result<(), DynamicsError> {
        let sd = bar_next.len();
        let stage = |s: usize| &self.stages[(n * 4 + s) * sd..(n * 4 + s + 1) * sd];
        bar_x.copy_from_slice(bar_next);
        let mut bar_k = [[0.0; MAX_STATE_DIM]; 4];
        let weights = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
        for s in 0..4 {
            for i in 0..sd {
                bar_k[s][i] = weights[s] * bar_next[i];
            }
        }
        // stage s reads x + coef[s] * k[s-1]
        let coef = [0.0, 0.5 * h, 0.5 * h, h];
        for s in (0..4).rev() {
            let mut gy = [0.0; MAX_STATE_DIM];
            spec.drift_vjp(stage(s), &bar_k[s][..sd], &mut gy[..sd], bar_u)?;
            for i in 0..sd {
                bar_x[i] += gy[i];
            }
            if s > 0 {
                for i in 0..sd {
                    bar_k[s - 1][i] += coef[s] * gy[i];
                }
            }
        }
        Ok(())
    }
}

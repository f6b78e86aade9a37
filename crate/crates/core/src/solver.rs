//! Frank-Wolfe and fully-corrective Frank-Wolfe over trajectory mixtures.

use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::dynamics::{rollout, ControlGrid, DynamicsError};
use crate::measure::{
    convex_combine, extend_gram, objective, EnsembleMember, GramSystem, MeasureError, Mixture,
    TrajectoryEnsemble,
};
use crate::ocp::{solve_lmo_ensemble, FrozenField, LmoProblem, OcpError};
use crate::scenario::{
    sample_initial_states, Algorithm, QpStepRule, ScenarioConfig, ScenarioError, SolverOptions,
};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("initial rollout failed: {0}")]
    Initial(#[from] DynamicsError),
    #[error("oracle failed at outer iteration {iteration}: {source}")]
    Lmo {
        iteration: usize,
        #[source]
        source: OcpError,
        /// Records completed before the failure.
        history: Vec<IterationRecord>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    /// `J_k - J_K`, filled once the run ends.
    pub gap_displayed: f64,
    /// Frank-Wolfe surrogate gap of iterate `k`; NaN for the final iterate,
    /// which has no oracle call.
    pub gap_surrogate: f64,
    pub lmo_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub algorithm: Algorithm,
    pub history: Vec<IterationRecord>,
    pub mixture: Mixture,
    pub gram: GramSystem,
    pub initial_states: Vec<(Vec<f64>, f64)>,
}

impl RunResult {
    pub fn final_objective(&self) -> f64 {
        self.history.last().map(|r| r.objective).unwrap_or(f64::NAN)
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.objective).collect()
    }
}

/// Called after every outer iteration with the new iterate.
pub trait IterationObserver {
    fn on_iteration(&mut self, record: &IterationRecord, mixture: &Mixture, gram: &GramSystem);
}

impl IterationObserver for () {
    fn on_iteration(&mut self, _: &IterationRecord, _: &Mixture, _: &GramSystem) {}
}

impl<F: FnMut(&IterationRecord, &Mixture, &GramSystem)> IterationObserver for F {
    fn on_iteration(&mut self, record: &IterationRecord, mixture: &Mixture, gram: &GramSystem) {
        self(record, mixture, gram)
    }
}

/// `2 / (k + 2)`.
pub fn fw_step_size(k: usize) -> f64 {
    2.0 / (k as f64 + 2.0)
}

/// Surrogate gap `<grad J(b), b - e_j>` where `j` indexes the candidate atom
/// in `gram` and `weights` is the current iterate on the same dictionary.
///
/// The linearized cost of atom `i` under the current population is
/// `c_i + (H b)_i`, so no optimal-control problem is re-solved.
pub fn fw_gap(weights: &[f64], gram: &GramSystem, candidate: usize) -> Result<f64, MeasureError> {
    if weights.len() != gram.len() || candidate >= gram.len() {
        return Err(MeasureError::Dimension {
            expected: gram.len(),
            got: weights.len().max(candidate + 1),
        });
    }
    let hb = gram.h_times(weights);
    let current: f64 = weights
        .iter()
        .enumerate()
        .map(|(i, w)| w * (gram.c[i] + hb[i]))
        .sum();
    Ok(current - (gram.c[candidate] + hb[candidate]))
}

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn simplex_project(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    if n == 0 {
        return Vec::new();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            tau = t;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|x| (x - tau).max(0.0)).collect();
    let sum: f64 = w.iter().sum();
    if sum > 0.0 && (sum - 1.0).abs() > 1e-15 {
        for x in &mut w {
            *x /= sum;
        }
    }
    w
}

fn largest_eigenvalue(gram: &GramSystem) -> f64 {
    gram.h
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Minimizes `1/2 a^T H a + c^T a` over the simplex by projected gradient from
/// `init`, returning the best iterate.
pub fn fcfw_weight_qp(
    gram: &GramSystem,
    init: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<f64>, MeasureError> {
    let k = gram.len();
    if init.len() != k {
        return Err(MeasureError::Dimension {
            expected: k,
            got: init.len(),
        });
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let step = opts.qp_pgd_learning_rate.unwrap_or_else(|| match opts.qp_step_rule {
        QpStepRule::Trace => 1.0 / (gram.h.trace() / k as f64 + 1.0),
        QpStepRule::Spectral => {
            let l = largest_eigenvalue(gram);
            if l > 0.0 {
                1.0 / l
            } else {
                // linear objective: a huge step lands on the cheapest vertex
                1e12 / (1.0 + gram.c.amax())
            }
        }
    });
    let mut alpha = init.to_vec();
    let mut best = alpha.clone();
    let mut best_value = objective(&alpha, gram)?;
    for _ in 0..opts.qp_pgd_steps {
        let hb = gram.h_times(&alpha);
        let trial: Vec<f64> = (0..k)
            .map(|i| alpha[i] - step * (hb[i] + gram.c[i]))
            .collect();
        alpha = simplex_project(&trial);
        let value = objective(&alpha, gram)?;
        if value < best_value {
            best_value = value;
            best.clone_from(&alpha);
        }
    }
    Ok(best)
}

/// Ensemble of zero-control rollouts from the initial support points.
pub fn zero_control_ensemble(
    cfg: &ScenarioConfig,
    states: &[(Vec<f64>, f64)],
) -> Result<TrajectoryEnsemble, SolverError> {
    let spec = &cfg.dynamics;
    let members = states
        .iter()
        .map(|(xi, w)| {
            let controls = ControlGrid::zeros(spec.control_dim(), cfg.grid.steps);
            let trajectory = rollout(spec, &cfg.grid, xi, &controls)?;
            Ok(EnsembleMember {
                weight: *w,
                trajectory,
                controls,
            })
        })
        .collect::<Result<Vec<_>, DynamicsError>>()?;
    Ok(TrajectoryEnsemble::new(cfg.grid, spec.position_dim(), members)?)
}

fn initial_states(cfg: &ScenarioConfig) -> Result<Vec<(Vec<f64>, f64)>, SolverError> {
    Ok(sample_initial_states(&cfg.initial, cfg.solver.rng_seed)?)
}

/// Runs the algorithm selected in `cfg.solver.algorithm`.
pub fn run(cfg: &ScenarioConfig, observer: &mut dyn IterationObserver) -> Result<RunResult, SolverError> {
    let opts = &cfg.solver;
    let states = initial_states(cfg)?;
    let atom0 = Arc::new(zero_control_ensemble(cfg, &states)?);
    let mut gram = extend_gram(&GramSystem::empty(), &[], &atom0, &cfg.cost)?;
    let mut mix = Mixture::single(atom0);
    let mut history = vec![IterationRecord {
        iteration: 0,
        objective: objective(mix.weights(), &gram)?,
        gap_displayed: f64::NAN,
        gap_surrogate: f64::NAN,
        lmo_seconds: 0.0,
    }];
    observer.on_iteration(&history[0], &mix, &gram);

    let mut previous: Option<Arc<TrajectoryEnsemble>> = None;
    for k in 0..opts.outer_iterations {
        let field = FrozenField::new(&mix, &cfg.cost);
        let problem = LmoProblem {
            spec: &cfg.dynamics,
            grid: &cfg.grid,
            cost: &cfg.cost,
            field: &field,
        };
        let mut warm: Vec<&TrajectoryEnsemble> = Vec::new();
        if opts.warm_start {
            warm.extend(previous.as_deref());
            warm.extend(
                mix.atoms()
                    .iter()
                    .zip(mix.weights())
                    .filter(|(_, &w)| w > 0.0)
                    .map(|(a, _)| a.as_ref()),
            );
        }
        let started = Instant::now();
        let candidate = match solve_lmo_ensemble(&problem, &states, opts, &warm) {
            Ok((ens, _)) => Arc::new(ens),
            Err(source) => {
                return Err(SolverError::Lmo {
                    iteration: k,
                    source,
                    history,
                })
            }
        };
        let seconds = started.elapsed().as_secs_f64();

        let extended = extend_gram(&gram, mix.atoms(), &candidate, &cfg.cost)?;
        let mut padded = mix.weights().to_vec();
        padded.push(0.0);
        let gap = fw_gap(&padded, &extended, padded.len() - 1)?;
        if let Some(rec) = history.last_mut() {
            rec.gap_surrogate = gap;
            rec.lmo_seconds = seconds;
        }

        let step = fw_step_size(k);
        match opts.algorithm {
            Algorithm::Fw => {
                let (next, keep) = convex_combine(&mix, candidate.clone(), step, opts.weight_prune_tol)?;
                gram = extended.retain(&keep);
                mix = next;
            }
            Algorithm::Fcfw => {
                let mut fw_weights: Vec<f64> = padded.iter().map(|w| (1.0 - step) * w).collect();
                *fw_weights.last_mut().expect("nonempty") = step;
                let start = if objective(&fw_weights, &extended)? < objective(&padded, &extended)? {
                    fw_weights
                } else {
                    padded
                };
                let weights = fcfw_weight_qp(&extended, &start, opts)?;
                mix.push_inactive(candidate.clone())?;
                mix = mix.with_weights(weights)?;
                gram = extended;
            }
        }
        previous = Some(candidate);

        history.push(IterationRecord {
            iteration: k + 1,
            objective: objective(mix.weights(), &gram)?,
            gap_displayed: f64::NAN,
            gap_surrogate: f64::NAN,
            lmo_seconds: 0.0,
        });
        observer.on_iteration(history.last().expect("nonempty"), &mix, &gram);
        if opts.gap_tol.is_some_and(|tol| gap <= tol) {
            break;
        }
    }

    let final_objective = history.last().expect("nonempty").objective;
    for rec in &mut history {
        rec.gap_displayed = rec.objective - final_objective;
    }
    Ok(RunResult {
        algorithm: opts.algorithm,
        history,
        mixture: mix,
        gram,
        initial_states: states,
    })
}

fn with_algorithm(cfg: &ScenarioConfig, algorithm: Algorithm) -> ScenarioConfig {
    let mut cfg = cfg.clone();
    cfg.solver.algorithm = algorithm;
    cfg
}

/// Plain Frank-Wolfe with step sizes `2 / (k + 2)`.
pub fn fw_run(cfg: &ScenarioConfig) -> Result<RunResult, SolverError> {
    run(&with_algorithm(cfg, Algorithm::Fw), &mut ())
}

/// Fully-corrective Frank-Wolfe: weights re-optimized over the whole
/// dictionary after each oracle call.
pub fn fcfw_run(cfg: &ScenarioConfig) -> Result<RunResult, SolverError> {
    run(&with_algorithm(cfg, Algorithm::Fcfw), &mut ())
}

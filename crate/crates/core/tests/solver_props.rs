use std::sync::Arc;

use ommfc::diagnostics::dense_lq_optimum;
use ommfc::measure::{objective, GramSystem, Mixture};
use ommfc::ocp::{solve_lmo_ensemble, FrozenField, LmoProblem};
use ommfc::scenario::{bundled_scenario, sample_initial_states, Algorithm, ScenarioConfig, TimeGrid};
use ommfc::solver::{fcfw_run, fcfw_weight_qp, fw_run, run, zero_control_ensemble};

fn small(name: &str, steps: usize, iters: usize, lmo_steps: usize) -> ScenarioConfig {
    let mut cfg = bundled_scenario(name).unwrap();
    cfg.grid = TimeGrid::new(cfg.grid.horizon, steps);
    cfg.solver.outer_iterations = iters;
    cfg.solver.lmo_steps = lmo_steps;
    cfg
}

fn lq_instance() -> ScenarioConfig {
    let mut cfg = small("uav2d_single", 5, 50, 2000);
    cfg.cost.interaction_weight = 0.0;
    cfg.cost.obstacles.clear();
    cfg.solver.algorithm = Algorithm::Fw;
    cfg
}

#[test]
fn record_count_is_k_plus_one() {
    let r = run(&small("uav2d_single", 20, 4, 30), &mut ()).unwrap();
    assert_eq!(r.history.len(), 5);
    assert_eq!(r.history.last().unwrap().gap_displayed, 0.0);
    assert!(r.history.last().unwrap().gap_surrogate.is_nan());
}

#[test]
fn fw_single_iteration_is_the_first_oracle_ensemble() {
    let cfg = small("uav2d_single", 20, 1, 40);
    let r = fw_run(&cfg).unwrap();
    assert_eq!(r.mixture.weights(), &[1.0]);

    let states = sample_initial_states(&cfg.initial, cfg.solver.rng_seed).unwrap();
    let start = Mixture::single(Arc::new(zero_control_ensemble(&cfg, &states).unwrap()));
    let field = FrozenField::new(&start, &cfg.cost);
    let problem = LmoProblem {
        spec: &cfg.dynamics,
        grid: &cfg.grid,
        cost: &cfg.cost,
        field: &field,
    };
    let (ens, _) = solve_lmo_ensemble(&problem, &states, &cfg.solver, &[]).unwrap();
    assert_eq!(r.mixture.atoms()[0].members()[0].controls, ens.members()[0].controls);
}

#[test]
fn fcfw_is_monotone() {
    for name in ["uav2d_single", "uav2d_multisource", "uav3d_obstacles"] {
        let fc = fcfw_run(&small(name, 30, 12, 60)).unwrap();
        for w in fc.history.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-9 * (1.0 + w[0].objective.abs()), "{name}");
        }
    }
}

#[test]
fn fcfw_not_worse_than_fw_without_obstacles() {
    let mut cfg = small("uav2d_multisource", 10, 15, 300);
    cfg.cost.obstacles.clear();
    let j = fcfw_run(&cfg).unwrap().final_objective();
    let fw = fw_run(&cfg).unwrap().final_objective();
    assert!(j <= fw + 1e-6 * (1.0 + j.abs()), "{j} vs {fw}");
}

#[test]
fn surrogate_gap_is_nonnegative() {
    for algorithm in [Algorithm::Fw, Algorithm::Fcfw] {
        let mut cfg = small("uav2d_single", 30, 10, 60);
        cfg.solver.algorithm = algorithm;
        let r = run(&cfg, &mut ()).unwrap();
        for h in &r.history[..r.history.len() - 1] {
            assert!(h.gap_surrogate >= -1e-9 * (1.0 + h.objective.abs()), "{algorithm:?}: {h:?}");
        }
    }
}

#[test]
fn weights_stay_on_the_simplex() {
    for algorithm in [Algorithm::Fw, Algorithm::Fcfw] {
        let mut cfg = small("uav2d_multisource", 20, 8, 30);
        cfg.solver.algorithm = algorithm;
        let r = run(&cfg, &mut ()).unwrap();
        let w = r.mixture.weights();
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let rebuilt = GramSystem::build(r.mixture.atoms(), &cfg.cost).unwrap();
        let j = objective(w, &rebuilt).unwrap();
        assert!((j - r.final_objective()).abs() <= 1e-12 * (1.0 + j.abs()));
    }
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let mut cfg = small("uav2d_multisource", 20, 5, 30);
    cfg.initial = serde_json::from_str(
        r#"{"kind":"sampled","density":{"kind":"gaussian","mean":[0,0],"std":[0.5,0.5]},"count":6}"#,
    )
    .unwrap();
    cfg.solver.rng_seed = 3;
    let a = run(&cfg, &mut ()).unwrap();
    let b = run(&cfg, &mut ()).unwrap();
    let bits = |r: &ommfc::RunResult| r.history.iter().map(|h| h.objective.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.initial_states, b.initial_states);
    cfg.solver.rng_seed = 4;
    assert_ne!(run(&cfg, &mut ()).unwrap().initial_states, a.initial_states);
}

#[test]
fn fw_reaches_the_lq_optimum() {
    let cfg = lq_instance();
    let optimum = dense_lq_optimum(&cfg).unwrap();
    let r = fw_run(&cfg).unwrap();
    let j = r.final_objective();
    assert!((j - optimum).abs() <= 0.05 * optimum.abs(), "{j} vs {optimum}");
    for h in &r.history[..r.history.len() - 1] {
        assert!(h.gap_surrogate >= -1e-6 * (1.0 + h.objective.abs()));
        // the surrogate gap bounds the remaining suboptimality
        assert!(h.objective - j <= h.gap_surrogate + 1e-6 * (1.0 + h.objective.abs()));
    }
}

#[test]
fn lq_optimum_matches_closed_form() {
    // equal controls are optimal: u = w (g - x0) / (alpha + w T)
    let cfg = lq_instance();
    let (alpha, w, t): (f64, f64, f64) = (0.1, 30.0, 3.0);
    let offset2 = 25.0 + 9.0;
    let s = w / (alpha + w * t);
    let u2 = s * s * offset2;
    let miss2 = (1.0 - s * t).powi(2) * offset2;
    let expected = 0.5 * alpha * t * u2 + 0.5 * w * miss2;
    let got = dense_lq_optimum(&cfg).unwrap();
    assert!((got - expected).abs() < 1e-10 * expected, "{got} vs {expected}");
}

#[test]
fn qp_matches_grid_search_on_three_atoms() {
    let h = nalgebra::DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.2, 0.5, 1.5, 0.3, 0.2, 0.3, 1.0]);
    let c = nalgebra::DVector::from_vec(vec![0.3, -0.1, 0.4]);
    let gram = GramSystem { h, c };
    let opts = ommfc::scenario::SolverOptions::default();
    let w = fcfw_weight_qp(&gram, &[1.0 / 3.0; 3], &opts).unwrap();
    let got = objective(&w, &gram).unwrap();
    let n = 1000;
    let mut best = f64::INFINITY;
    for i in 0..=n {
        for j in 0..=(n - i) {
            let a = [i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64];
            best = best.min(objective(&a, &gram).unwrap());
        }
    }
    assert!(got <= best + 1e-4, "{got} vs {best}");
}

#[test]
fn lmo_ensemble_is_thread_count_invariant() {
    let cfg = small("uav2d_multisource", 20, 1, 30);
    let states = sample_initial_states(&cfg.initial, 0).unwrap();
    let start = Mixture::single(Arc::new(zero_control_ensemble(&cfg, &states).unwrap()));
    let field = FrozenField::new(&start, &cfg.cost);
    let problem = LmoProblem {
        spec: &cfg.dynamics,
        grid: &cfg.grid,
        cost: &cfg.cost,
        field: &field,
    };
    let solve = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| solve_lmo_ensemble(&problem, &states, &cfg.solver, &[]).unwrap())
    };
    let (a, ca) = solve(1);
    let (b, cb) = solve(3);
    assert_eq!(ca.iter().map(|c| c.to_bits()).collect::<Vec<_>>(), cb.iter().map(|c| c.to_bits()).collect::<Vec<_>>());
    for (ma, mb) in a.members().iter().zip(b.members()) {
        assert_eq!(ma.trajectory, mb.trajectory);
    }
}

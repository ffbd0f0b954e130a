use std::path::PathBuf;

use nloc_fp_core::cost::{CostFieldSpec, CostSpec, Penalty};
use nloc_fp_core::grid::{integrate, l1_distance};
use nloc_fp_core::mc::{simulate_paths, McConfig};
use nloc_fp_core::optimizer::{directional_derivative_check, evaluate_cost, fb_sweep, Termination};
use nloc_fp_core::scenario::{
    control_independent_scenario_config, finance_scenario_config, load_config, ProblemConfig,
    Scenario, ScenarioConfig,
};
use nloc_fp_core::{ControlField, GridSpec, ModelSpec, ScalarField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenario(config: ScenarioConfig) -> Scenario {
    Scenario::from_config(config).unwrap()
}

fn heat_config(cells: usize, steps: usize) -> ScenarioConfig {
    let mut c = control_independent_scenario_config();
    c.grid = GridSpec::new(1, 4.0, cells, 1.0, steps).unwrap();
    c.problem = ProblemConfig::Custom {
        model: ModelSpec::Constant {
            drift: vec![0.0],
            sigma: 0.2f64.sqrt(),
        },
        gamma: None,
        cost: CostSpec {
            running: CostFieldSpec::Zero,
            terminal: CostFieldSpec::Zero,
            penalty: Penalty::Quadratic { alpha: 1.0 },
        },
    };
    c
}

fn gaussian(x: f64, var: f64) -> f64 {
    (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

#[test]
fn heat_error_shrinks_under_refinement() {
    let errors: Vec<f64> = [(64, 100), (128, 400), (256, 1600)]
        .iter()
        .map(|&(cells, steps)| {
            let s = scenario(heat_config(cells, steps));
            let rho = s.problem.forward(&s.initial_control).unwrap();
            let exact = ScalarField::from_fn(s.grid(), |x| gaussian(x[0], 0.24)).unwrap();
            l1_distance(rho.terminal(), &exact)
        })
        .collect();
    for w in errors.windows(2) {
        assert!(w[0] / w[1] >= 3.0, "refinement ratio too small: {errors:?}");
    }
}

#[test]
fn density_depends_lipschitz_on_control() {
    // Measured sup of ‖ρ[u]-ρ[v]‖_L1 / ‖u-v‖_L2 on this setup is about 0.10.
    const FROZEN_CONSTANT: f64 = 0.25;
    let s = scenario(finance_scenario_config());
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for scale in [0.5, 0.1, 0.01] {
        for _ in 0..4 {
            let u =
                ControlField::from_fn(&s.problem.mask, 1.0, |_| rng.random::<f64>() * 0.5 + 0.25)
                    .unwrap();
            let dir = ScalarField::from_fn(s.grid(), |_| rng.random::<f64>() * 2.0 - 1.0).unwrap();
            let v = u.perturbed(&dir, 0.25 * scale).unwrap();
            let (ru, rv) = (
                s.problem.forward(&u).unwrap(),
                s.problem.forward(&v).unwrap(),
            );
            let gap = (0..=s.grid().steps)
                .map(|n| l1_distance(ru.at(n), rv.at(n)))
                .fold(0.0, f64::max);
            worst = worst.max(gap / u.l2_distance(&v));
        }
    }
    assert!(worst <= FROZEN_CONSTANT, "continuity constant {worst}");
}

#[test]
fn adjoint_respects_cost_bounds() {
    let s = scenario(finance_scenario_config());
    let p = &s.problem;
    let adj = p.adjoint(&s.initial_control).unwrap();
    let g = p.cost.running_at(0.0);
    let gt = p.cost.terminal();
    let horizon = s.grid().horizon;
    for n in 0..=s.grid().steps {
        let rest = horizon - s.grid().time(n);
        let lo = gt.min() + rest * g.min();
        let hi = gt.max() + rest * g.max();
        let f = adj.at(n);
        assert!(
            f.min() >= lo - 1e-9 && f.max() <= hi + 1e-9,
            "step {n}: [{}, {}] vs [{lo}, {hi}]",
            f.min(),
            f.max()
        );
    }
}

#[test]
fn adjoint_is_monotone_in_running_cost() {
    let base = finance_scenario_config();
    let ProblemConfig::Finance(fp) = base.problem.clone() else {
        unreachable!()
    };
    let mut cost = fp.cost_spec();
    cost.running = CostFieldSpec::Expression {
        expr: format!("{} * (x - {})^2 + 0.3", fp.lambda_run, fp.x_target),
    };
    let mut bumped = base.clone();
    bumped.problem = ProblemConfig::Custom {
        model: fp.model_spec(),
        gamma: Some(fp.sigma0 * fp.sigma0),
        cost,
    };
    let (a, b) = (scenario(base), scenario(bumped));
    let pa = a.problem.adjoint(&a.initial_control).unwrap();
    let pb = b.problem.adjoint(&b.initial_control).unwrap();
    for n in 0..=a.grid().steps {
        let rest = a.grid().horizon - a.grid().time(n);
        for (x, y) in pa.at(n).values().iter().zip(pb.at(n).values()) {
            assert!(y >= x, "p not monotone at step {n}");
            assert!((y - x - 0.3 * rest).abs() < 1e-9);
        }
    }
}

#[test]
fn monte_carlo_moments_follow_drift_and_diffusion() {
    let mut c = heat_config(256, 400);
    c.problem = ProblemConfig::Custom {
        model: ModelSpec::Constant {
            drift: vec![0.3],
            sigma: 0.4,
        },
        gamma: None,
        cost: CostSpec {
            running: CostFieldSpec::Zero,
            terminal: CostFieldSpec::Zero,
            penalty: Penalty::Quadratic { alpha: 1.0 },
        },
    };
    let s = scenario(c);
    let p = &s.problem;
    let run = simulate_paths(
        &p.operator,
        &s.initial_control,
        &p.model,
        &p.initial_density,
        None,
        &McConfig::new(40_000, 3),
    )
    .unwrap();
    let n = run.terminal_samples.len() as f64;
    let mean = run.terminal_samples.iter().map(|x| x[0]).sum::<f64>() / n;
    let var = run
        .terminal_samples
        .iter()
        .map(|x| (x[0] - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    let expected_var: f64 = 0.04 + 0.16;
    assert!(
        (mean - 0.3).abs() < 4.0 * (expected_var / n).sqrt(),
        "mean {mean}"
    );
    assert!(
        (var - expected_var).abs() / expected_var < 0.03,
        "variance {var}"
    );
}

#[test]
fn strong_relaxation_backtracks_and_converges() {
    let mut c = finance_scenario_config();
    let ProblemConfig::Finance(ref mut fp) = c.problem else {
        unreachable!()
    };
    fp.mu1 = 1.0;
    fp.sigma1 = 0.6;
    c.sweep.relaxation = 1.0;
    c.sweep.max_iter = 100;
    let s = scenario(c);
    let r = fb_sweep(&s.config.sweep, &s.problem, &s.initial_control).unwrap();
    assert!(r.total_halvings() > 0, "expected step halvings");
    assert_eq!(r.termination, Termination::ResidualConverged);
    assert!(r.final_residual() <= 1e-6);
    assert_eq!(r.monotonicity_violations(), 0);
    let costs: Vec<f64> = r.history.iter().map(|h| h.cost.total).collect();
    assert!(costs.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs()));
}

#[test]
fn derivative_check_on_control_independent_model() {
    let s = scenario(control_independent_scenario_config());
    let v = s.grad_direction().unwrap();
    let check =
        directional_derivative_check(&s.problem, &s.initial_control, &v, &[1e-1, 1e-2, 1e-3])
            .unwrap();
    // Only the quadratic penalty sees u, so the one-sided quotient is off by exactly ε/(2u + ε).
    for e in &check.entries {
        assert!(
            (e.mismatch - e.eps / (1.0 + e.eps)).abs() < 1e-9,
            "eps {}: {}",
            e.eps,
            e.mismatch
        );
        if e.eps <= 1e-2 {
            assert!(e.mismatch <= 0.01);
        }
    }
    let zero = ScalarField::zeros(s.grid());
    let check =
        directional_derivative_check(&s.problem, &s.initial_control, &zero, &[1e-3]).unwrap();
    assert_eq!(check.adjoint_derivative, 0.0);
    assert_eq!(check.entries[0].finite_difference, 0.0);
}

#[test]
fn cost_of_zero_fields_is_penalty_only() {
    let mut c = heat_config(128, 200);
    let ProblemConfig::Custom { ref mut cost, .. } = c.problem else {
        unreachable!()
    };
    cost.penalty = Penalty::Quadratic { alpha: 2.0 };
    let s = scenario(c);
    let u = s.problem.constant_control(0.5).unwrap();
    let rho = s.problem.forward(&u).unwrap();
    let b = evaluate_cost(&u, &s.problem.cost, &rho);
    assert_eq!(b.running, 0.0);
    assert_eq!(b.terminal, 0.0);
    // (α/2)·w²·|ω| with ω = [-1, 1] snapped to cells.
    let expected = 0.25 * s.problem.mask.measure();
    assert!((b.penalty - expected).abs() < 1e-12);
    assert!((b.total - b.penalty).abs() < 1e-15);
}

#[test]
fn constant_terminal_cost_integrates_to_its_value() {
    let mut c = heat_config(128, 200);
    let ProblemConfig::Custom { ref mut cost, .. } = c.problem else {
        unreachable!()
    };
    cost.terminal = CostFieldSpec::Constant { value: 3.0 };
    cost.running = CostFieldSpec::Constant { value: 2.0 };
    let s = scenario(c);
    let u = s.problem.constant_control(0.0).unwrap();
    let rho = s.problem.forward(&u).unwrap();
    let b = evaluate_cost(&u, &s.problem.cost, &rho);
    assert!((b.terminal - 3.0).abs() < 1e-12);
    assert!((b.running - 2.0).abs() < 1e-12);
    assert!((integrate(rho.terminal()) - 1.0).abs() < 1e-12);
}

#[test]
fn bundled_scenarios_load() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}

#[test]
fn derivative_check_on_time_dependent_model() {
    let mut c = finance_scenario_config();
    c.problem = ProblemConfig::Custom {
        model: ModelSpec::Expression {
            drift: vec!["0.05 + (0.2 + 0.3 * t) * s / (1 + s)".into()],
            sigma: "0.3 + 0.2 * (1 - t / 2) * s / (1 + s)".into(),
            drift_ds: None,
            sigma_ds: None,
        },
        gamma: None,
        cost: CostSpec {
            running: CostFieldSpec::Quadratic {
                weight: 0.5,
                target: vec![1.0],
            },
            terminal: CostFieldSpec::Quadratic {
                weight: 1.0,
                target: vec![1.0],
            },
            penalty: Penalty::Quadratic { alpha: 0.05 },
        },
    };
    let s = scenario(c);
    let v = s.grad_direction().unwrap();
    let check =
        directional_derivative_check(&s.problem, &s.initial_control, &v, &[1e-2, 1e-3]).unwrap();
    let (m2, m3) = (check.entries[0].mismatch, check.entries[1].mismatch);
    assert!(m3 <= 0.02 && m3 < m2, "mismatch {m2} then {m3}");
    let r = fb_sweep(&s.config.sweep, &s.problem, &s.initial_control).unwrap();
    assert!(r.final_cost().total <= r.initial_cost().total);
    assert_eq!(r.monotonicity_violations(), 0);
}

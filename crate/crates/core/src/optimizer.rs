//! Cost evaluation, the switching function of the optimality condition,
//! pointwise minimization over `[0, M0]`, and the forward-backward sweep.

use std::sync::Arc;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_adjoint_with_action, AdjointTrajectory};
use crate::cost::{CostFunctional, Penalty};
use crate::error::{Error, Result};
use crate::forward::{solve_forward_with_action, DensityTrajectory};
use crate::grid::{gradient, integrate, laplacian, GridSpec, ScalarField, VectorField};
use crate::model::{sample_sensitivities, CoefficientModel};
use crate::nonlocal::{ControlField, NonlocalOperator, OmegaMask};

/// Components of `J(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub total: f64,
    pub running: f64,
    pub terminal: f64,
    pub penalty: f64,
}

/// Trapezoid rule over the stored frames with step `dt`.
pub(crate) fn trapezoid(values: impl ExactSizeIterator<Item = f64>, dt: f64) -> f64 {
    let n = values.len();
    values
        .enumerate()
        .map(|(k, v)| if k == 0 || k + 1 == n { 0.5 * v } else { v })
        .sum::<f64>()
        * dt
}

/// `J = ∫∫ G ρ + ∫ G_T ρ(T) + ∫_ω h(u)`.
pub fn evaluate_cost(
    u: &ControlField,
    cost: &CostFunctional,
    rho: &DensityTrajectory,
) -> CostBreakdown {
    let g = rho.grid();
    let running = trapezoid(
        rho.frames()
            .iter()
            .enumerate()
            .map(|(n, f)| integrate(&f.mul(&cost.running_at(g.time(n))))),
        g.dt(),
    );
    let terminal = integrate(&rho.terminal().mul(cost.terminal()));
    let penalty = penalty_integral(u, cost.penalty());
    CostBreakdown {
        total: running + terminal + penalty,
        running,
        terminal,
        penalty,
    }
}

pub fn penalty_integral(u: &ControlField, penalty: &Penalty) -> f64 {
    let mask = u.mask();
    u.values()
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.contains(*i))
        .map(|(_, &w)| penalty.value(w))
        .sum::<f64>()
        * u.grid().cell_volume()
}

/// `Φ = S*(A + ½B)` with
/// `A = ∫ Σ_k ∂b_k/∂s(t, Su) ρ ∂_k p dt` and `B = ∫ ∂q/∂s(t, Su) ρ Δp dt`,
/// time integrals by the trapezoid rule over stored frames. Zero off ω.
/// Sensitivities are sampled once when the model ignores `t`.
pub fn switching_function(
    op: &NonlocalOperator,
    u: &ControlField,
    model: &CoefficientModel,
    rho: &DensityTrajectory,
    p: &AdjointTrajectory,
) -> Result<ScalarField> {
    let g = rho.grid();
    g.ensure_same(p.grid())?;
    let su = op.apply(u)?;
    let static_coeffs = model.time_independent();
    let (mut db, mut dq) = sample_sensitivities(model, &su, 0.0)?;
    let n = g.len();
    let frames = rho.frames().len();
    // with static sensitivities the time integrals are taken first, then weighted once
    let mut grad_int = vec![vec![0.0; n]; g.dim];
    let mut lap_int = vec![0.0; n];
    let mut density = vec![0.0; n];
    for k in 0..frames {
        let w = if k == 0 || k + 1 == frames {
            0.5 * g.dt()
        } else {
            g.dt()
        };
        let r = rho.at(k).values();
        let gp = gradient(p.at(k));
        let lp = laplacian(p.at(k));
        if !static_coeffs {
            (db, dq) = sample_sensitivities(model, &su, g.time(k))?;
            grad_int.iter_mut().for_each(|v| v.fill(0.0));
            lap_int.fill(0.0);
        }
        for (acc, c) in grad_int.iter_mut().zip(gp.components()) {
            for ((a, ri), ci) in acc.iter_mut().zip(r).zip(c) {
                *a += w * ri * ci;
            }
        }
        for ((a, ri), li) in lap_int.iter_mut().zip(r).zip(lp.values()) {
            *a += w * ri * li;
        }
        if !static_coeffs {
            accumulate_density(&mut density, &db, &dq, &grad_int, &lap_int);
        }
    }
    if static_coeffs {
        accumulate_density(&mut density, &db, &dq, &grad_int, &lap_int);
    }
    op.apply_adjoint(&ScalarField::from_vec_unchecked(g, density), u.mask())
}

fn accumulate_density(
    density: &mut [f64],
    db: &VectorField,
    dq: &ScalarField,
    grad: &[Vec<f64>],
    lap: &[f64],
) {
    for (i, d) in density.iter_mut().enumerate() {
        let a: f64 = grad
            .iter()
            .enumerate()
            .map(|(k, gk)| db.component(k)[i] * gk[i])
            .sum();
        *d += a + 0.5 * dq.values()[i] * lap[i];
    }
}

fn ternary_argmin(f: impl Fn(f64) -> f64, upper: f64, resolution: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, upper);
    // a quarter step leaves room for comparison against a scan lattice
    let width = 0.25 * resolution;
    while hi - lo > width {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let mut best = 0.0;
    let mut best_val = f(0.0);
    for w in [lo, 0.5 * (lo + hi), hi] {
        let v = f(w);
        if v < best_val {
            best = w;
            best_val = v;
        }
    }
    best
}

/// Per ω cell, `argmin_{w ∈ [0, M0]} h(w) + w Φ(x)`; ties go to the smaller `w`.
pub fn pointwise_argmin(
    phi: &ScalarField,
    penalty: &Penalty,
    mask: &Arc<OmegaMask>,
    m0: f64,
    resolution: f64,
) -> Result<ControlField> {
    mask.grid().ensure_same(phi.grid())?;
    if !phi.is_finite() {
        return Err(Error::contract("switching function is not finite"));
    }
    let values = phi
        .values()
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            if !mask.contains(i) {
                return 0.0;
            }
            match *penalty {
                Penalty::Quadratic { alpha } => (-f / alpha).clamp(0.0, m0),
                _ => ternary_argmin(|w| penalty.value(w) + w * f, m0, resolution),
            }
        })
        .collect();
    ControlField::from_values(mask, m0, values)
}

/// Everything needed to evaluate `J(u)` and its optimality system.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: GridSpec,
    pub operator: NonlocalOperator,
    pub mask: Arc<OmegaMask>,
    pub control_bound: f64,
    pub model: CoefficientModel,
    pub cost: CostFunctional,
    pub initial_density: ScalarField,
}

impl Problem {
    pub fn forward(&self, u: &ControlField) -> Result<DensityTrajectory> {
        let su = self.operator.apply(u)?;
        solve_forward_with_action(&su, &self.model, &self.initial_density, &self.grid)
    }

    pub fn adjoint(&self, u: &ControlField) -> Result<AdjointTrajectory> {
        let su = self.operator.apply(u)?;
        solve_adjoint_with_action(&su, &self.model, &self.cost, &self.grid)
    }

    pub fn evaluate(&self, u: &ControlField) -> Result<(CostBreakdown, DensityTrajectory)> {
        let rho = self.forward(u)?;
        Ok((evaluate_cost(u, &self.cost, &rho), rho))
    }

    pub fn switching(
        &self,
        u: &ControlField,
        rho: &DensityTrajectory,
        p: &AdjointTrajectory,
    ) -> Result<ScalarField> {
        switching_function(&self.operator, u, &self.model, rho, p)
    }

    /// `h'(u) + Φ(u)` on ω.
    pub fn gradient_density(&self, u: &ControlField, phi: &ScalarField) -> ScalarField {
        let pen = self.cost.penalty();
        let values = u
            .values()
            .iter()
            .zip(phi.values())
            .enumerate()
            .map(|(i, (&w, &f))| {
                if self.mask.contains(i) {
                    pen.derivative(w) + f
                } else {
                    0.0
                }
            })
            .collect();
        ScalarField::from_vec_unchecked(&self.grid, values)
    }

    pub fn constant_control(&self, value: f64) -> Result<ControlField> {
        ControlField::constant(&self.mask, self.control_bound, value)
    }
}

fn default_relaxation() -> f64 {
    0.5
}
fn default_max_iter() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_relaxation")]
    pub relaxation: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol_control: f64,
    #[serde(default = "default_tol")]
    pub tol_residual: f64,
    /// Argmin search resolution for non-quadratic penalties; defaults to `1e-4 · M0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argmin_resolution: Option<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            relaxation: default_relaxation(),
            max_iter: default_max_iter(),
            tol_control: default_tol(),
            tol_residual: default_tol(),
            argmin_resolution: None,
        }
    }
}

/// Halvings of the relaxation allowed per iteration when `J` increases.
pub const MAX_HALVINGS: usize = 5;

/// Relative slack below which a cost change does not count as an increase.
/// Near the fixed point the argmin step can raise `J` by ~1e-11 relative
/// because the dual is discretized separately from the forward scheme.
pub const COST_INCREASE_SLACK: f64 = 1e-9;

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::config(format!(
                "sweep: relaxation must lie in (0, 1], got {}",
                self.relaxation
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::config("sweep: max_iter must be positive"));
        }
        if !(self.tol_control > 0.0 && self.tol_residual > 0.0) {
            return Err(Error::config("sweep: tolerances must be positive"));
        }
        if let Some(r) = self.argmin_resolution {
            if !(r > 0.0) {
                return Err(Error::config("sweep: argmin resolution must be positive"));
            }
        }
        Ok(())
    }

    pub fn resolution(&self, m0: f64) -> f64 {
        self.argmin_resolution.unwrap_or(1e-4 * m0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ResidualConverged,
    ControlStalled,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: CostBreakdown,
    /// `‖u_k - argmin(Φ(u_k))‖_{L²(ω)}`
    pub residual: f64,
    /// Relaxation actually applied from this iterate (absent on the last record).
    pub step: Option<f64>,
    pub halvings: usize,
    /// The accepted step still increased `J` after all halvings.
    pub cost_increased: bool,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub initial_control: ControlField,
    pub control: ControlField,
    pub history: Vec<IterationRecord>,
    pub termination: Termination,
    /// Number of control updates performed.
    pub updates: usize,
}

impl SweepReport {
    pub fn final_record(&self) -> &IterationRecord {
        self.history
            .last()
            .expect("sweep records at least one iterate")
    }

    pub fn final_residual(&self) -> f64 {
        self.final_record().residual
    }

    pub fn final_cost(&self) -> CostBreakdown {
        self.final_record().cost
    }

    pub fn initial_cost(&self) -> CostBreakdown {
        self.history[0].cost
    }

    pub fn total_halvings(&self) -> usize {
        self.history.iter().map(|r| r.halvings).sum()
    }

    pub fn monotonicity_violations(&self) -> usize {
        self.history.iter().filter(|r| r.cost_increased).count()
    }
}

fn increased(candidate: f64, current: f64) -> bool {
    candidate > current + COST_INCREASE_SLACK * current.abs()
}

/// Relaxed fixed-point iteration `u ← (1-λ)u + λ argmin(Φ(u))` with
/// halving of `λ` whenever a step would raise `J`.
pub fn fb_sweep(config: &SweepConfig, problem: &Problem, u0: &ControlField) -> Result<SweepReport> {
    config.validate()?;
    let wrap = |iteration: usize| {
        move |e: Error| Error::Sweep {
            iteration,
            source: Box::new(e),
        }
    };
    let m0 = problem.control_bound;
    let resolution = config.resolution(m0);
    let mut u = u0.clone();
    let (mut cost, mut rho) = problem.evaluate(&u).map_err(wrap(0))?;
    let mut history = Vec::new();
    let mut last_change = f64::INFINITY;
    let mut updates = 0;
    let termination = loop {
        let k = updates;
        let p = problem.adjoint(&u).map_err(wrap(k))?;
        let phi = problem.switching(&u, &rho, &p).map_err(wrap(k))?;
        let target = pointwise_argmin(&phi, problem.cost.penalty(), &problem.mask, m0, resolution)
            .map_err(wrap(k))?;
        let residual = u.l2_distance(&target);
        debug!(
            "sweep {k}: J = {:.12e}, residual = {residual:.3e}",
            cost.total
        );
        let mut record = IterationRecord {
            iteration: k,
            cost,
            residual,
            step: None,
            halvings: 0,
            cost_increased: false,
        };
        let stop = if residual <= config.tol_residual {
            Some(Termination::ResidualConverged)
        } else if last_change <= config.tol_control {
            Some(Termination::ControlStalled)
        } else if k >= config.max_iter {
            Some(Termination::MaxIterations)
        } else {
            None
        };
        if let Some(reason) = stop {
            history.push(record);
            break reason;
        }
        let mut lambda = config.relaxation;
        let mut candidate = u.relax_toward(&target, lambda);
        let (mut c_cost, mut c_rho) = problem.evaluate(&candidate).map_err(wrap(k + 1))?;
        while increased(c_cost.total, cost.total) && record.halvings < MAX_HALVINGS {
            lambda *= 0.5;
            record.halvings += 1;
            candidate = u.relax_toward(&target, lambda);
            (c_cost, c_rho) = problem.evaluate(&candidate).map_err(wrap(k + 1))?;
        }
        record.step = Some(lambda);
        record.cost_increased = increased(c_cost.total, cost.total);
        history.push(record);
        last_change = candidate.l2_distance(&u);
        u = candidate;
        cost = c_cost;
        rho = c_rho;
        updates += 1;
    };
    info!(
        "sweep finished after {updates} updates ({termination:?}), J = {:.10e}",
        cost.total
    );
    Ok(SweepReport {
        initial_control: u0.clone(),
        control: u,
        history,
        termination,
        updates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheckEntry {
    pub eps: f64,
    pub finite_difference: f64,
    pub mismatch: f64,
    /// Observed order `log(m_prev/m)/log(eps_prev/eps)`, absent for the first entry.
    pub order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheck {
    /// `⟨h'(u) + Φ(u), v⟩_{L²(ω)}`
    pub adjoint_derivative: f64,
    pub base_cost: f64,
    pub entries: Vec<DerivativeCheckEntry>,
}

/// Compare `(J(u + εv) - J(u))/ε` with the adjoint prediction for each `ε`.
pub fn directional_derivative_check(
    problem: &Problem,
    u: &ControlField,
    direction: &ScalarField,
    eps_list: &[f64],
) -> Result<DerivativeCheck> {
    let perturbed: Vec<ControlField> = eps_list
        .iter()
        .map(|&e| u.perturbed(direction, e))
        .collect::<Result<_>>()?;
    let (base, rho) = problem.evaluate(u)?;
    let p = problem.adjoint(u)?;
    let phi = problem.switching(u, &rho, &p)?;
    let grad = problem.gradient_density(u, &phi);
    let v = problem.mask.restrict(direction);
    let predicted = crate::grid::inner(&grad, &v);
    let mut entries: Vec<DerivativeCheckEntry> = Vec::with_capacity(eps_list.len());
    for (&eps, up) in eps_list.iter().zip(&perturbed) {
        let (c, _) = problem.evaluate(up)?;
        let fd = (c.total - base.total) / eps;
        let mismatch = if predicted == 0.0 && fd == 0.0 {
            0.0
        } else {
            (fd - predicted).abs() / predicted.abs().max(fd.abs()).max(f64::MIN_POSITIVE)
        };
        let order = entries.last().and_then(|prev| {
            (prev.mismatch > 0.0 && mismatch > 0.0)
                .then(|| (prev.mismatch / mismatch).ln() / (prev.eps / eps).ln())
        });
        entries.push(DerivativeCheckEntry {
            eps,
            finite_difference: fd,
            mismatch,
            order,
        });
    }
    Ok(DerivativeCheck {
        adjoint_derivative: predicted,
        base_cost: base.total,
        entries,
    })
}

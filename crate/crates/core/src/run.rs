//! Run orchestration: subcommands, reports and artifact files.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::adjoint::AdjointTrajectory;
use crate::error::{Error, Result};
use crate::forward::DensityTrajectory;
use crate::mc::{compare_mc_pde, estimate_cost_mc, simulate_paths, McComparison, McCostEstimate};
use crate::model::{cfl_timestep, ModelBounds};
use crate::nonlocal::ControlField;
use crate::optimizer::{
    directional_derivative_check, fb_sweep, CostBreakdown, DerivativeCheck, IterationRecord,
    SweepReport, Termination,
};
use crate::scenario::{Scenario, ScenarioConfig};

/// Acceptance bound on the L1 distance between histogram and PDE density at `T`.
pub const MC_L1_TOLERANCE: f64 = 0.05;
/// Allowed cost gap is `MC_SE_MULTIPLIER · SE + MC_RELATIVE_ALLOWANCE · J`.
pub const MC_SE_MULTIPLIER: f64 = 3.0;
pub const MC_RELATIVE_ALLOWANCE: f64 = 0.02;
/// Density mass in the outer band above which a truncation warning is raised.
pub const BOUNDARY_MASS_WARNING: f64 = 1e-6;
/// Fraction of MC steps that may wrap around the domain before a warning.
pub const WRAP_FRACTION_WARNING: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Solve,
    McCompare,
    GradCheck,
    ForwardOnly,
}

impl Command {
    pub const ALL: [Command; 4] = [
        Command::Solve,
        Command::McCompare,
        Command::GradCheck,
        Command::ForwardOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::McCompare => "mc-compare",
            Command::GradCheck => "grad-check",
            Command::ForwardOnly => "forward-only",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown subcommand '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub termination: Termination,
    pub updates: usize,
    pub initial_cost: CostBreakdown,
    pub final_cost: CostBreakdown,
    pub final_residual: f64,
    pub total_halvings: usize,
    pub monotonicity_violations: usize,
    pub history: Vec<IterationRecord>,
}

impl From<&SweepReport> for SweepSummary {
    fn from(r: &SweepReport) -> Self {
        SweepSummary {
            termination: r.termination,
            updates: r.updates,
            initial_cost: r.initial_cost(),
            final_cost: r.final_cost(),
            final_residual: r.final_residual(),
            total_halvings: r.total_halvings(),
            monotonicity_violations: r.monotonicity_violations(),
            history: r.history.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardSummary {
    pub cost: CostBreakdown,
    pub mass_error: f64,
    /// Most negative density value relative to the maximum (0 if none).
    pub negativity: f64,
    pub boundary_mass: f64,
    pub substeps: usize,
    pub stable_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointComparison {
    pub time: f64,
    #[serde(flatten)]
    pub metrics: McComparison,
    pub retained_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub paths: usize,
    pub seed: u64,
    pub checkpoints: Vec<CheckpointComparison>,
    pub cost: McCostEstimate,
    /// `∫⟨ρ,G⟩dt + ⟨ρ(T),G_T⟩` from the PDE; the penalty is deterministic and left out.
    pub pde_state_cost: f64,
    pub cost_gap: f64,
    pub cost_allowance: f64,
    pub terminal_l1: f64,
    pub wrap_events: u64,
    pub wrap_fraction: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: Command,
    pub scenario: ScenarioConfig,
    pub model_bounds: ModelBounds,
    pub forward: ForwardSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_check: Option<DerivativeCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<McSummary>,
    pub warnings: Vec<String>,
    pub artifacts: Vec<String>,
    pub timings: Timings,
}

impl RunReport {
    /// False only for an `mc-compare` run outside the acceptance bounds.
    pub fn within_tolerance(&self) -> bool {
        self.monte_carlo.as_ref().is_none_or(|m| m.within_tolerance)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the Monte-Carlo seed of the scenario.
    pub seed: Option<u64>,
}

struct Stopwatch {
    start: Instant,
    last: Instant,
    stages: Vec<(String, f64)>,
}

impl Stopwatch {
    fn new() -> Self {
        let now = Instant::now();
        Stopwatch {
            start: now,
            last: now,
            stages: Vec::new(),
        }
    }

    fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.stages
            .push((name.into(), (now - self.last).as_secs_f64()));
        self.last = now;
    }

    fn finish(self) -> Timings {
        Timings {
            total: self.start.elapsed().as_secs_f64(),
            stages: self.stages,
        }
    }
}

struct Artifacts {
    dir: PathBuf,
    names: Vec<String>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            names: Vec::new(),
        })
    }

    fn create(&mut self, name: String) -> Result<BufWriter<File>> {
        let f = File::create(self.dir.join(&name))?;
        self.names.push(name);
        Ok(BufWriter::new(f))
    }

    fn field(&mut self, name: String, f: &crate::grid::ScalarField) -> Result<()> {
        let mut w = self.create(name)?;
        f.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn time_tag(t: f64) -> String {
    format!("{t:.4}")
}

fn write_sweep_csv(w: &mut impl Write, history: &[IterationRecord]) -> Result<()> {
    writeln!(
        w,
        "iteration,total,running,terminal,penalty,residual,step,halvings,cost_increased"
    )?;
    for r in history {
        let step = r.step.map(|s| format!("{s:.16e}")).unwrap_or_default();
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{}",
            r.iteration,
            r.cost.total,
            r.cost.running,
            r.cost.terminal,
            r.cost.penalty,
            r.residual,
            step,
            r.halvings,
            r.cost_increased
        )?;
    }
    Ok(())
}

fn forward_summary(
    scenario: &Scenario,
    u: &ControlField,
    rho: &DensityTrajectory,
) -> ForwardSummary {
    let p = &scenario.problem;
    ForwardSummary {
        cost: crate::optimizer::evaluate_cost(u, &p.cost, rho),
        mass_error: rho.mass_error(),
        negativity: rho.negativity(),
        boundary_mass: rho.boundary_mass(),
        substeps: rho.substeps(),
        stable_dt: cfl_timestep(&p.model, &p.grid),
    }
}

fn forward_warnings(f: &ForwardSummary, warnings: &mut Vec<String>) {
    if f.boundary_mass > BOUNDARY_MASS_WARNING {
        warnings.push(format!(
            "density reaches the domain edge: boundary-band mass {:.3e} exceeds {BOUNDARY_MASS_WARNING:e}",
            f.boundary_mass
        ));
    }
    if f.negativity > 1e-12 {
        warnings.push(format!(
            "density dipped below zero by {:.3e} relative to its maximum",
            f.negativity
        ));
    }
    if f.mass_error > 1e-9 {
        warnings.push(format!("mass drift {:.3e} exceeds 1e-9", f.mass_error));
    }
}

fn snapshots(
    scenario: &Scenario,
    rho: &DensityTrajectory,
    p: Option<&AdjointTrajectory>,
    artifacts: &mut Artifacts,
) -> Result<()> {
    let g = scenario.grid();
    for &n in &scenario.checkpoint_steps {
        let tag = time_tag(g.time(n));
        artifacts.field(format!("density_t{tag}.csv"), rho.at(n))?;
        if let Some(p) = p {
            artifacts.field(format!("adjoint_t{tag}.csv"), p.at(n))?;
        }
    }
    Ok(())
}

fn monte_carlo(
    scenario: &Scenario,
    u: &ControlField,
    rho: &DensityTrajectory,
    options: &RunOptions,
    artifacts: &mut Artifacts,
    warnings: &mut Vec<String>,
) -> Result<McSummary> {
    let p = &scenario.problem;
    let mut config = scenario
        .monte_carlo
        .clone()
        .ok_or_else(|| Error::config("mc-compare needs a monte_carlo section"))?;
    if let Some(seed) = options.seed {
        config.seed = seed;
    }
    let run = simulate_paths(
        &p.operator,
        u,
        &p.model,
        &p.initial_density,
        Some(&p.cost),
        &config,
    )?;
    warnings.extend(run.warnings());
    let g = p.grid;
    let mut checkpoints = Vec::new();
    for (k, &n) in run.density.steps.iter().enumerate() {
        let hist = &run.density.histograms[k];
        artifacts.field(format!("mc_hist_t{}.csv", time_tag(g.time(n))), hist)?;
        checkpoints.push(CheckpointComparison {
            time: g.time(n),
            metrics: compare_mc_pde(hist, rho.at(n))?,
            retained_fraction: run.density.retained_fraction[k],
        });
    }
    let cost = estimate_cost_mc(run.path_costs.as_deref().unwrap_or_default())?;
    let pde = crate::optimizer::evaluate_cost(u, &p.cost, rho);
    let pde_state_cost = pde.running + pde.terminal;
    let cost_gap = (cost.total - pde_state_cost).abs();
    let cost_allowance =
        MC_SE_MULTIPLIER * cost.total_se + MC_RELATIVE_ALLOWANCE * pde_state_cost.abs();
    let terminal_l1 = run
        .density
        .at_step(g.steps)
        .map(|h| compare_mc_pde(h, rho.terminal()).map(|m| m.l1))
        .transpose()?
        .unwrap_or(f64::NAN);
    let wrap_fraction = run.wrap_events as f64 / run.total_steps.max(1) as f64;
    if wrap_fraction > WRAP_FRACTION_WARNING {
        warnings.push(format!(
            "Monte-Carlo paths wrapped around the domain in {:.3e} of steps",
            wrap_fraction
        ));
    }
    let within_tolerance = terminal_l1 <= MC_L1_TOLERANCE && cost_gap <= cost_allowance;
    if !within_tolerance {
        warnings.push(format!(
            "Monte-Carlo cross-check outside tolerance: L1 = {terminal_l1:.4} (limit {MC_L1_TOLERANCE}), \
             |J_mc - J_pde| = {cost_gap:.4e} (allowance {cost_allowance:.4e})"
        ));
    }
    Ok(McSummary {
        paths: config.paths,
        seed: config.seed,
        checkpoints,
        cost,
        pde_state_cost,
        cost_gap,
        cost_allowance,
        terminal_l1,
        wrap_events: run.wrap_events,
        wrap_fraction,
        within_tolerance,
    })
}

/// Execute `command` on `scenario`, writing artifacts into `out_dir`.
pub fn run(
    scenario: &Scenario,
    command: Command,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<RunReport> {
    let mut clock = Stopwatch::new();
    let mut artifacts = Artifacts::new(out_dir)?;
    let mut warnings = Vec::new();
    let p = &scenario.problem;
    let mut echo = scenario.config.clone();
    if let (Some(seed), Some(mc)) = (options.seed, echo.monte_carlo.as_mut()) {
        mc.seed = seed;
    }
    info!("{command}: scenario '{}'", echo.name);

    let mut sweep = None;
    let mut grad_check = None;
    let control = match command {
        Command::Solve | Command::McCompare => {
            let report = fb_sweep(&scenario.config.sweep, p, &scenario.initial_control)?;
            clock.lap("sweep");
            if report.termination == Termination::MaxIterations {
                warnings.push(format!(
                    "sweep stopped at max_iter = {} with residual {:.3e} above tol_residual = {:.1e}",
                    scenario.config.sweep.max_iter,
                    report.final_residual(),
                    scenario.config.sweep.tol_residual
                ));
            }
            if report.monotonicity_violations() > 0 {
                warnings.push(format!(
                    "cost increased in {} sweep iteration(s) despite step halving",
                    report.monotonicity_violations()
                ));
            }
            let mut w = artifacts.create("sweep.csv".into())?;
            write_sweep_csv(&mut w, &report.history)?;
            w.flush()?;
            sweep = Some(SweepSummary::from(&report));
            report.control
        }
        Command::GradCheck => {
            let v = scenario.grad_direction()?;
            let check = directional_derivative_check(
                p,
                &scenario.initial_control,
                &v,
                &scenario.config.grad_check.eps,
            )?;
            clock.lap("grad-check");
            let mut w = artifacts.create("grad_check.csv".into())?;
            writeln!(w, "eps,finite_difference,adjoint_derivative,mismatch,order")?;
            for e in &check.entries {
                let order = e.order.map(|o| format!("{o:.6}")).unwrap_or_default();
                writeln!(
                    w,
                    "{:e},{:.16e},{:.16e},{:.6e},{order}",
                    e.eps, e.finite_difference, check.adjoint_derivative, e.mismatch
                )?;
            }
            w.flush()?;
            grad_check = Some(check);
            scenario.initial_control.clone()
        }
        Command::ForwardOnly => scenario.initial_control.clone(),
    };
    artifacts.field("control.csv".into(), &control.as_field())?;

    let rho = p.forward(&control)?;
    let adjoint = Some(p.adjoint(&control)?);
    clock.lap("final solves");
    let forward = forward_summary(scenario, &control, &rho);
    forward_warnings(&forward, &mut warnings);
    snapshots(scenario, &rho, adjoint.as_ref(), &mut artifacts)?;

    let mc = if command == Command::McCompare {
        let m = monte_carlo(
            scenario,
            &control,
            &rho,
            options,
            &mut artifacts,
            &mut warnings,
        )?;
        clock.lap("monte-carlo");
        Some(m)
    } else {
        None
    };

    for w in &warnings {
        warn!("{w}");
    }
    artifacts.names.push("report.json".into());
    let report = RunReport {
        command,
        scenario: echo,
        model_bounds: *p.model.bounds(),
        forward,
        sweep,
        grad_check,
        monte_carlo: mc,
        warnings,
        artifacts: artifacts.names.clone(),
        timings: clock.finish(),
    };
    let mut w = BufWriter::new(File::create(out_dir.join("report.json"))?);
    serde_json::to_writer_pretty(&mut w, &report)?;
    writeln!(w)?;
    w.flush()?;
    Ok(report)
}

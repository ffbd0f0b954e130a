//! Scenario files: strict JSON configuration, presets and validation.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::{CostFieldSpec, CostFunctional, CostSpec, Penalty};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::forward::{make_initial_density, DensitySpec};
use crate::grid::{GridSpec, ScalarField};
use crate::mc::McConfig;
use crate::model::{CoefficientModel, ModelSpec};
use crate::nonlocal::{ControlField, KernelSpec, NonlocalOperator, OmegaMask};
use crate::optimizer::{Problem, SweepConfig};

/// Parameters of the wealth-tracking preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinanceParams {
    /// Base return rate `r`.
    pub r: f64,
    /// Extra return at saturation, `μ₁`.
    pub mu1: f64,
    /// Base volatility `σ₀`.
    pub sigma0: f64,
    /// Extra volatility at saturation, `σ₁`.
    pub sigma1: f64,
    pub x_target: f64,
    /// Weight `λ_run` of the running tracking cost.
    pub lambda_run: f64,
    pub alpha: f64,
}

impl FinanceParams {
    fn validate(&self) -> Result<()> {
        let positive = [("r", self.r), ("mu1", self.mu1), ("alpha", self.alpha)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "finance preset: {name} must be positive, got {v}"
                )));
            }
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::config(format!(
                "H2: finance preset needs sigma0 > 0 for uniform ellipticity, got {}",
                self.sigma0
            )));
        }
        for (name, v) in [("sigma1", self.sigma1), ("lambda_run", self.lambda_run)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "finance preset: {name} must be nonnegative, got {v}"
                )));
            }
        }
        if !self.x_target.is_finite() {
            return Err(Error::config("finance preset: x_target must be finite"));
        }
        Ok(())
    }

    /// `b = r + μ₁ s/(1+s)`, `σ̃ = σ₀ + σ₁ s/(1+s)`, declared `γ = σ₀²`.
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::Saturating {
            drift_base: vec![self.r],
            drift_gain: vec![self.mu1],
            sigma_base: self.sigma0,
            sigma_gain: self.sigma1,
        }
    }

    /// `G = λ_run (x - x_target)²`, `G_T = (x - x_target)²`, `h = (α/2) w²`.
    pub fn cost_spec(&self) -> CostSpec {
        CostSpec {
            running: CostFieldSpec::Quadratic {
                weight: self.lambda_run,
                target: vec![self.x_target],
            },
            terminal: CostFieldSpec::Quadratic {
                weight: 1.0,
                target: vec![self.x_target],
            },
            penalty: Penalty::Quadratic { alpha: self.alpha },
        }
    }
}

/// Build the wealth-tracking model and cost on a one-dimensional grid.
pub fn finance_preset(
    params: &FinanceParams,
    grid: &GridSpec,
    action_max: f64,
) -> Result<(CoefficientModel, CostSpec)> {
    params.validate()?;
    if grid.dim != 1 {
        return Err(Error::config("finance preset is one-dimensional"));
    }
    let model = CoefficientModel::new(
        params.model_spec(),
        grid,
        action_max,
        Some(params.sigma0 * params.sigma0),
    )?;
    Ok((model, params.cost_spec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Finance(FinanceParams),
    Custom {
        model: ModelSpec,
        /// Declared ellipticity constant; the lattice minimum of `q` otherwise.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
        cost: CostSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OmegaBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// A function on ω given by a constant or an expression in `x`, `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldInit {
    Constant { value: f64 },
    Expression { expr: String },
}

impl FieldInit {
    fn tabulate(&self, grid: &GridSpec, what: &str) -> Result<ScalarField> {
        match self {
            FieldInit::Constant { value } => Ok(ScalarField::constant(grid, *value)),
            FieldInit::Expression { expr } => {
                let e = Expr::parse(expr)?;
                if e.uses_time() || e.uses_action() {
                    return Err(Error::config(format!(
                        "{what}: expression may only use x and y"
                    )));
                }
                ScalarField::from_fn(grid, |x| e.eval(0.0, x, 0.0)).map_err(|_| {
                    Error::config(format!("{what}: expression is not finite on the grid"))
                })
            }
        }
    }
}

fn default_eps() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3, 1e-4]
}

fn unit_direction() -> FieldInit {
    FieldInit::Constant { value: 1.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default = "unit_direction")]
    pub direction: FieldInit,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: default_eps(),
            direction: unit_direction(),
        }
    }
}

fn default_name() -> String {
    "scenario".into()
}

/// Scenario file contents. Serializing a resolved config gives a loadable echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub grid: GridSpec,
    pub kernel: KernelSpec,
    pub omega: OmegaBox,
    /// Upper bound `M0` of the admissible control values.
    pub control_bound: f64,
    pub problem: ProblemConfig,
    pub initial_density: DensitySpec,
    /// Defaults to the constant `M0/2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_control: Option<FieldInit>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<McConfig>,
    #[serde(default)]
    pub grad_check: GradCheckConfig,
    /// Times at which density and adjoint snapshots are written; defaults to `0, T/2, T`.
    #[serde(default)]
    pub checkpoints: Vec<f64>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fill every defaulted field with its effective value.
    pub fn resolved(&self) -> ScenarioConfig {
        let mut c = self.clone();
        let g = c.grid;
        if c.checkpoints.is_empty() {
            c.checkpoints = vec![0.0, 0.5 * g.horizon, g.horizon];
        }
        c.initial_control.get_or_insert(FieldInit::Constant {
            value: 0.5 * c.control_bound,
        });
        if c.sweep.argmin_resolution.is_none() {
            c.sweep.argmin_resolution = Some(c.sweep.resolution(c.control_bound));
        }
        if let Some(mc) = c.monte_carlo.as_mut() {
            mc.dt.get_or_insert(g.dt());
            mc.bins.get_or_insert(g.cells);
            if mc.checkpoints.is_empty() {
                mc.checkpoints = vec![g.horizon];
            }
        }
        c
    }
}

/// A validated scenario, ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub problem: Problem,
    pub initial_control: ControlField,
    pub monte_carlo: Option<McConfig>,
    /// Stored step indices of the snapshot checkpoints.
    pub checkpoint_steps: Vec<usize>,
}

impl Scenario {
    pub fn from_config(config: ScenarioConfig) -> Result<Self> {
        let config = config.resolved();
        let grid = config.grid;
        grid.validate()?;
        let m0 = config.control_bound;
        if !(m0 > 0.0 && m0.is_finite()) {
            return Err(Error::config(format!(
                "control_bound M0 = {m0} is invalid: the admissible set [0, M0] needs M0 > 0"
            )));
        }
        config.sweep.validate()?;
        if let Some(mc) = &config.monte_carlo {
            mc.validate(&grid)?;
        }
        for &t in &config.checkpoints {
            if !(0.0..=grid.horizon).contains(&t) {
                return Err(Error::config(format!("checkpoint {t} outside [0, T]")));
            }
        }
        if config.grad_check.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::config("grad_check: eps values must be positive"));
        }
        if config.omega.lower.len() != grid.dim || config.omega.upper.len() != grid.dim {
            return Err(Error::config(format!(
                "omega: bounds need {} components",
                grid.dim
            )));
        }
        let mask = Arc::new(OmegaMask::from_box(
            &grid,
            &config.omega.lower,
            &config.omega.upper,
        )?);
        let operator = NonlocalOperator::from_spec(&grid, &config.kernel)?;
        let action_max = operator.action_bound(&mask, m0);
        let (model, cost_spec) = match &config.problem {
            ProblemConfig::Finance(p) => finance_preset(p, &grid, action_max)?,
            ProblemConfig::Custom { model, gamma, cost } => (
                CoefficientModel::new(model.clone(), &grid, action_max, *gamma)?,
                cost.clone(),
            ),
        };
        let cost = CostFunctional::new(cost_spec, &grid, m0)?;
        let initial_density = make_initial_density(&grid, &config.initial_density)?;
        let u0 = config
            .initial_control
            .as_ref()
            .expect("resolved config has an initial control")
            .tabulate(&grid, "initial_control")?;
        let initial_control =
            ControlField::from_values(&mask, m0, mask.restrict(&u0).into_values())
                .map_err(|e| Error::config(format!("initial_control: {e}")))?;
        let mut steps: Vec<usize> = config
            .checkpoints
            .iter()
            .map(|&t| grid.nearest_step(t))
            .collect();
        steps.sort_unstable();
        steps.dedup();
        Ok(Scenario {
            monte_carlo: config.monte_carlo.clone(),
            problem: Problem {
                grid,
                operator,
                mask,
                control_bound: m0,
                model,
                cost,
                initial_density,
            },
            initial_control,
            checkpoint_steps: steps,
            config,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.problem.grid
    }

    /// Perturbation direction for the derivative check, restricted to ω.
    pub fn grad_direction(&self) -> Result<ScalarField> {
        let f = self
            .config
            .grad_check
            .direction
            .tabulate(self.grid(), "grad_check.direction")?;
        Ok(self.problem.mask.restrict(&f))
    }
}

pub fn load_config(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    Scenario::from_config(ScenarioConfig::from_json(&text)?)
}

/// The shipped wealth-tracking scenario.
pub fn finance_scenario_config() -> ScenarioConfig {
    ScenarioConfig {
        name: "finance".into(),
        grid: GridSpec {
            dim: 1,
            half_width: 4.0,
            cells: 256,
            horizon: 1.0,
            steps: 400,
        },
        kernel: KernelSpec::Gaussian {
            sigma: 0.2,
            amplitude: 1.0,
            normalize: true,
            exponent: 2.0,
        },
        omega: OmegaBox {
            lower: vec![-1.0],
            upper: vec![1.0],
        },
        control_bound: 1.0,
        problem: ProblemConfig::Finance(FinanceParams {
            r: 0.05,
            mu1: 0.3,
            sigma0: 0.3,
            sigma1: 0.2,
            x_target: 1.0,
            lambda_run: 0.5,
            alpha: 0.05,
        }),
        initial_density: DensitySpec::Gaussian {
            mean: vec![0.0],
            variance: 0.04,
        },
        initial_control: None,
        sweep: SweepConfig {
            tol_control: 1e-10,
            tol_residual: 1e-6,
            max_iter: 200,
            ..SweepConfig::default()
        },
        monte_carlo: Some(McConfig::new(100_000, 20240601)),
        grad_check: GradCheckConfig::default(),
        checkpoints: Vec::new(),
    }
}

/// A scenario whose coefficients ignore the control, so `u* ≡ 0`.
pub fn control_independent_scenario_config() -> ScenarioConfig {
    ScenarioConfig {
        name: "control-independent".into(),
        grid: GridSpec {
            dim: 1,
            half_width: 4.0,
            cells: 256,
            horizon: 1.0,
            steps: 400,
        },
        kernel: KernelSpec::Gaussian {
            sigma: 0.2,
            amplitude: 1.0,
            normalize: true,
            exponent: 2.0,
        },
        omega: OmegaBox {
            lower: vec![-1.0],
            upper: vec![1.0],
        },
        control_bound: 1.0,
        problem: ProblemConfig::Custom {
            model: ModelSpec::Constant {
                drift: vec![0.1],
                sigma: 0.3,
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
                penalty: Penalty::Quadratic { alpha: 0.1 },
            },
        },
        initial_density: DensitySpec::Gaussian {
            mean: vec![0.0],
            variance: 0.04,
        },
        initial_control: None,
        sweep: SweepConfig {
            relaxation: 1.0,
            ..SweepConfig::default()
        },
        monte_carlo: None,
        grad_check: GradCheckConfig::default(),
        checkpoints: Vec::new(),
    }
}

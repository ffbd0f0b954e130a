//! Optimal control of Fokker-Planck equations whose drift and diffusion
//! depend on a nonlocal action `Su = K * u` of the control.
//!
//! The state is a probability density evolved by a conservative finite-volume
//! scheme on a periodic box; gradients come from the dual (backward) equation
//! and controls are improved by a relaxed pointwise minimization sweep.
//! An Euler–Maruyama simulation of the underlying SDE cross-checks the PDE.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod cost;
pub mod error;
mod expr;
mod fft;
pub mod forward;
pub mod grid;
pub mod mc;
pub mod model;
pub mod nonlocal;
pub mod optimizer;
pub mod run;
pub mod scenario;

pub use adjoint::{solve_adjoint, solve_adjoint_with_action, AdjointTrajectory};
pub use cost::{CostFieldSpec, CostFunctional, CostSpec, Penalty};
pub use error::{Error, Result};
pub use forward::{
    make_initial_density, solve_forward, solve_forward_with_action, DensitySpec, DensityTrajectory,
};
pub use grid::{GridSpec, ScalarField, VectorField};
pub use mc::{compare_mc_pde, empirical_density, estimate_cost_mc, simulate_paths, McConfig};
pub use model::{CoefficientModel, ModelSpec};
pub use nonlocal::{ControlField, Kernel, KernelSpec, NonlocalOperator, OmegaMask};
pub use optimizer::{
    directional_derivative_check, evaluate_cost, fb_sweep, pointwise_argmin, switching_function,
    CostBreakdown, Problem, SweepConfig, SweepReport, Termination,
};
pub use run::{run, Command, RunOptions, RunReport};
pub use scenario::{finance_preset, load_config, FinanceParams, Scenario, ScenarioConfig};

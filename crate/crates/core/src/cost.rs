//! Running cost `G(t,x)`, terminal cost `G_T(x)` and control penalty `h`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{GridSpec, ScalarField};

/// A nonnegative cost density on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostFieldSpec {
    Zero,
    Constant {
        value: f64,
    },
    /// `weight · |x - target|²`
    Quadratic {
        weight: f64,
        target: Vec<f64>,
    },
    /// Expression in `t`, `x`, `y`.
    Expression {
        expr: String,
    },
}

/// Convex penalty `h` on `[0, M0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Penalty {
    /// `(α/2) w²`
    Quadratic { alpha: f64 },
    /// `(α/2) w² + β w`, `β ≥ 0`
    QuadraticLinear { alpha: f64, beta: f64 },
    /// `(α/2) w² + c w⁴`, `c ≥ 0`
    Quartic { alpha: f64, c: f64 },
    /// `(α/2) w² + c (eʷ - 1 - w)`, `c ≥ 0`
    Exponential { alpha: f64, c: f64 },
}

impl Penalty {
    pub fn alpha(&self) -> f64 {
        match *self {
            Penalty::Quadratic { alpha }
            | Penalty::QuadraticLinear { alpha, .. }
            | Penalty::Quartic { alpha, .. }
            | Penalty::Exponential { alpha, .. } => alpha,
        }
    }

    pub fn value(&self, w: f64) -> f64 {
        let quad = 0.5 * self.alpha() * w * w;
        match *self {
            Penalty::Quadratic { .. } => quad,
            Penalty::QuadraticLinear { beta, .. } => quad + beta * w,
            Penalty::Quartic { c, .. } => quad + c * w.powi(4),
            Penalty::Exponential { c, .. } => quad + c * (w.exp_m1() - w),
        }
    }

    /// `h'(w)`.
    pub fn derivative(&self, w: f64) -> f64 {
        let lin = self.alpha() * w;
        match *self {
            Penalty::Quadratic { .. } => lin,
            Penalty::QuadraticLinear { beta, .. } => lin + beta,
            Penalty::Quartic { c, .. } => lin + 4.0 * c * w.powi(3),
            Penalty::Exponential { c, .. } => lin + c * w.exp_m1(),
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, Penalty::Quadratic { .. })
    }

    /// Check `h(0) ≥ 0`, midpoint convexity and `h(s) ≥ (α/2)s²` on a lattice of `[0, M0]`.
    pub fn validate(&self, m0: f64) -> Result<()> {
        let alpha = self.alpha();
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!(
                "H4: penalty coercivity constant α must be positive, got {alpha}"
            )));
        }
        let extra = match *self {
            Penalty::Quadratic { .. } => 0.0,
            Penalty::QuadraticLinear { beta, .. } => beta,
            Penalty::Quartic { c, .. } | Penalty::Exponential { c, .. } => c,
        };
        if !(extra >= 0.0 && extra.is_finite()) {
            return Err(Error::config(
                "H4: penalty shape coefficient must be nonnegative",
            ));
        }
        if self.value(0.0) < 0.0 {
            return Err(Error::config("H4: h(0) must be nonnegative"));
        }
        const N: usize = 32;
        let pts: Vec<f64> = (0..=N).map(|k| m0 * k as f64 / N as f64).collect();
        for &s in &pts {
            let h = self.value(s);
            if !h.is_finite() || h < 0.5 * alpha * s * s * (1.0 - 1e-12) {
                return Err(Error::config(format!(
                    "H4: h({s}) = {h} violates h(s) >= (α/2)s²"
                )));
            }
        }
        for &a in &pts {
            for &b in &pts {
                let mid = self.value(0.5 * (a + b));
                let chord = 0.5 * (self.value(a) + self.value(b));
                if mid > chord + 1e-12 * chord.abs().max(1.0) {
                    return Err(Error::config(format!(
                        "H4: h is not convex between {a} and {b}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub running: CostFieldSpec,
    pub terminal: CostFieldSpec,
    pub penalty: Penalty,
}

#[derive(Debug, Clone)]
enum RunningCost {
    Static(ScalarField),
    Dynamic(Expr),
}

/// Compiled and validated cost functional on a fixed grid.
#[derive(Debug, Clone)]
pub struct CostFunctional {
    spec: CostSpec,
    running: RunningCost,
    terminal: ScalarField,
    penalty: Penalty,
}

fn tabulate(grid: &GridSpec, spec: &CostFieldSpec, what: &str) -> Result<Option<ScalarField>> {
    let field = match spec {
        CostFieldSpec::Zero => ScalarField::zeros(grid),
        CostFieldSpec::Constant { value } => ScalarField::constant(grid, *value),
        CostFieldSpec::Quadratic { weight, target } => {
            if target.len() != grid.dim {
                return Err(Error::config(format!(
                    "{what}: target needs {} components",
                    grid.dim
                )));
            }
            if !(*weight >= 0.0) {
                return Err(Error::config(format!(
                    "H4: {what} weight must be nonnegative"
                )));
            }
            ScalarField::from_fn(grid, |x| {
                weight
                    * target
                        .iter()
                        .enumerate()
                        .map(|(k, c)| (x[k] - c).powi(2))
                        .sum::<f64>()
            })?
        }
        CostFieldSpec::Expression { expr } => {
            let e = Expr::parse(expr)?;
            if e.uses_time() {
                return Ok(None);
            }
            ScalarField::from_fn(grid, |x| e.eval(0.0, x, 0.0)).map_err(|_| {
                Error::config(format!("{what}: expression is not finite on the grid"))
            })?
        }
    };
    Ok(Some(field))
}

fn check_nonnegative(f: &ScalarField, what: &str, t: Option<f64>) -> Result<()> {
    if let Some(i) = f.values().iter().position(|v| !(*v >= 0.0)) {
        let when = t.map(|t| format!(" at t={t}")).unwrap_or_default();
        return Err(Error::config(format!(
            "H4: {what} must be nonnegative, found {} at x={:?}{when}",
            f.values()[i],
            &f.grid().center(i)[..f.grid().dim]
        )));
    }
    Ok(())
}

impl CostFunctional {
    pub fn new(spec: CostSpec, grid: &GridSpec, m0: f64) -> Result<Self> {
        spec.penalty.validate(m0)?;
        let running = match tabulate(grid, &spec.running, "running cost")? {
            Some(f) => {
                check_nonnegative(&f, "running cost G", None)?;
                RunningCost::Static(f)
            }
            None => {
                let CostFieldSpec::Expression { expr } = &spec.running else {
                    unreachable!("only expressions can be time dependent")
                };
                let e = Expr::parse(expr)?;
                for k in 0..=8 {
                    let t = grid.horizon * k as f64 / 8.0;
                    let f = ScalarField::from_fn(grid, |x| e.eval(t, x, 0.0)).map_err(|_| {
                        Error::config("running cost: expression is not finite on the grid")
                    })?;
                    check_nonnegative(&f, "running cost G", Some(t))?;
                }
                RunningCost::Dynamic(e)
            }
        };
        let terminal = match tabulate(grid, &spec.terminal, "terminal cost")? {
            Some(f) => f,
            None => return Err(Error::config("terminal cost must not depend on t")),
        };
        check_nonnegative(&terminal, "terminal cost G_T", None)?;
        let penalty = spec.penalty;
        Ok(CostFunctional {
            spec,
            running,
            terminal,
            penalty,
        })
    }

    pub fn spec(&self) -> &CostSpec {
        &self.spec
    }

    pub fn penalty(&self) -> &Penalty {
        &self.penalty
    }

    pub fn terminal(&self) -> &ScalarField {
        &self.terminal
    }

    pub fn running_is_static(&self) -> bool {
        matches!(self.running, RunningCost::Static(_))
    }

    /// `G(t, ·)` on the grid.
    pub fn running_at(&self, t: f64) -> ScalarField {
        match &self.running {
            RunningCost::Static(f) => f.clone(),
            RunningCost::Dynamic(e) => {
                let g = *self.terminal.grid();
                let values = (0..g.len()).map(|i| e.eval(t, g.center(i), 0.0)).collect();
                ScalarField::from_vec_unchecked(&g, values)
            }
        }
    }

    /// `G(t, x)` off the grid; tabulated costs are interpolated linearly.
    pub fn running_point(&self, t: f64, x: [f64; 2]) -> f64 {
        match &self.running {
            RunningCost::Static(f) => crate::mc::interpolate(f, x),
            RunningCost::Dynamic(e) => e.eval(t, x, 0.0),
        }
    }
}

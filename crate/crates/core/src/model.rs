//! Drift/diffusion coefficient models `b(t,x,s)`, `σ̃(t,x,s)` with `q = σ̃²`,
//! their `s`-derivatives, and the lattice validation of the standing
//! hypotheses (bounded drift, uniform ellipticity).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{GridSpec, ScalarField, VectorField};

/// Declarative coefficient model, as it appears in a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `b ≡ drift`, `σ̃ ≡ sigma`; independent of the control.
    Constant { drift: Vec<f64>, sigma: f64 },
    /// `b = drift_base + drift_gain·s/(1+s)`, `σ̃ = sigma_base + sigma_gain·s/(1+s)`.
    Saturating {
        drift_base: Vec<f64>,
        drift_gain: Vec<f64>,
        sigma_base: f64,
        sigma_gain: f64,
    },
    /// User expressions in `t`, `x`, `y`, `s`. Missing `s`-derivatives are
    /// taken by central differences.
    Expression {
        drift: Vec<String>,
        sigma: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        drift_ds: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma_ds: Option<String>,
    },
}

#[derive(Debug, Clone)]
enum Evaluator {
    Constant {
        drift: [f64; 2],
        sigma: f64,
    },
    Saturating {
        base: [f64; 2],
        gain: [f64; 2],
        sigma_base: f64,
        sigma_gain: f64,
    },
    Expression {
        drift: Vec<Expr>,
        sigma: Expr,
        drift_ds: Option<Vec<Expr>>,
        sigma_ds: Option<Expr>,
        time_dependent: bool,
    },
}

/// Summary of a lattice scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelBounds {
    /// Ellipticity constant `γ` (declared, or lattice minimum of `q`).
    pub gamma: f64,
    /// `max |b_k|` over the lattice.
    pub drift_max: f64,
    /// `max q` over the lattice.
    pub diffusion_max: f64,
    /// Largest `s` the lattice covered.
    pub action_max: f64,
}

/// Validated coefficient model.
#[derive(Debug, Clone)]
pub struct CoefficientModel {
    spec: ModelSpec,
    dim: usize,
    eval: Evaluator,
    bounds: ModelBounds,
}

fn saturation(s: f64) -> f64 {
    s / (1.0 + s)
}

fn saturation_ds(s: f64) -> f64 {
    1.0 / ((1.0 + s) * (1.0 + s))
}

fn to_pair(v: &[f64], dim: usize, what: &str) -> Result<[f64; 2]> {
    if v.len() != dim {
        return Err(Error::config(format!(
            "model: {what} needs {dim} components, got {}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::config(format!("model: {what} must be finite")));
    }
    let mut out = [0.0; 2];
    out[..dim].copy_from_slice(v);
    Ok(out)
}

impl CoefficientModel {
    /// Compile `spec` and scan it on a lattice covering the grid cells,
    /// `s ∈ [0, action_max]` and (for time-dependent models) `t ∈ [0, T]`.
    /// `gamma`, when given, is the declared ellipticity constant to check.
    pub fn new(
        spec: ModelSpec,
        grid: &GridSpec,
        action_max: f64,
        gamma: Option<f64>,
    ) -> Result<Self> {
        let dim = grid.dim;
        let eval = match &spec {
            ModelSpec::Constant { drift, sigma } => Evaluator::Constant {
                drift: to_pair(drift, dim, "drift")?,
                sigma: *sigma,
            },
            ModelSpec::Saturating {
                drift_base,
                drift_gain,
                sigma_base,
                sigma_gain,
            } => Evaluator::Saturating {
                base: to_pair(drift_base, dim, "drift_base")?,
                gain: to_pair(drift_gain, dim, "drift_gain")?,
                sigma_base: *sigma_base,
                sigma_gain: *sigma_gain,
            },
            ModelSpec::Expression {
                drift,
                sigma,
                drift_ds,
                sigma_ds,
            } => {
                if drift.len() != dim {
                    return Err(Error::config(format!(
                        "model: drift needs {dim} expressions"
                    )));
                }
                let drift: Vec<Expr> = drift
                    .iter()
                    .map(|e| Expr::parse(e))
                    .collect::<Result<_>>()?;
                let sigma = Expr::parse(sigma)?;
                let drift_ds = match drift_ds {
                    Some(v) if v.len() != dim => {
                        return Err(Error::config(format!(
                            "model: drift_ds needs {dim} expressions"
                        )))
                    }
                    Some(v) => Some(
                        v.iter()
                            .map(|e| Expr::parse(e))
                            .collect::<Result<Vec<_>>>()?,
                    ),
                    None => None,
                };
                let sigma_ds = sigma_ds.as_deref().map(Expr::parse).transpose()?;
                let time_dependent = drift.iter().any(Expr::uses_time)
                    || sigma.uses_time()
                    || drift_ds.iter().flatten().any(Expr::uses_time)
                    || sigma_ds.as_ref().is_some_and(Expr::uses_time);
                Evaluator::Expression {
                    drift,
                    sigma,
                    drift_ds,
                    sigma_ds,
                    time_dependent,
                }
            }
        };
        let mut model = CoefficientModel {
            spec,
            dim,
            eval,
            bounds: ModelBounds {
                gamma: 0.0,
                drift_max: 0.0,
                diffusion_max: 0.0,
                action_max,
            },
        };
        model.bounds = model.scan(grid, action_max, gamma)?;
        Ok(model)
    }

    fn scan(
        &self,
        grid: &GridSpec,
        action_max: f64,
        declared_gamma: Option<f64>,
    ) -> Result<ModelBounds> {
        if !(action_max >= 0.0 && action_max.is_finite()) {
            return Err(Error::config(
                "model: action range must be finite and nonnegative",
            ));
        }
        let times: Vec<f64> = if self.time_independent() {
            vec![0.0]
        } else {
            (0..=8).map(|k| grid.horizon * k as f64 / 8.0).collect()
        };
        let actions: Vec<f64> = (0..=16).map(|k| action_max * k as f64 / 16.0).collect();
        let stride = if grid.dim == 2 {
            (grid.cells / 64).max(1)
        } else {
            1
        };
        let mut q_min = f64::INFINITY;
        let mut drift_max: f64 = 0.0;
        let mut diffusion_max: f64 = 0.0;
        for idx in 0..grid.len() {
            let a = grid.axes(idx);
            if !a[0].is_multiple_of(stride) || !a[1].is_multiple_of(stride) {
                continue;
            }
            let x = grid.center(idx);
            for &t in &times {
                for &s in &actions {
                    let b = self.drift(t, x, s);
                    let q = self.diffusion(t, x, s);
                    let db = self.drift_ds(t, x, s);
                    let dq = self.diffusion_ds(t, x, s);
                    let finite = b[..self.dim]
                        .iter()
                        .chain(&db[..self.dim])
                        .all(|v| v.is_finite())
                        && q.is_finite()
                        && dq.is_finite();
                    if !finite {
                        return Err(Error::config(format!(
                            "H1: coefficient model is not finite at t={t}, x={:?}, s={s}",
                            &x[..self.dim]
                        )));
                    }
                    if let Some(gamma) = declared_gamma {
                        if q < gamma {
                            return Err(Error::config(format!(
                                "H2: q < γ at sample t={t}, x={:?}, s={s} (q={q}, γ={gamma})",
                                &x[..self.dim]
                            )));
                        }
                    }
                    q_min = q_min.min(q);
                    diffusion_max = diffusion_max.max(q);
                    drift_max =
                        drift_max.max(b[..self.dim].iter().fold(0.0, |m, v| m.max(v.abs())));
                }
            }
        }
        let gamma = declared_gamma.unwrap_or(q_min);
        if !(gamma > 0.0) {
            return Err(Error::config(format!(
                "H2: diffusion is not uniformly elliptic on the sampling lattice (min q = {q_min})"
            )));
        }
        Ok(ModelBounds {
            gamma,
            drift_max,
            diffusion_max,
            action_max,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bounds(&self) -> &ModelBounds {
        &self.bounds
    }

    pub fn gamma(&self) -> f64 {
        self.bounds.gamma
    }

    pub fn time_independent(&self) -> bool {
        match &self.eval {
            Evaluator::Expression { time_dependent, .. } => !time_dependent,
            _ => true,
        }
    }

    /// True when neither `b` nor `q` reacts to the control.
    pub fn action_independent(&self) -> bool {
        match &self.eval {
            Evaluator::Constant { .. } => true,
            Evaluator::Saturating {
                gain, sigma_gain, ..
            } => gain.iter().all(|&g| g == 0.0) && *sigma_gain == 0.0,
            Evaluator::Expression {
                drift,
                sigma,
                drift_ds,
                sigma_ds,
                ..
            } => {
                !drift.iter().any(Expr::uses_action)
                    && !sigma.uses_action()
                    && drift_ds
                        .as_ref()
                        .is_none_or(|v| !v.iter().any(Expr::uses_action))
                    && sigma_ds.as_ref().is_none_or(|e| !e.uses_action())
            }
        }
    }

    pub fn drift(&self, t: f64, x: [f64; 2], s: f64) -> [f64; 2] {
        match &self.eval {
            Evaluator::Constant { drift, .. } => *drift,
            Evaluator::Saturating { base, gain, .. } => {
                let r = saturation(s);
                [base[0] + gain[0] * r, base[1] + gain[1] * r]
            }
            Evaluator::Expression { drift, .. } => {
                let mut out = [0.0; 2];
                for (k, e) in drift.iter().enumerate() {
                    out[k] = e.eval(t, x, s);
                }
                out
            }
        }
    }

    /// Isotropic volatility `σ̃`.
    pub fn sigma(&self, t: f64, x: [f64; 2], s: f64) -> f64 {
        match &self.eval {
            Evaluator::Constant { sigma, .. } => *sigma,
            Evaluator::Saturating {
                sigma_base,
                sigma_gain,
                ..
            } => sigma_base + sigma_gain * saturation(s),
            Evaluator::Expression { sigma, .. } => sigma.eval(t, x, s),
        }
    }

    /// `q = σ̃²`.
    pub fn diffusion(&self, t: f64, x: [f64; 2], s: f64) -> f64 {
        let sig = self.sigma(t, x, s);
        sig * sig
    }

    /// `∂b/∂s`.
    pub fn drift_ds(&self, t: f64, x: [f64; 2], s: f64) -> [f64; 2] {
        match &self.eval {
            Evaluator::Constant { .. } => [0.0; 2],
            Evaluator::Saturating { gain, .. } => {
                let r = saturation_ds(s);
                [gain[0] * r, gain[1] * r]
            }
            Evaluator::Expression {
                drift, drift_ds, ..
            } => {
                let mut out = [0.0; 2];
                match drift_ds {
                    Some(d) => {
                        for (k, e) in d.iter().enumerate() {
                            out[k] = e.eval(t, x, s);
                        }
                    }
                    None => {
                        for (k, e) in drift.iter().enumerate() {
                            out[k] = central_ds(|s| e.eval(t, x, s), s);
                        }
                    }
                }
                out
            }
        }
    }

    /// `∂q/∂s = 2 σ̃ ∂σ̃/∂s`.
    pub fn diffusion_ds(&self, t: f64, x: [f64; 2], s: f64) -> f64 {
        let sig = self.sigma(t, x, s);
        let dsig = match &self.eval {
            Evaluator::Constant { .. } => 0.0,
            Evaluator::Saturating { sigma_gain, .. } => sigma_gain * saturation_ds(s),
            Evaluator::Expression {
                sigma, sigma_ds, ..
            } => match sigma_ds {
                Some(e) => e.eval(t, x, s),
                None => central_ds(|s| sigma.eval(t, x, s), s),
            },
        };
        2.0 * sig * dsig
    }
}

/// Central difference in `s`, one-sided at `s = 0` is avoided by evaluating
/// the expression at slightly negative `s` (expressions are smooth in `s`).
fn central_ds(f: impl Fn(f64) -> f64, s: f64) -> f64 {
    let h = 1e-6 * (1.0 + s.abs());
    (f(s + h) - f(s - h)) / (2.0 * h)
}

/// Cell-wise `b(t, x, Su(x))` and `q(t, x, Su(x))`.
pub fn sample_coefficients(
    model: &CoefficientModel,
    su: &ScalarField,
    t: f64,
) -> Result<(VectorField, ScalarField)> {
    let g = su.grid();
    if g.dim != model.dim {
        return Err(Error::GridMismatch(
            "model dimension differs from grid".into(),
        ));
    }
    let mut comps = vec![vec![0.0; g.len()]; g.dim];
    let mut q = vec![0.0; g.len()];
    for (i, &s) in su.values().iter().enumerate() {
        let x = g.center(i);
        let b = model.drift(t, x, s);
        for k in 0..g.dim {
            comps[k][i] = b[k];
        }
        q[i] = model.diffusion(t, x, s);
    }
    if comps.iter().flatten().chain(&q).any(|v| !v.is_finite()) {
        return Err(Error::Model(format!(
            "coefficient evaluation produced NaN/inf at t={t}"
        )));
    }
    let q = ScalarField::from_vec_unchecked(g, q);
    // q ≥ γ is checked on the validation lattice; sampled s may exceed it only through round-off
    Ok((VectorField::from_components_unchecked(g, comps), q))
}

/// Cell-wise `∂b/∂s` and `∂q/∂s` at `s = Su(x)` and time `t`.
pub fn sample_sensitivities(
    model: &CoefficientModel,
    su: &ScalarField,
    t: f64,
) -> Result<(VectorField, ScalarField)> {
    let g = su.grid();
    let mut comps = vec![vec![0.0; g.len()]; g.dim];
    let mut dq = vec![0.0; g.len()];
    for (i, &s) in su.values().iter().enumerate() {
        let x = g.center(i);
        let db = model.drift_ds(t, x, s);
        for k in 0..g.dim {
            comps[k][i] = db[k];
        }
        dq[i] = model.diffusion_ds(t, x, s);
    }
    if comps.iter().flatten().chain(&dq).any(|v| !v.is_finite()) {
        return Err(Error::Model(
            "coefficient sensitivity produced NaN/inf".into(),
        ));
    }
    Ok((
        VectorField::from_components_unchecked(g, comps),
        ScalarField::from_vec_unchecked(g, dq),
    ))
}

/// `0.9 · min(dx²/(d·q_max), dx/(2·b_max))` from explicit bounds.
pub fn stable_timestep(dx: f64, dim: usize, diffusion_max: f64, drift_max: f64) -> f64 {
    let diffusive = if diffusion_max > 0.0 {
        dx * dx / (dim as f64 * diffusion_max)
    } else {
        f64::INFINITY
    };
    let advective = if drift_max > 0.0 {
        dx / (2.0 * drift_max)
    } else {
        f64::INFINITY
    };
    0.9 * diffusive.min(advective)
}

/// Stable explicit step for `model` on `grid`.
pub fn cfl_timestep(model: &CoefficientModel, grid: &GridSpec) -> f64 {
    let b = model.bounds();
    stable_timestep(grid.dx(), grid.dim, b.diffusion_max, b.drift_max)
}

/// Number of equal sub-steps per stored step so each respects the CFL bound.
pub(crate) fn substeps(model: &CoefficientModel, grid: &GridSpec) -> usize {
    let stable = cfl_timestep(model, grid);
    if stable.is_infinite() {
        1
    } else {
        ((grid.dt() / stable).ceil() as usize).max(1)
    }
}

//! Explicit conservative finite-volume solver for
//! `∂ρ/∂t = -∇·(b ρ) + ½ Δ(q ρ)` on the periodic grid.
//!
//! Face flux along each axis:
//! `J_{i+1/2} = -½(b_i ρ_i + b_{i+1} ρ_{i+1}) + ((qρ)_{i+1} - (qρ)_i) / (2 dx)`,
//! and `dρ_i/dt = Σ_axes (J_{i+1/2} - J_{i-1/2}) / dx`. Mass is conserved by
//! telescoping.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::grid::{integrate, GridSpec, ScalarField, VectorField};
use crate::model::{sample_coefficients, substeps, CoefficientModel};
use crate::nonlocal::{ControlField, NonlocalOperator};

/// Relative undershoot tolerated before the scheme is declared failed.
pub const NEGATIVITY_TOLERANCE: f64 = 1e-8;

/// Largest analytic mass an initial density may place outside the box.
pub const MAX_OUTSIDE_MASS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    /// Isotropic Gaussian with per-axis `variance`.
    Gaussian {
        mean: Vec<f64>,
        variance: f64,
    },
    Mixture {
        components: Vec<GaussianComponent>,
    },
    UniformBox {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
}

fn gaussian_outside_mass(grid: &GridSpec, mean: &[f64], variance: f64) -> f64 {
    let sd = (2.0 * variance).sqrt();
    let inside: f64 = mean
        .iter()
        .map(|&m| {
            let hi = erfc((grid.half_width - m) / sd) / 2.0;
            let lo = erfc((grid.half_width + m) / sd) / 2.0;
            1.0 - hi - lo
        })
        .product();
    1.0 - inside
}

fn check_gaussian(grid: &GridSpec, mean: &[f64], variance: f64) -> Result<()> {
    if mean.len() != grid.dim {
        return Err(Error::config(format!(
            "initial density: mean needs {} components",
            grid.dim
        )));
    }
    if !(variance > 0.0 && variance.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::config(
            "initial density: variance must be positive and mean finite",
        ));
    }
    let outside = gaussian_outside_mass(grid, mean, variance);
    if outside > MAX_OUTSIDE_MASS {
        return Err(Error::config(format!(
            "initial density places mass {outside:e} outside the box (limit {MAX_OUTSIDE_MASS:e})"
        )));
    }
    Ok(())
}

fn gaussian_value(x: [f64; 2], mean: &[f64], variance: f64) -> f64 {
    let r2: f64 = mean
        .iter()
        .enumerate()
        .map(|(k, m)| (x[k] - m).powi(2))
        .sum();
    (-r2 / (2.0 * variance)).exp()
        / (2.0 * std::f64::consts::PI * variance).powf(mean.len() as f64 / 2.0)
}

/// Tabulate the initial density and renormalize it by quadrature.
pub fn make_initial_density(grid: &GridSpec, spec: &DensitySpec) -> Result<ScalarField> {
    let raw = match spec {
        DensitySpec::Gaussian { mean, variance } => {
            check_gaussian(grid, mean, *variance)?;
            ScalarField::from_fn(grid, |x| gaussian_value(x, mean, *variance))?
        }
        DensitySpec::Mixture { components } => {
            if components.is_empty() {
                return Err(Error::config("initial density: mixture has no components"));
            }
            let total: f64 = components.iter().map(|c| c.weight).sum();
            if components.iter().any(|c| !(c.weight >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::config(format!(
                    "initial density: mixture weights must be nonnegative and sum to 1, got {total}"
                )));
            }
            for c in components {
                check_gaussian(grid, &c.mean, c.variance)?;
            }
            ScalarField::from_fn(grid, |x| {
                components
                    .iter()
                    .map(|c| c.weight * gaussian_value(x, &c.mean, c.variance))
                    .sum()
            })?
        }
        DensitySpec::UniformBox { lower, upper } => {
            if lower.len() != grid.dim || upper.len() != grid.dim {
                return Err(Error::config(
                    "initial density: box corners need one entry per axis",
                ));
            }
            if lower.iter().zip(upper).any(|(lo, hi)| !(lo < hi)) {
                return Err(Error::config("initial density: empty box"));
            }
            let l = grid.half_width;
            if lower.iter().chain(upper).any(|v| v.abs() > l) {
                return Err(Error::config(
                    "initial density: uniform box extends outside the domain",
                ));
            }
            ScalarField::from_fn(grid, |x| {
                let inside = (0..grid.dim).all(|k| x[k] >= lower[k] && x[k] <= upper[k]);
                if inside {
                    1.0
                } else {
                    0.0
                }
            })?
        }
    };
    let mass = integrate(&raw);
    if !(mass > 0.0) {
        return Err(Error::config("initial density has no mass on this grid"));
    }
    Ok(raw.scale(1.0 / mass))
}

/// Stored density snapshots at the `Nt + 1` grid times.
#[derive(Debug, Clone)]
pub struct DensityTrajectory {
    grid: GridSpec,
    frames: Vec<ScalarField>,
    substeps: usize,
    /// Most negative `min ρ / max ρ` seen over all sub-steps (0 if none).
    negativity: f64,
}

impl DensityTrajectory {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn frames(&self) -> &[ScalarField] {
        &self.frames
    }

    pub fn at(&self, n: usize) -> &ScalarField {
        &self.frames[n]
    }

    pub fn terminal(&self) -> &ScalarField {
        self.frames
            .last()
            .expect("trajectory has at least one frame")
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn negativity(&self) -> f64 {
        self.negativity
    }

    /// Largest `|∫ρⁿ - 1|` over stored frames.
    pub fn mass_error(&self) -> f64 {
        self.frames
            .iter()
            .map(|f| (integrate(f) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest boundary-band mass over stored frames.
    pub fn boundary_mass(&self) -> f64 {
        self.frames
            .iter()
            .map(ScalarField::boundary_mass)
            .fold(0.0, f64::max)
    }
}

/// Per-cell increment `Σ_axes (J_{i+1/2} - J_{i-1/2}) / dx`.
pub(crate) fn fp_rhs(rho: &[f64], b: &VectorField, q: &[f64], grid: &GridSpec, out: &mut [f64]) {
    let n = rho.len();
    let dx = grid.dx();
    let qr: Vec<f64> = rho.iter().zip(q).map(|(r, q)| r * q).collect();
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut flux = vec![0.0; n];
    for axis in 0..grid.dim {
        let ba = b.component(axis);
        for i in 0..n {
            let j = grid.shift(i, axis, 1);
            flux[i] = -0.5 * (ba[i] * rho[i] + ba[j] * rho[j]) + (qr[j] - qr[i]) / (2.0 * dx);
        }
        for i in 0..n {
            let m = grid.shift(i, axis, -1);
            out[i] += (flux[i] - flux[m]) / dx;
        }
    }
}

/// March the density from `rho0` under the control action `su`.
pub fn solve_forward_with_action(
    su: &ScalarField,
    model: &CoefficientModel,
    rho0: &ScalarField,
    grid: &GridSpec,
) -> Result<DensityTrajectory> {
    grid.ensure_same(su.grid())?;
    grid.ensure_same(rho0.grid())?;
    let m = substeps(model, grid);
    let h = grid.dt() / m as f64;
    let n = grid.len();
    let mut rho = rho0.values().to_vec();
    let mut rhs = vec![0.0; n];
    let mut frames = Vec::with_capacity(grid.steps + 1);
    frames.push(rho0.clone());
    let mut coeffs = sample_coefficients(model, su, 0.0)?;
    let static_coeffs = model.time_independent();
    let mut negativity: f64 = 0.0;
    for step in 0..grid.steps {
        for sub in 0..m {
            let t = grid.time(step) + sub as f64 * h;
            if !static_coeffs {
                coeffs = sample_coefficients(model, su, t)?;
            }
            fp_rhs(&rho, &coeffs.0, coeffs.1.values(), grid, &mut rhs);
            for (r, d) in rho.iter_mut().zip(&rhs) {
                *r += h * d;
            }
            let (lo, hi) = rho
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(Error::Instability {
                    solver: "forward",
                    step: step + 1,
                    time: t + h,
                });
            }
            if lo < 0.0 {
                negativity = negativity.min(lo / hi);
                if lo < -NEGATIVITY_TOLERANCE * hi {
                    return Err(Error::SchemeFailure {
                        solver: "forward",
                        step: step + 1,
                        time: t + h,
                        min: lo,
                        max: hi,
                    });
                }
            }
        }
        frames.push(ScalarField::from_vec_unchecked(grid, rho.clone()));
    }
    Ok(DensityTrajectory {
        grid: *grid,
        frames,
        substeps: m,
        negativity,
    })
}

/// Forward solve for control `u`; `Su` is computed once.
pub fn solve_forward(
    op: &NonlocalOperator,
    u: &ControlField,
    model: &CoefficientModel,
    rho0: &ScalarField,
    grid: &GridSpec,
) -> Result<DensityTrajectory> {
    let su = op.apply(u)?;
    solve_forward_with_action(&su, model, rho0, grid)
}

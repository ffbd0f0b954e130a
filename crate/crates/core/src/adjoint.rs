//! Backward solver for the dual equation
//! `∂p/∂t = -b·∇p - ½ q Δp - G`, `p(T) = G_T`,
//! with `s = Su(x)` frozen and central differences in space.

use crate::cost::CostFunctional;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField};
use crate::model::{sample_coefficients, substeps, CoefficientModel};
use crate::nonlocal::{ControlField, NonlocalOperator};

#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    grid: GridSpec,
    frames: Vec<ScalarField>,
    substeps: usize,
}

impl AdjointTrajectory {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Frames indexed by stored time step, `frames()[Nt] = G_T`.
    pub fn frames(&self) -> &[ScalarField] {
        &self.frames
    }

    pub fn at(&self, n: usize) -> &ScalarField {
        &self.frames[n]
    }

    pub fn initial(&self) -> &ScalarField {
        &self.frames[0]
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }
}

/// `b·∇_h p + ½ q Δ_h p` per cell.
pub(crate) fn adjoint_generator(
    p: &[f64],
    b: &[Vec<f64>],
    q: &[f64],
    grid: &GridSpec,
    out: &mut [f64],
) {
    let dx = grid.dx();
    let inv2dx = 1.0 / (2.0 * dx);
    let invdx2 = 1.0 / (dx * dx);
    for (i, o) in out.iter_mut().enumerate() {
        let mut adv = 0.0;
        let mut lap = 0.0;
        for (axis, ba) in b.iter().enumerate() {
            let up = p[grid.shift(i, axis, 1)];
            let dn = p[grid.shift(i, axis, -1)];
            adv += ba[i] * (up - dn) * inv2dx;
            lap += (up - 2.0 * p[i] + dn) * invdx2;
        }
        *o = adv + 0.5 * q[i] * lap;
    }
}

pub fn solve_adjoint_with_action(
    su: &ScalarField,
    model: &CoefficientModel,
    cost: &CostFunctional,
    grid: &GridSpec,
) -> Result<AdjointTrajectory> {
    grid.ensure_same(su.grid())?;
    grid.ensure_same(cost.terminal().grid())?;
    let static_coeffs = model.time_independent();
    let (mut b, mut q) = sample_coefficients(model, su, grid.horizon)?;
    let m = substeps(model, grid);
    let h = grid.dt() / m as f64;
    let n = grid.len();
    let mut p = cost.terminal().values().to_vec();
    let mut gen = vec![0.0; n];
    let mut frames = vec![ScalarField::zeros(grid); grid.steps + 1];
    frames[grid.steps] = cost.terminal().clone();
    let static_g = cost.running_is_static().then(|| cost.running_at(0.0));
    for step in (0..grid.steps).rev() {
        for sub in 0..m {
            let t = grid.time(step + 1) - sub as f64 * h;
            let g = match &static_g {
                Some(f) => std::borrow::Cow::Borrowed(f),
                None => std::borrow::Cow::Owned(cost.running_at(t)),
            };
            if !static_coeffs {
                // left end of the step, mirroring the forward march
                (b, q) = sample_coefficients(model, su, t - h)?;
            }
            adjoint_generator(&p, b.components(), q.values(), grid, &mut gen);
            for ((pi, gi), src) in p.iter_mut().zip(&gen).zip(g.values()) {
                *pi += h * (gi + src);
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Instability {
                    solver: "adjoint",
                    step,
                    time: t - h,
                });
            }
        }
        frames[step] = ScalarField::from_vec_unchecked(grid, p.clone());
    }
    Ok(AdjointTrajectory {
        grid: *grid,
        frames,
        substeps: m,
    })
}

pub fn solve_adjoint(
    op: &NonlocalOperator,
    u: &ControlField,
    model: &CoefficientModel,
    cost: &CostFunctional,
    grid: &GridSpec,
) -> Result<AdjointTrajectory> {
    let su = op.apply(u)?;
    solve_adjoint_with_action(&su, model, cost, grid)
}

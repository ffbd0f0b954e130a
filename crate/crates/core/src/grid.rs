//! Uniform periodic cell-centered grid on `[-L, L]^d` together with the
//! scalar/vector fields that live on it and their discrete calculus.
//!
//! Cells are stored row-major: in 2-d the flat index is `ix * n + iy`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial box, resolution and time discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dim: usize,
    pub half_width: f64,
    pub cells: usize,
    pub horizon: f64,
    pub steps: usize,
}

impl GridSpec {
    pub fn new(
        dim: usize,
        half_width: f64,
        cells: usize,
        horizon: f64,
        steps: usize,
    ) -> Result<Self> {
        let grid = GridSpec {
            dim,
            half_width,
            cells,
            horizon,
            steps,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(Error::config(format!(
                "grid: dim must be 1 or 2, got {}",
                self.dim
            )));
        }
        if !(self.half_width.is_finite() && self.half_width > 0.0) {
            return Err(Error::config("grid: half_width must be positive"));
        }
        if self.cells < 8 {
            return Err(Error::config(format!(
                "grid: need at least 8 cells per axis, got {}",
                self.cells
            )));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::config("grid: horizon must be positive"));
        }
        if self.steps < 1 {
            return Err(Error::config("grid: steps must be at least 1"));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.cells as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Volume of one cell, `dx^d`.
    pub fn cell_volume(&self) -> f64 {
        self.dx().powi(self.dim as i32)
    }

    pub fn len(&self) -> usize {
        self.cells.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domain_volume(&self) -> f64 {
        (2.0 * self.half_width).powi(self.dim as i32)
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 0.5) * self.dx()
    }

    /// Per-axis indices of a flat cell index.
    pub fn axes(&self, idx: usize) -> [usize; 2] {
        if self.dim == 1 {
            [idx, 0]
        } else {
            [idx / self.cells, idx % self.cells]
        }
    }

    pub fn flat(&self, axes: [usize; 2]) -> usize {
        if self.dim == 1 {
            axes[0]
        } else {
            axes[0] * self.cells + axes[1]
        }
    }

    /// Cell center; the second component is zero in 1-d.
    pub fn center(&self, idx: usize) -> [f64; 2] {
        let a = self.axes(idx);
        if self.dim == 1 {
            [self.coordinate(a[0]), 0.0]
        } else {
            [self.coordinate(a[0]), self.coordinate(a[1])]
        }
    }

    /// Neighbor of `idx` displaced by `offset` cells along `axis`, periodic.
    #[inline]
    pub fn shift(&self, idx: usize, axis: usize, offset: isize) -> usize {
        let n = self.cells as isize;
        let mut a = self.axes(idx);
        a[axis] = (a[axis] as isize + offset).rem_euclid(n) as usize;
        self.flat(a)
    }

    /// Time of stored checkpoint `n`.
    pub fn time(&self, n: usize) -> f64 {
        self.horizon * n as f64 / self.steps as f64
    }

    /// Index of the stored checkpoint closest to `t`.
    pub fn nearest_step(&self, t: f64) -> usize {
        ((t / self.dt()).round().max(0.0) as usize).min(self.steps)
    }

    /// Wrap a coordinate into `[-L, L)`; coordinates already inside are returned unchanged.
    pub fn wrap(&self, x: f64) -> f64 {
        let l = self.half_width;
        if (-l..l).contains(&x) {
            return x;
        }
        let w = (x + l).rem_euclid(2.0 * l) - l;
        if w >= l {
            -l
        } else {
            w
        }
    }

    /// Cell index along one axis containing coordinate `x`, or `None` outside the box.
    pub fn locate(&self, x: f64) -> Option<usize> {
        let pos = (x + self.half_width) / self.dx();
        if pos >= 0.0 && pos < self.cells as f64 {
            Some((pos as usize).min(self.cells - 1))
        } else {
            None
        }
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self.dim != other.dim || self.cells != other.cells || self.half_width != other.half_width
        {
            return Err(Error::GridMismatch(format!(
                "({}d, {} cells, L={}) vs ({}d, {} cells, L={})",
                self.dim, self.cells, self.half_width, other.dim, other.cells, other.half_width
            )));
        }
        Ok(())
    }
}

/// One real value per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &GridSpec, value: f64) -> Self {
        ScalarField {
            grid: *grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_values(grid: &GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite field value at cell {i}"
            )));
        }
        Ok(ScalarField {
            grid: *grid,
            values,
        })
    }

    /// Skips the finiteness scan; callers guarantee finite input.
    pub(crate) fn from_vec_unchecked(grid: &GridSpec, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        ScalarField {
            grid: *grid,
            values,
        }
    }

    /// Tabulate `f` at cell centers.
    pub fn from_fn(grid: &GridSpec, mut f: impl FnMut([f64; 2]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(grid.center(i))).collect();
        Self::from_values(grid, values)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScalarField {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.values.len(), other.values.len());
        ScalarField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    /// `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &ScalarField, b: f64) -> Self {
        self.zip_with(other, |x, y| a * x + b * y)
    }

    pub fn mul(&self, other: &ScalarField) -> Self {
        self.zip_with(other, |a, b| a * b)
    }

    /// First moment along `axis` (not normalized by mass).
    pub fn moment(&self, axis: usize, power: i32) -> f64 {
        let g = &self.grid;
        self.values
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g.center(i)[axis].powi(power))
            .sum::<f64>()
            * g.cell_volume()
    }

    /// Normalized mean along `axis`.
    pub fn mean(&self, axis: usize) -> f64 {
        self.moment(axis, 1) / integrate(self)
    }

    /// Normalized variance along `axis`.
    pub fn variance(&self, axis: usize) -> f64 {
        let mass = integrate(self);
        let m = self.moment(axis, 1) / mass;
        self.moment(axis, 2) / mass - m * m
    }

    /// Mass held in the outer band of cells (width `max(1, n/16)` per axis side).
    pub fn boundary_mass(&self) -> f64 {
        let g = &self.grid;
        let band = (g.cells / 16).max(1);
        let near = |i: usize| i < band || i >= g.cells - band;
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let a = g.axes(*i);
                near(a[0]) || (g.dim == 2 && near(a[1]))
            })
            .map(|(_, v)| v.abs())
            .sum::<f64>()
            * g.cell_volume()
    }

    /// CSV with header `x[,y],value`, row-major, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let g = &self.grid;
        if g.dim == 1 {
            writeln!(out, "x,value")?;
        } else {
            writeln!(out, "x,y,value")?;
        }
        for (i, v) in self.values.iter().enumerate() {
            let c = g.center(i);
            if g.dim == 1 {
                writeln!(out, "{:.16e},{:.16e}", c[0], v)?;
            } else {
                writeln!(out, "{:.16e},{:.16e},{:.16e}", c[0], c[1], v)?;
            }
        }
        Ok(())
    }
}

/// `d` real values per cell, stored component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: GridSpec,
    components: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn zeros(grid: &GridSpec) -> Self {
        VectorField {
            grid: *grid,
            components: vec![vec![0.0; grid.len()]; grid.dim],
        }
    }

    pub fn from_components(grid: &GridSpec, components: Vec<Vec<f64>>) -> Result<Self> {
        if components.len() != grid.dim || components.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::GridMismatch("vector field component shape".into()));
        }
        if components.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite vector field value"));
        }
        Ok(VectorField {
            grid: *grid,
            components,
        })
    }

    pub(crate) fn from_components_unchecked(grid: &GridSpec, components: Vec<Vec<f64>>) -> Self {
        VectorField {
            grid: *grid,
            components,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.components[axis]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn at(&self, idx: usize) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (k, c) in self.components.iter().enumerate() {
            out[k] = c[idx];
        }
        out
    }

    /// Largest Euclidean norm over cells.
    pub fn max_norm(&self) -> f64 {
        (0..self.grid.len())
            .map(|i| {
                self.components
                    .iter()
                    .map(|c| c[i] * c[i])
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Midpoint quadrature: `sum f_i * dx^d`.
pub fn integrate(f: &ScalarField) -> f64 {
    f.values.iter().sum::<f64>() * f.grid.cell_volume()
}

/// Quadrature-weighted inner product.
pub fn inner(f: &ScalarField, g: &ScalarField) -> f64 {
    f.values
        .iter()
        .zip(&g.values)
        .map(|(a, b)| a * b)
        .sum::<f64>()
        * f.grid.cell_volume()
}

/// Central differences with periodic wrap.
pub fn gradient(f: &ScalarField) -> VectorField {
    let g = &f.grid;
    let inv = 1.0 / (2.0 * g.dx());
    let components = (0..g.dim)
        .map(|axis| {
            (0..g.len())
                .map(|i| (f.values[g.shift(i, axis, 1)] - f.values[g.shift(i, axis, -1)]) * inv)
                .collect()
        })
        .collect();
    VectorField::from_components_unchecked(g, components)
}

/// Standard 3-point (1-d) / 5-point (2-d) periodic Laplacian.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    let g = &f.grid;
    let inv = 1.0 / (g.dx() * g.dx());
    let values = (0..g.len())
        .map(|i| {
            let mut acc = 0.0;
            for axis in 0..g.dim {
                acc += f.values[g.shift(i, axis, 1)] - 2.0 * f.values[i]
                    + f.values[g.shift(i, axis, -1)];
            }
            acc * inv
        })
        .collect();
    ScalarField::from_vec_unchecked(g, values)
}

pub fn l1_distance(f: &ScalarField, g: &ScalarField) -> f64 {
    f.values
        .iter()
        .zip(&g.values)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        * f.grid.cell_volume()
}

pub fn l2_norm(f: &ScalarField) -> f64 {
    inner(f, f).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn line(cells: usize) -> GridSpec {
        GridSpec::new(1, 1.0, cells, 1.0, 10).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(GridSpec::new(3, 1.0, 16, 1.0, 1).is_err());
        assert!(GridSpec::new(1, -1.0, 16, 1.0, 1).is_err());
        assert!(GridSpec::new(1, 1.0, 4, 1.0, 1).is_err());
        assert!(GridSpec::new(1, 1.0, 16, 0.0, 1).is_err());
        assert!(GridSpec::new(1, 1.0, 16, 1.0, 0).is_err());
    }

    #[test]
    fn cell_centers() {
        let g = line(8);
        assert_abs_diff_eq!(g.coordinate(0), -1.0 + 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(g.coordinate(7), 1.0 - 0.125, epsilon = 1e-15);
        let g2 = GridSpec::new(2, 1.0, 8, 1.0, 1).unwrap();
        assert_eq!(g2.len(), 64);
        assert_eq!(g2.center(9), [g2.coordinate(1), g2.coordinate(1)]);
    }

    #[test]
    fn integrate_constants() {
        let g = line(32);
        assert_abs_diff_eq!(
            integrate(&ScalarField::constant(&g, 1.0)),
            2.0,
            epsilon = 1e-14
        );
        assert_eq!(integrate(&ScalarField::zeros(&g)), 0.0);
    }

    #[test]
    fn integrate_normalized_gaussian() {
        let g = GridSpec::new(1, 4.0, 128, 1.0, 1).unwrap();
        let raw = ScalarField::from_fn(&g, |x| (-x[0] * x[0] / 0.08).exp()).unwrap();
        let mass = integrate(&raw);
        let f = raw.scale(1.0 / mass);
        assert_abs_diff_eq!(integrate(&f), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_of_sine_is_second_order() {
        // measured: max err * (L/dx)^2 / (pi/L)^3 ~ 1/6, i.e. C ~ 5.2 for L = 1
        let mut errs = Vec::new();
        for &n in &[32usize, 64, 128] {
            let g = line(n);
            let f = ScalarField::from_fn(&g, |x| (PI * x[0]).sin()).unwrap();
            let grad = gradient(&f);
            let err = (0..g.len())
                .map(|i| (grad.component(0)[i] - PI * (PI * g.center(i)[0]).cos()).abs())
                .fold(0.0, f64::max);
            let dx = g.dx();
            assert!(err <= 5.2 * dx * dx, "n={n} err={err}");
            errs.push(err);
        }
        assert!(errs[0] / errs[1] > 3.9 && errs[1] / errs[2] > 3.9);
    }

    #[test]
    fn laplacian_discrete_symbol() {
        let g = line(64);
        let m = 3.0;
        let k = m * PI / g.half_width;
        let f = ScalarField::from_fn(&g, |x| (k * x[0]).cos()).unwrap();
        let lap = laplacian(&f);
        let dx = g.dx();
        let symbol = -(2.0 - 2.0 * (k * dx).cos()) / (dx * dx);
        for (a, b) in lap.values().iter().zip(f.values()) {
            assert_abs_diff_eq!(*a, symbol * b, epsilon = 1e-10);
        }
    }

    #[test]
    fn constants_are_annihilated() {
        for dim in [1, 2] {
            let g = GridSpec::new(dim, 2.0, 16, 1.0, 1).unwrap();
            let c = ScalarField::constant(&g, 3.7);
            assert!(laplacian(&c).values().iter().all(|&v| v == 0.0));
            assert!(gradient(&c)
                .components()
                .iter()
                .flatten()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn norms() {
        let g = line(16);
        let f = ScalarField::from_fn(&g, |x| x[0]).unwrap();
        assert_eq!(l1_distance(&f, &f), 0.0);
        assert_eq!(l2_norm(&ScalarField::zeros(&g)), 0.0);
        assert_abs_diff_eq!(
            l2_norm(&ScalarField::constant(&g, 1.0)),
            2f64.sqrt(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn csv_layout() {
        let g = GridSpec::new(2, 1.0, 8, 1.0, 1).unwrap();
        let f = ScalarField::constant(&g, 0.1);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,y,value"));
        assert_eq!(
            lines.next(),
            Some("-8.7500000000000000e-1,-8.7500000000000000e-1,1.0000000000000001e-1")
        );
        assert_eq!(text.lines().count(), 65);
    }

    #[test]
    fn wrap_and_locate() {
        let g = line(8);
        assert_abs_diff_eq!(g.wrap(1.25), -0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(g.wrap(-1.25), 0.75, epsilon = 1e-15);
        assert_eq!(g.wrap(0.3), 0.3);
        assert_eq!(g.wrap(1.0), -1.0);
        assert!((-1.0..1.0).contains(&g.wrap(-1e-18 - 1.0)));
        assert_eq!(g.locate(-1.0), Some(0));
        assert_eq!(g.locate(0.99), Some(7));
        assert_eq!(g.locate(1.0), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn field(dim: usize) -> impl Strategy<Value = ScalarField> {
            let g = GridSpec::new(dim, 1.5, 8, 1.0, 1).unwrap();
            prop::collection::vec(-10.0f64..10.0, g.len())
                .prop_map(move |v| ScalarField::from_values(&g, v).unwrap())
        }

        proptest! {
            #[test]
            fn laplacian_integrates_to_zero(f in field(1)) {
                prop_assert!(integrate(&laplacian(&f)).abs() < 1e-9);
            }

            #[test]
            fn self_adjoint_random(f in field(2), h in field(2)) {
                let lhs = inner(&h, &laplacian(&f));
                let rhs = inner(&f, &laplacian(&h));
                prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
            }

            #[test]
            fn integrate_linear_and_bounded(f in field(1), h in field(1), a in -3.0f64..3.0) {
                let lhs = integrate(&f.axpby(a, &h, 1.0));
                let rhs = a * integrate(&f) + integrate(&h);
                prop_assert!((lhs - rhs).abs() < 1e-10);
                prop_assert!(integrate(&f) <= f.max() * 3.0 + 1e-12);
            }

            #[test]
            fn gradient_linear(f in field(2), h in field(2), a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let lhs = gradient(&f.axpby(a, &h, b));
                let gf = gradient(&f);
                let gh = gradient(&h);
                for k in 0..2 {
                    for i in 0..f.grid().len() {
                        let r = a * gf.component(k)[i] + b * gh.component(k)[i];
                        prop_assert!((lhs.component(k)[i] - r).abs() < 1e-9);
                    }
                }
            }
        }
    }
}

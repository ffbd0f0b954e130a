//! Nonlocal control action: periodic convolution `Su = K * u`, its gradient
//! and transpose, and the elliptic alternative `(I - Δ_h)^{-1}`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::grid::{gradient, GridSpec, ScalarField, VectorField};

fn default_amplitude() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_exponent() -> f64 {
    2.0
}

/// Configuration of the nonlocal operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Gaussian {
        sigma: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_true")]
        normalize: bool,
        #[serde(default = "default_exponent")]
        exponent: f64,
    },
    /// Smooth compactly supported bump `A exp(1 - 1/(1 - (r/R)^2))`.
    Bump {
        radius: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_true")]
        normalize: bool,
        #[serde(default = "default_exponent")]
        exponent: f64,
    },
    Delta {
        #[serde(default = "default_exponent")]
        exponent: f64,
    },
    /// Solve `(I - Δ_h) η = u` instead of convolving.
    Elliptic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelNorms {
    /// `‖K‖_{L^ℓ}`
    pub norm: f64,
    /// `‖∇K‖_{L^ℓ}` using central differences of the table
    pub grad_norm: f64,
    pub sup: f64,
    /// Fraction of `∫K` sitting at displacements with `|δ|_∞ ≥ L/2`.
    pub tail_mass: f64,
}

/// Nonnegative kernel tabulated on the periodic displacement lattice.
/// Entry `a` along an axis is the displacement `a·dx` for `a < n/2`, else `(a - n)·dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    grid: GridSpec,
    values: Vec<f64>,
    exponent: f64,
    norms: KernelNorms,
}

impl Kernel {
    pub fn from_values(grid: &GridSpec, values: Vec<f64>, exponent: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch("kernel table size".into()));
        }
        if !(1.0..=2.0).contains(&exponent) {
            return Err(Error::config(format!(
                "kernel: exponent must lie in [1, 2], got {exponent}"
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!(
                "kernel: K must be finite and nonnegative, found {} at lattice entry {i}",
                values[i]
            )));
        }
        let norms = compute_norms(grid, &values, exponent);
        if !(norms.norm.is_finite() && norms.grad_norm.is_finite()) {
            return Err(Error::config("kernel: norms are not finite"));
        }
        Ok(Kernel {
            grid: *grid,
            values,
            exponent,
            norms,
        })
    }

    pub fn gaussian(
        grid: &GridSpec,
        sigma: f64,
        amplitude: f64,
        normalize: bool,
        exponent: f64,
    ) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!(
                "kernel: gaussian width must be positive, got {sigma}"
            )));
        }
        check_amplitude(amplitude)?;
        let values = tabulate(grid, |r2| amplitude * (-r2 / (2.0 * sigma * sigma)).exp());
        Self::finish(grid, values, normalize, exponent)
    }

    pub fn bump(
        grid: &GridSpec,
        radius: f64,
        amplitude: f64,
        normalize: bool,
        exponent: f64,
    ) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::config(format!(
                "kernel: bump radius must be positive, got {radius}"
            )));
        }
        if radius >= grid.half_width {
            return Err(Error::config(
                "kernel: bump radius must be smaller than the half-width",
            ));
        }
        check_amplitude(amplitude)?;
        let values = tabulate(grid, |r2| {
            let z = r2 / (radius * radius);
            if z < 1.0 {
                amplitude * (1.0 - 1.0 / (1.0 - z)).exp()
            } else {
                0.0
            }
        });
        if values.iter().all(|&v| v == 0.0) {
            return Err(Error::config(
                "kernel: bump radius is below grid resolution",
            ));
        }
        Self::finish(grid, values, normalize, exponent)
    }

    /// Discrete identity: `1/dx^d` at zero displacement.
    pub fn delta(grid: &GridSpec, exponent: f64) -> Result<Self> {
        let mut values = vec![0.0; grid.len()];
        values[0] = 1.0 / grid.cell_volume();
        Self::from_values(grid, values, exponent)
    }

    fn finish(
        grid: &GridSpec,
        mut values: Vec<f64>,
        normalize: bool,
        exponent: f64,
    ) -> Result<Self> {
        if normalize {
            let mass: f64 = values.iter().sum::<f64>() * grid.cell_volume();
            values.iter_mut().for_each(|v| *v /= mass);
        }
        Self::from_values(grid, values, exponent)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn norms(&self) -> &KernelNorms {
        &self.norms
    }

    /// Value at an integer displacement (per-axis cell offsets).
    pub fn at_offset(&self, offset: [isize; 2]) -> f64 {
        let n = self.grid.cells as isize;
        let a = [
            offset[0].rem_euclid(n) as usize,
            offset[1].rem_euclid(n) as usize,
        ];
        self.values[self.grid.flat(a)]
    }

    /// Central-difference gradient of the table, component-major.
    pub fn gradient_table(&self) -> Vec<Vec<f64>> {
        let f = ScalarField::from_vec_unchecked(&self.grid, self.values.clone());
        gradient(&f).components().to_vec()
    }
}

fn check_amplitude(a: f64) -> Result<()> {
    if a > 0.0 && a.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "kernel: amplitude must be positive, got {a}"
        )))
    }
}

fn signed_offset(a: usize, n: usize) -> isize {
    if a < n / 2 {
        a as isize
    } else {
        a as isize - n as isize
    }
}

fn tabulate(grid: &GridSpec, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let dx = grid.dx();
    (0..grid.len())
        .map(|idx| {
            let a = grid.axes(idx);
            let r2: f64 = (0..grid.dim)
                .map(|k| {
                    let d = signed_offset(a[k], grid.cells) as f64 * dx;
                    d * d
                })
                .sum();
            f(r2)
        })
        .collect()
}

fn compute_norms(grid: &GridSpec, values: &[f64], ell: f64) -> KernelNorms {
    let w = grid.cell_volume();
    let norm = (values.iter().map(|v| v.abs().powf(ell)).sum::<f64>() * w).powf(1.0 / ell);
    let field = ScalarField::from_vec_unchecked(grid, values.to_vec());
    let grad = gradient(&field);
    let grad_norm = ((0..grid.len())
        .map(|i| {
            let g = grad.at(i);
            (g[0] * g[0] + g[1] * g[1]).sqrt().powf(ell)
        })
        .sum::<f64>()
        * w)
        .powf(1.0 / ell);
    let sup = values.iter().copied().fold(0.0, f64::max);
    let total: f64 = values.iter().sum();
    let half = (grid.cells / 4) as isize;
    let tail: f64 = values
        .iter()
        .enumerate()
        .filter(|(idx, _)| {
            let a = grid.axes(*idx);
            (0..grid.dim).any(|k| signed_offset(a[k], grid.cells).abs() >= half)
        })
        .map(|(_, v)| *v)
        .sum();
    KernelNorms {
        norm,
        grad_norm,
        sup,
        tail_mass: if total > 0.0 { tail / total } else { 0.0 },
    }
}

/// Axis-aligned box (or arbitrary cell set) where the control acts.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaMask {
    grid: GridSpec,
    cells: Vec<bool>,
    count: usize,
}

impl OmegaMask {
    /// Cells whose centers lie in `[lower_k, upper_k]` on every axis.
    pub fn from_box(grid: &GridSpec, lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != grid.dim || upper.len() != grid.dim {
            return Err(Error::config(
                "omega: box corners must have one entry per dimension",
            ));
        }
        if lower.iter().zip(upper).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::config(
                "omega: lower corner must be below upper corner",
            ));
        }
        let cells = (0..grid.len())
            .map(|i| {
                let c = grid.center(i);
                (0..grid.dim).all(|k| c[k] >= lower[k] && c[k] <= upper[k])
            })
            .collect();
        Self::from_cells(grid, cells)
    }

    pub fn from_cells(grid: &GridSpec, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != grid.len() {
            return Err(Error::GridMismatch("omega mask size".into()));
        }
        let count = cells.iter().filter(|&&c| c).count();
        if count == 0 {
            return Err(Error::config("omega: control region is empty on this grid"));
        }
        let touches_edge = cells.iter().enumerate().any(|(i, &inside)| {
            inside
                && grid.axes(i)[..grid.dim]
                    .iter()
                    .any(|&a| a == 0 || a == grid.cells - 1)
        });
        if touches_edge {
            return Err(Error::config(
                "omega: control region must lie strictly inside the box",
            ));
        }
        Ok(OmegaMask {
            grid: *grid,
            cells,
            count,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn contains(&self, idx: usize) -> bool {
        self.cells[idx]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Lebesgue measure `m(ω)`.
    pub fn measure(&self) -> f64 {
        self.count as f64 * self.grid.cell_volume()
    }

    /// Zero a field outside ω.
    pub fn restrict(&self, f: &ScalarField) -> ScalarField {
        let values = f
            .values()
            .iter()
            .zip(&self.cells)
            .map(|(&v, &inside)| if inside { v } else { 0.0 })
            .collect();
        ScalarField::from_vec_unchecked(f.grid(), values)
    }
}

/// Conjugate exponent `ℓ*` with `1/ℓ + 1/ℓ* = 1`.
pub fn conjugate_exponent(ell: f64) -> f64 {
    if ell <= 1.0 {
        f64::INFINITY
    } else {
        ell / (ell - 1.0)
    }
}

/// Admissible control: values in `[0, M0]` on ω, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    mask: Arc<OmegaMask>,
    bound: f64,
    values: Vec<f64>,
}

impl ControlField {
    pub fn constant(mask: &Arc<OmegaMask>, bound: f64, value: f64) -> Result<Self> {
        let values = mask
            .cells
            .iter()
            .map(|&c| if c { value } else { 0.0 })
            .collect();
        Self::from_values(mask, bound, values)
    }

    /// Evaluate `f` at the centers of ω cells.
    pub fn from_fn(
        mask: &Arc<OmegaMask>,
        bound: f64,
        mut f: impl FnMut([f64; 2]) -> f64,
    ) -> Result<Self> {
        let g = mask.grid;
        let values = (0..g.len())
            .map(|i| if mask.cells[i] { f(g.center(i)) } else { 0.0 })
            .collect();
        Self::from_values(mask, bound, values)
    }

    pub fn from_values(mask: &Arc<OmegaMask>, bound: f64, values: Vec<f64>) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::config(format!(
                "control bound M0 must be positive (admissible set [0, M0]), got {bound}"
            )));
        }
        if values.len() != mask.grid.len() {
            return Err(Error::GridMismatch("control field size".into()));
        }
        for (i, (&v, &inside)) in values.iter().zip(&mask.cells).enumerate() {
            if inside && !(0.0..=bound).contains(&v) {
                return Err(Error::contract(format!(
                    "control value {v} at cell {i} outside admissible set [0, {bound}]"
                )));
            }
            if !inside && v != 0.0 {
                return Err(Error::contract(format!(
                    "control must vanish outside omega (cell {i})"
                )));
            }
        }
        Ok(ControlField {
            mask: Arc::clone(mask),
            bound,
            values,
        })
    }

    pub fn mask(&self) -> &Arc<OmegaMask> {
        &self.mask
    }

    pub fn grid(&self) -> &GridSpec {
        &self.mask.grid
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn as_field(&self) -> ScalarField {
        ScalarField::from_vec_unchecked(&self.mask.grid, self.values.clone())
    }

    /// `(1 - λ) self + λ target`, clamped back into `[0, M0]` against round-off.
    pub fn relax_toward(&self, target: &ControlField, lambda: f64) -> ControlField {
        let values = self
            .values
            .iter()
            .zip(&target.values)
            .map(|(&a, &b)| ((1.0 - lambda) * a + lambda * b).clamp(0.0, self.bound))
            .collect();
        ControlField {
            mask: Arc::clone(&self.mask),
            bound: self.bound,
            values,
        }
    }

    /// `self + eps * direction`; rejected unless the result stays admissible.
    pub fn perturbed(&self, direction: &ScalarField, eps: f64) -> Result<ControlField> {
        let values: Vec<f64> = self
            .values
            .iter()
            .zip(direction.values())
            .zip(&self.mask.cells)
            .map(|((&a, &v), &inside)| if inside { a + eps * v } else { 0.0 })
            .collect();
        Self::from_values(&self.mask, self.bound, values)
            .map_err(|e| Error::contract(format!("inadmissible perturbation (eps = {eps}): {e}")))
    }

    /// `L²(ω)` distance.
    pub fn l2_distance(&self, other: &ControlField) -> f64 {
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (s * self.mask.grid.cell_volume()).sqrt()
    }
}

/// `(Su)(x) = Σ_j K(x - x_j) u_j dx^d`, via FFT.
pub fn apply_s(kernel: &Kernel, u: &ControlField) -> Result<ScalarField> {
    kernel.grid.ensure_same(u.grid())?;
    let out = fft::circular_convolve(&kernel.grid, &kernel.values, &u.values);
    Ok(ScalarField::from_vec_unchecked(u.grid(), out))
}

/// `∇(Su)` as the convolution of `u` with the central-difference gradient of `K`.
pub fn apply_grad_s(kernel: &Kernel, u: &ControlField) -> Result<VectorField> {
    kernel.grid.ensure_same(u.grid())?;
    let comps = kernel
        .gradient_table()
        .iter()
        .map(|gk| fft::circular_convolve(&kernel.grid, gk, &u.values))
        .collect();
    Ok(VectorField::from_components_unchecked(u.grid(), comps))
}

/// `(S* f)(x) = Σ_i K(x_i - x) f_i dx^d`, restricted to ω.
pub fn apply_s_adjoint(kernel: &Kernel, f: &ScalarField, mask: &OmegaMask) -> Result<ScalarField> {
    kernel.grid.ensure_same(f.grid())?;
    kernel.grid.ensure_same(mask.grid())?;
    let out = fft::circular_correlate(&kernel.grid, &kernel.values, f.values());
    Ok(mask.restrict(&ScalarField::from_vec_unchecked(f.grid(), out)))
}

/// Solve `(I - Δ_h) η = f` on the periodic grid by Fourier diagonalization.
pub fn elliptic_solve(f: &ScalarField) -> ScalarField {
    let g = f.grid();
    let symbol = fft::neg_laplacian_symbol(g);
    let hat = fft::forward(g, f.values());
    let scaled = hat
        .iter()
        .zip(&symbol)
        .map(|(c, l)| c / (1.0 + l))
        .collect();
    ScalarField::from_vec_unchecked(g, fft::inverse_real(g, scaled))
}

pub fn elliptic_smoother(u: &ControlField) -> ScalarField {
    elliptic_solve(&u.as_field())
}

/// The nonlocal action used by the solvers.
#[derive(Debug, Clone, PartialEq)]
pub enum NonlocalOperator {
    Convolution(Kernel),
    Elliptic(GridSpec),
}

impl NonlocalOperator {
    pub fn from_spec(grid: &GridSpec, spec: &KernelSpec) -> Result<Self> {
        Ok(match *spec {
            KernelSpec::Gaussian {
                sigma,
                amplitude,
                normalize,
                exponent,
            } => NonlocalOperator::Convolution(Kernel::gaussian(
                grid, sigma, amplitude, normalize, exponent,
            )?),
            KernelSpec::Bump {
                radius,
                amplitude,
                normalize,
                exponent,
            } => NonlocalOperator::Convolution(Kernel::bump(
                grid, radius, amplitude, normalize, exponent,
            )?),
            KernelSpec::Delta { exponent } => {
                NonlocalOperator::Convolution(Kernel::delta(grid, exponent)?)
            }
            KernelSpec::Elliptic => NonlocalOperator::Elliptic(*grid),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        match self {
            NonlocalOperator::Convolution(k) => &k.grid,
            NonlocalOperator::Elliptic(g) => g,
        }
    }

    pub fn apply(&self, u: &ControlField) -> Result<ScalarField> {
        match self {
            NonlocalOperator::Convolution(k) => apply_s(k, u),
            NonlocalOperator::Elliptic(g) => {
                g.ensure_same(u.grid())?;
                Ok(elliptic_smoother(u))
            }
        }
    }

    pub fn apply_grad(&self, u: &ControlField) -> Result<VectorField> {
        match self {
            NonlocalOperator::Convolution(k) => apply_grad_s(k, u),
            NonlocalOperator::Elliptic(_) => Ok(gradient(&self.apply(u)?)),
        }
    }

    /// Transpose of [`apply`](Self::apply), restricted to ω.
    pub fn apply_adjoint(&self, f: &ScalarField, mask: &OmegaMask) -> Result<ScalarField> {
        match self {
            NonlocalOperator::Convolution(k) => apply_s_adjoint(k, f, mask),
            NonlocalOperator::Elliptic(g) => {
                g.ensure_same(f.grid())?;
                g.ensure_same(mask.grid())?;
                Ok(mask.restrict(&elliptic_solve(f)))
            }
        }
    }

    /// Upper bound on `Su` over admissible controls: Young's inequality for
    /// the convolution, `M0` for the elliptic smoother (maximum principle).
    pub fn action_bound(&self, mask: &OmegaMask, m0: f64) -> f64 {
        match self {
            NonlocalOperator::Convolution(k) => young_bound(m0, mask, k.exponent, k.norms.norm),
            NonlocalOperator::Elliptic(_) => m0,
        }
    }

    /// Same bound for `|∇(Su)|`.
    pub fn gradient_bound(&self, mask: &OmegaMask, m0: f64) -> Option<f64> {
        match self {
            NonlocalOperator::Convolution(k) => {
                Some(young_bound(m0, mask, k.exponent, k.norms.grad_norm))
            }
            NonlocalOperator::Elliptic(_) => None,
        }
    }

    pub fn kernel(&self) -> Option<&Kernel> {
        match self {
            NonlocalOperator::Convolution(k) => Some(k),
            NonlocalOperator::Elliptic(_) => None,
        }
    }
}

/// `M0 m(ω)^{1/ℓ*} ‖·‖_{L^ℓ}`.
pub fn young_bound(m0: f64, mask: &OmegaMask, ell: f64, norm: f64) -> f64 {
    let star = conjugate_exponent(ell);
    let factor = if star.is_infinite() {
        1.0
    } else {
        mask.measure().powf(1.0 / star)
    };
    m0 * factor * norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{inner, integrate, l2_norm, laplacian};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid1(n: usize) -> GridSpec {
        GridSpec::new(1, 2.0, n, 1.0, 4).unwrap()
    }

    fn mask1(g: &GridSpec) -> Arc<OmegaMask> {
        Arc::new(OmegaMask::from_box(g, &[-0.5], &[0.5]).unwrap())
    }

    fn random_control(mask: &Arc<OmegaMask>, m0: f64, rng: &mut ChaCha8Rng) -> ControlField {
        ControlField::from_fn(mask, m0, |_| rng.random::<f64>() * m0).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let g = grid1(32);
        let k = Kernel::delta(&g, 2.0).unwrap();
        assert_eq!(k.values()[0], 1.0 / g.dx());
        let mask = mask1(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_control(&mask, 1.0, &mut rng);
        let su = apply_s(&k, &u).unwrap();
        for (a, b) in su.values().iter().zip(u.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gaussian_normalized_mass() {
        for dim in [1, 2] {
            let g = GridSpec::new(dim, 2.0, 32, 1.0, 1).unwrap();
            let k = Kernel::gaussian(&g, 0.2, 3.0, true, 2.0).unwrap();
            let mass = integrate(&ScalarField::from_values(&g, k.values().to_vec()).unwrap());
            assert!((mass - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn bump_has_compact_support() {
        let g = grid1(64);
        let r = 0.4;
        let k = Kernel::bump(&g, r, 1.0, false, 1.5).unwrap();
        for a in 0..g.cells {
            let d = signed_offset(a, g.cells) as f64 * g.dx();
            if d.abs() >= r {
                assert_eq!(k.values()[a], 0.0);
            } else {
                assert!(k.values()[a] > 0.0);
            }
        }
    }

    #[test]
    fn invalid_kernels_rejected() {
        let g = grid1(32);
        assert!(Kernel::gaussian(&g, -0.1, 1.0, true, 2.0).is_err());
        assert!(Kernel::bump(&g, 0.0, 1.0, true, 2.0).is_err());
        assert!(Kernel::gaussian(&g, 0.1, 1.0, true, 2.5).is_err());
        let mut v = vec![0.0; 32];
        v[3] = -1.0;
        assert!(Kernel::from_values(&g, v, 2.0).is_err());
    }

    #[test]
    fn zero_control_gives_zero_action() {
        let g = grid1(32);
        let k = Kernel::gaussian(&g, 0.3, 1.0, true, 2.0).unwrap();
        let u = ControlField::constant(&mask1(&g), 1.0, 0.0).unwrap();
        assert!(apply_s(&k, &u)
            .unwrap()
            .values()
            .iter()
            .all(|v| v.abs() < 1e-15));
        assert!(apply_grad_s(&k, &u).unwrap().max_norm() < 1e-15);
        let f = ScalarField::zeros(&g);
        assert!(apply_s_adjoint(&k, &f, &mask1(&g))
            .unwrap()
            .values()
            .iter()
            .all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn convolution_matches_direct_summation() {
        let g = grid1(64);
        let k = Kernel::gaussian(&g, 0.25, 1.0, true, 2.0).unwrap();
        let mask = mask1(&g);
        let m0 = 1.5;
        let u = ControlField::constant(&mask, m0, m0).unwrap();
        let fast = apply_s(&k, &u).unwrap();
        // direct double loop on analytic offsets
        let direct: Vec<f64> = (0..g.len())
            .map(|i| {
                (0..g.len())
                    .map(|j| k.at_offset([i as isize - j as isize, 0]) * u.values()[j])
                    .sum::<f64>()
                    * g.dx()
            })
            .collect();
        let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in fast.values().iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn grad_commutes_with_gradient() {
        let g = GridSpec::new(2, 2.0, 16, 1.0, 1).unwrap();
        let k = Kernel::gaussian(&g, 0.3, 1.0, true, 2.0).unwrap();
        let mask = Arc::new(OmegaMask::from_box(&g, &[-0.6, -0.6], &[0.6, 0.6]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_control(&mask, 1.0, &mut rng);
        let direct = apply_grad_s(&k, &u).unwrap();
        let via = gradient(&apply_s(&k, &u).unwrap());
        for a in 0..2 {
            for i in 0..g.len() {
                assert!((direct.component(a)[i] - via.component(a)[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_of_point_mass_matches_gaussian_derivative() {
        // unnormalized unit-amplitude gaussian, u = 1/dx at the center cell pair
        let sigma = 0.3;
        let mut errs = Vec::new();
        for n in [64usize, 128, 256] {
            let g = GridSpec::new(1, 2.0, n, 1.0, 1).unwrap();
            let k = Kernel::gaussian(&g, sigma, 1.0, false, 2.0).unwrap();
            let mask = Arc::new(OmegaMask::from_box(&g, &[-0.2], &[0.2]).unwrap());
            let c = n / 2;
            let u = ControlField::from_values(
                &mask,
                1e6,
                (0..n)
                    .map(|i| if i == c { 1.0 / g.dx() } else { 0.0 })
                    .collect(),
            )
            .unwrap();
            let grad = apply_grad_s(&k, &u).unwrap();
            let x0 = g.coordinate(c);
            let err = (0..n)
                .map(|i| {
                    let y = g.coordinate(i) - x0;
                    let exact = -y / (sigma * sigma) * (-y * y / (2.0 * sigma * sigma)).exp();
                    (grad.component(0)[i] - exact).abs()
                })
                .fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(
            errs[0] / errs[1] > 3.5 && errs[1] / errs[2] > 3.5,
            "{errs:?}"
        );
    }

    #[test]
    fn even_kernel_adjoint_is_convolution_on_omega() {
        let g = grid1(32);
        let k = Kernel::gaussian(&g, 0.3, 1.0, true, 2.0).unwrap();
        let mask = mask1(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_control(&mask, 1.0, &mut rng);
        let adj = apply_s_adjoint(&k, &f.as_field(), &mask).unwrap();
        let fwd = mask.restrict(&apply_s(&k, &f).unwrap());
        for (a, b) in adj.values().iter().zip(fwd.values()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn adjoint_identity_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for dim in [1, 2] {
            let g = GridSpec::new(dim, 2.0, 16, 1.0, 1).unwrap();
            let lo = vec![-0.9; dim];
            let hi = vec![0.7; dim];
            let mask = Arc::new(OmegaMask::from_box(&g, &lo, &hi).unwrap());
            // asymmetric kernel to make the transpose nontrivial
            let vals: Vec<f64> = (0..g.len()).map(|_| rng.random::<f64>()).collect();
            let k = Kernel::from_values(&g, vals, 1.0).unwrap();
            for _ in 0..50 {
                let u = random_control(&mask, 2.0, &mut rng);
                let f = ScalarField::from_fn(&g, |_| rng.random::<f64>() * 2.0 - 1.0).unwrap();
                let lhs = inner(&apply_s(&k, &u).unwrap(), &f);
                let rhs = inner(&u.as_field(), &apply_s_adjoint(&k, &f, &mask).unwrap());
                let scale = l2_norm(&u.as_field()) * l2_norm(&f);
                assert!((lhs - rhs).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn elliptic_constant_and_mode() {
        let g = grid1(32);
        let c = ScalarField::constant(&g, 0.7);
        for v in elliptic_solve(&c).values() {
            assert!((v - 0.7).abs() < 1e-14);
        }
        let k = 4.0 * std::f64::consts::PI / (2.0 * g.half_width);
        let mode = ScalarField::from_fn(&g, |x| (k * x[0]).cos()).unwrap();
        let lam = (2.0 - 2.0 * (k * g.dx()).cos()) / (g.dx() * g.dx());
        let eta = elliptic_solve(&mode);
        for (a, b) in eta.values().iter().zip(mode.values()) {
            assert!((a - b / (1.0 + lam)).abs() < 1e-14);
        }
    }

    #[test]
    fn elliptic_residual_small() {
        let g = GridSpec::new(2, 1.0, 32, 1.0, 1).unwrap();
        let mask = Arc::new(OmegaMask::from_box(&g, &[-0.5, -0.5], &[0.5, 0.3]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_control(&mask, 1.0, &mut rng);
        let eta = elliptic_smoother(&u);
        let residual = eta
            .axpby(1.0, &laplacian(&eta), -1.0)
            .axpby(1.0, &u.as_field(), -1.0);
        assert!(l2_norm(&residual) <= 1e-10 * l2_norm(&u.as_field()));
        assert!(eta.min() >= -1e-14 && eta.max() <= 1.0 + 1e-14);
    }

    #[test]
    fn mask_validation() {
        let g = grid1(16);
        assert!(OmegaMask::from_box(&g, &[-3.0], &[0.0]).is_err());
        assert!(OmegaMask::from_box(&g, &[0.01], &[0.02]).is_err());
        let m = OmegaMask::from_box(&g, &[-0.5], &[0.5]).unwrap();
        assert_eq!(m.count(), 4);
        assert!((m.measure() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn control_admissibility() {
        let g = grid1(16);
        let mask = mask1(&g);
        assert!(ControlField::constant(&mask, -1.0, 0.0).is_err());
        assert!(ControlField::constant(&mask, 1.0, 1.5).is_err());
        let u = ControlField::constant(&mask, 1.0, 1.0).unwrap();
        let v = ScalarField::constant(&g, 1.0);
        assert!(u.perturbed(&v, 1e-3).is_err());
        assert!(u.perturbed(&v, -1e-3).is_ok());
    }

    #[test]
    fn conjugate_exponents() {
        assert!(conjugate_exponent(1.0).is_infinite());
        assert_eq!(conjugate_exponent(2.0), 2.0);
        assert!((conjugate_exponent(1.5) - 3.0).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn setup() -> (GridSpec, Arc<OmegaMask>, Kernel) {
            let g = GridSpec::new(1, 2.0, 32, 1.0, 1).unwrap();
            let mask = Arc::new(OmegaMask::from_box(&g, &[-0.8], &[0.6]).unwrap());
            let k = Kernel::gaussian(&g, 0.25, 1.0, true, 1.5).unwrap();
            (g, mask, k)
        }

        proptest! {
            #[test]
            fn action_within_young_bound(vals in prop::collection::vec(0.0f64..=1.0, 32)) {
                let (_, mask, k) = setup();
                let m0 = 1.0;
                let vals: Vec<f64> = vals.iter().enumerate().map(|(i, v)| if mask.contains(i) { *v } else { 0.0 }).collect();
                let u = ControlField::from_values(&mask, m0, vals).unwrap();
                let op = NonlocalOperator::Convolution(k.clone());
                let su = op.apply(&u).unwrap();
                prop_assert!(su.min() >= -1e-14);
                prop_assert!(su.max() <= op.action_bound(&mask, m0) * (1.0 + 1e-12));
                let grad = op.apply_grad(&u).unwrap();
                prop_assert!(grad.max_norm() <= op.gradient_bound(&mask, m0).unwrap() * (1.0 + 1e-12));
            }

            #[test]
            fn action_is_monotone(a in prop::collection::vec(0.0f64..=0.5, 32), b in prop::collection::vec(0.0f64..=0.5, 32)) {
                let (_, mask, k) = setup();
                let lo: Vec<f64> = a.iter().enumerate().map(|(i, v)| if mask.contains(i) { *v } else { 0.0 }).collect();
                let hi: Vec<f64> = lo.iter().zip(&b).enumerate().map(|(i, (x, y))| if mask.contains(i) { x + y } else { 0.0 }).collect();
                let s1 = apply_s(&k, &ControlField::from_values(&mask, 1.0, lo).unwrap()).unwrap();
                let s2 = apply_s(&k, &ControlField::from_values(&mask, 1.0, hi).unwrap()).unwrap();
                for (x, y) in s1.values().iter().zip(s2.values()) {
                    prop_assert!(*x <= *y + 1e-14);
                }
            }

            #[test]
            fn elliptic_bounded_by_input(vals in prop::collection::vec(0.0f64..=1.0, 32)) {
                let (g, mask, _) = setup();
                let vals: Vec<f64> = vals.iter().enumerate().map(|(i, v)| if mask.contains(i) { *v } else { 0.0 }).collect();
                let u = ControlField::from_values(&mask, 1.0, vals).unwrap();
                let eta = elliptic_smoother(&u);
                let uf = u.as_field();
                prop_assert!(eta.min() >= uf.min() - 1e-13);
                prop_assert!(eta.max() <= uf.max() + 1e-13);
                let _ = g;
            }
        }
    }
}

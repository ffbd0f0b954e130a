//! Euler–Maruyama simulation of the controlled SDE and comparison of its
//! empirical law with the PDE density.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostFunctional;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField};
use crate::model::CoefficientModel;
use crate::nonlocal::{ControlField, NonlocalOperator};
use crate::optimizer::trapezoid;

/// Below this retained fraction a domain-exit warning is raised.
pub const MIN_RETAINED_FRACTION: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// Target Euler step; rounded down so each stored PDE step holds a whole number of MC steps.
    /// Defaults to the PDE step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Times at which histograms are taken; defaults to `[T]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<f64>,
    /// Histogram bins per axis; defaults to the grid cell count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
}

impl McConfig {
    pub fn new(paths: usize, seed: u64) -> Self {
        McConfig {
            paths,
            seed,
            dt: None,
            checkpoints: Vec::new(),
            bins: None,
        }
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::config("monte_carlo: paths must be at least 1"));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::config(format!(
                    "monte_carlo: dt must be positive, got {dt}"
                )));
            }
        }
        if let Some(b) = self.bins {
            if b < 2 {
                return Err(Error::config("monte_carlo: bins must be at least 2"));
            }
        }
        for &t in &self.checkpoints {
            if !(0.0..=grid.horizon).contains(&t) {
                return Err(Error::config(format!(
                    "monte_carlo: checkpoint {t} outside [0, T]"
                )));
            }
        }
        Ok(())
    }

    /// MC steps per stored PDE step.
    pub fn substeps(&self, grid: &GridSpec) -> usize {
        match self.dt {
            Some(dt) => ((grid.dt() / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize,
            None => 1,
        }
    }

    /// Checkpoints snapped to stored steps, sorted and deduplicated.
    pub fn checkpoint_steps(&self, grid: &GridSpec) -> Vec<usize> {
        let mut steps: Vec<usize> = if self.checkpoints.is_empty() {
            vec![grid.steps]
        } else {
            self.checkpoints
                .iter()
                .map(|&t| grid.nearest_step(t))
                .collect()
        };
        steps.sort_unstable();
        steps.dedup();
        steps
    }

    pub fn histogram_grid(&self, grid: &GridSpec) -> GridSpec {
        GridSpec {
            cells: self.bins.unwrap_or(grid.cells),
            ..*grid
        }
    }
}

/// Histograms of path positions at the checkpoints.
#[derive(Debug, Clone)]
pub struct EmpiricalDensity {
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub histograms: Vec<ScalarField>,
    pub samples: usize,
    /// Fraction of paths that had not crossed the domain boundary by each checkpoint.
    pub retained_fraction: Vec<f64>,
}

impl EmpiricalDensity {
    pub fn at_step(&self, step: usize) -> Option<&ScalarField> {
        self.steps
            .iter()
            .position(|&s| s == step)
            .map(|k| &self.histograms[k])
    }

    pub fn min_retained_fraction(&self) -> f64 {
        self.retained_fraction.iter().copied().fold(1.0, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathCost {
    pub running: f64,
    pub terminal: f64,
}

#[derive(Debug, Clone)]
pub struct McRun {
    pub density: EmpiricalDensity,
    pub terminal_samples: Vec<[f64; 2]>,
    pub path_costs: Option<Vec<PathCost>>,
    pub wrap_events: u64,
    pub total_steps: u64,
}

impl McRun {
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let r = self.density.min_retained_fraction();
        if r < MIN_RETAINED_FRACTION {
            w.push(format!(
                "Monte-Carlo: only {:.5} of paths stayed inside the domain (threshold {MIN_RETAINED_FRACTION})",
                r
            ));
        }
        w
    }
}

/// Multilinear interpolation of a periodic cell-centred field.
pub fn interpolate(f: &ScalarField, x: [f64; 2]) -> f64 {
    let g = f.grid();
    let n = g.cells;
    let dx = g.dx();
    let mut idx = [[0usize; 2]; 2];
    let mut w = [[1.0, 0.0]; 2];
    for axis in 0..g.dim {
        let xi = (x[axis] + g.half_width) / dx - 0.5;
        let i0 = xi.floor();
        let frac = xi - i0;
        let i0 = (i0 as i64).rem_euclid(n as i64) as usize;
        idx[axis] = [i0, (i0 + 1) % n];
        w[axis] = [1.0 - frac, frac];
    }
    let v = f.values();
    if g.dim == 1 {
        w[0][0] * v[idx[0][0]] + w[0][1] * v[idx[0][1]]
    } else {
        let mut acc = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                acc += w[0][a] * w[1][b] * v[g.flat([idx[0][a], idx[1][b]])];
            }
        }
        acc
    }
}

/// Cell-count histogram normalized by `N·dxᵈ`; samples outside the domain are dropped.
pub fn empirical_density(samples: &[[f64; 2]], grid: &GridSpec) -> ScalarField {
    let mut counts = vec![0u64; grid.len()];
    for x in samples {
        let mut axes = [0usize; 2];
        let mut inside = true;
        for (axis, slot) in axes.iter_mut().enumerate().take(grid.dim) {
            match grid.locate(x[axis]) {
                Some(i) => *slot = i,
                None => inside = false,
            }
        }
        if inside {
            counts[grid.flat(axes)] += 1;
        }
    }
    let norm = 1.0 / (samples.len().max(1) as f64 * grid.cell_volume());
    ScalarField::from_vec_unchecked(grid, counts.into_iter().map(|c| c as f64 * norm).collect())
}

struct InitialSampler {
    grid: GridSpec,
    cdf: Vec<f64>,
    density: Vec<f64>,
    max: f64,
}

impl InitialSampler {
    fn new(rho0: &ScalarField) -> Result<Self> {
        let g = *rho0.grid();
        if rho0.min() < 0.0 || !(rho0.max() > 0.0) {
            return Err(Error::contract(
                "initial density must be nonnegative with positive mass",
            ));
        }
        let mut cdf = Vec::with_capacity(g.len());
        let mut acc = 0.0;
        for v in rho0.values() {
            acc += v;
            cdf.push(acc);
        }
        Ok(InitialSampler {
            grid: g,
            cdf,
            density: rho0.values().to_vec(),
            max: rho0.max(),
        })
    }

    fn uniform_in_cell(&self, cell: usize, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let c = self.grid.center(cell);
        let dx = self.grid.dx();
        let mut x = [0.0; 2];
        for (axis, xa) in x.iter_mut().enumerate().take(self.grid.dim) {
            *xa = c[axis] + (rng.random::<f64>() - 0.5) * dx;
        }
        x
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        if self.grid.dim == 1 {
            let total = *self.cdf.last().unwrap();
            let target = rng.random::<f64>() * total;
            let cell = self
                .cdf
                .partition_point(|&c| c <= target)
                .min(self.cdf.len() - 1);
            self.uniform_in_cell(cell, rng)
        } else {
            let n = self.grid.len();
            loop {
                let cell = rng.random_range(0..n);
                if rng.random::<f64>() * self.max < self.density[cell] {
                    return self.uniform_in_cell(cell, rng);
                }
            }
        }
    }
}

struct PathOutcome {
    checkpoints: Vec<[f64; 2]>,
    first_wrap: Option<usize>,
    wraps: u64,
    cost: Option<PathCost>,
}

/// Path `i` draws from ChaCha8 stream `i` of `seed`, so the ensemble does not
/// depend on scheduling.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

#[allow(clippy::too_many_arguments)]
fn run_path(
    path: usize,
    config: &McConfig,
    grid: &GridSpec,
    su: &ScalarField,
    model: &CoefficientModel,
    sampler: &InitialSampler,
    cost: Option<&CostFunctional>,
    checkpoint_steps: &[usize],
    substeps: usize,
) -> Result<PathOutcome> {
    let mut rng = path_rng(config.seed, path);
    let mut x = sampler.sample(&mut rng);
    let dim = grid.dim;
    let h = grid.dt() / substeps as f64;
    let sqrt_h = h.sqrt();
    let mut checkpoints = Vec::with_capacity(checkpoint_steps.len());
    let mut next_cp = 0;
    let mut first_wrap = None;
    let mut wraps = 0;
    let mut running = cost.map(|_| Vec::with_capacity(grid.steps + 1));
    for n in 0..=grid.steps {
        if let (Some(c), Some(r)) = (cost, running.as_mut()) {
            r.push(c.running_point(grid.time(n), x));
        }
        while next_cp < checkpoint_steps.len() && checkpoint_steps[next_cp] == n {
            checkpoints.push(x);
            next_cp += 1;
        }
        if n == grid.steps {
            break;
        }
        for sub in 0..substeps {
            let t = grid.time(n) + sub as f64 * h;
            let s = interpolate(su, x);
            let b = model.drift(t, x, s);
            let sigma = model.sigma(t, x, s);
            let mut wrapped = false;
            for axis in 0..dim {
                let xi: f64 = rng.sample(StandardNormal);
                let y = x[axis] + b[axis] * h + sigma * sqrt_h * xi;
                if !y.is_finite() {
                    return Err(Error::PathBlowup {
                        path,
                        step: n * substeps + sub,
                    });
                }
                let w = grid.wrap(y);
                wrapped |= w != y;
                x[axis] = w;
            }
            if wrapped {
                wraps += 1;
                first_wrap.get_or_insert(n + 1);
            }
        }
    }
    let cost = cost.zip(running).map(|(c, r)| PathCost {
        running: trapezoid(r.into_iter(), grid.dt()),
        terminal: interpolate(c.terminal(), x),
    });
    Ok(PathOutcome {
        checkpoints,
        first_wrap,
        wraps,
        cost,
    })
}

/// Simulate `config.paths` Euler–Maruyama paths of
/// `dX = b(t, X, Su(X)) dt + σ̃(t, X, Su(X)) dW` with periodic wrap.
/// Per-path costs are recorded when `cost` is given.
pub fn simulate_paths(
    op: &NonlocalOperator,
    u: &ControlField,
    model: &CoefficientModel,
    rho0: &ScalarField,
    cost: Option<&CostFunctional>,
    config: &McConfig,
) -> Result<McRun> {
    let grid = *rho0.grid();
    config.validate(&grid)?;
    grid.ensure_same(op.grid())?;
    if model.dim() != grid.dim {
        return Err(Error::contract("model dimension differs from the grid"));
    }
    let su = op.apply(u)?;
    let sampler = InitialSampler::new(rho0)?;
    let steps = config.checkpoint_steps(&grid);
    let substeps = config.substeps(&grid);
    let outcomes: Vec<PathOutcome> = (0..config.paths)
        .into_par_iter()
        .map(|i| {
            run_path(
                i, config, &grid, &su, model, &sampler, cost, &steps, substeps,
            )
        })
        .collect::<Result<_>>()?;

    let hist_grid = config.histogram_grid(&grid);
    let mut histograms = Vec::with_capacity(steps.len());
    let mut retained_fraction = Vec::with_capacity(steps.len());
    let mut buf = Vec::with_capacity(config.paths);
    for (k, &step) in steps.iter().enumerate() {
        buf.clear();
        buf.extend(outcomes.iter().map(|o| o.checkpoints[k]));
        histograms.push(empirical_density(&buf, &hist_grid));
        let kept = outcomes
            .iter()
            .filter(|o| o.first_wrap.is_none_or(|w| w > step))
            .count();
        retained_fraction.push(kept as f64 / config.paths as f64);
    }
    let terminal_samples = if steps.last() == Some(&grid.steps) {
        outcomes
            .iter()
            .map(|o| *o.checkpoints.last().unwrap())
            .collect()
    } else {
        Vec::new()
    };
    let path_costs = cost.map(|_| outcomes.iter().map(|o| o.cost.unwrap()).collect());
    let run = McRun {
        density: EmpiricalDensity {
            times: steps.iter().map(|&n| grid.time(n)).collect(),
            steps,
            histograms,
            samples: config.paths,
            retained_fraction,
        },
        terminal_samples,
        path_costs,
        wrap_events: outcomes.iter().map(|o| o.wraps).sum(),
        total_steps: (config.paths * grid.steps * substeps) as u64,
    };
    for w in run.warnings() {
        warn!("{w}");
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McCostEstimate {
    pub running: f64,
    pub running_se: f64,
    pub terminal: f64,
    pub terminal_se: f64,
    pub total: f64,
    pub total_se: f64,
}

fn mean_and_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Sample means and standard errors of `∫G(t, X_t)dt` and `G_T(X_T)`.
pub fn estimate_cost_mc(costs: &[PathCost]) -> Result<McCostEstimate> {
    if costs.is_empty() {
        return Err(Error::contract("no path costs recorded"));
    }
    let (running, running_se) = mean_and_se(costs.iter().map(|c| c.running));
    let (terminal, terminal_se) = mean_and_se(costs.iter().map(|c| c.terminal));
    let (total, total_se) = mean_and_se(costs.iter().map(|c| c.running + c.terminal));
    Ok(McCostEstimate {
        running,
        running_se,
        terminal,
        terminal_se,
        total,
        total_se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McComparison {
    pub l1: f64,
    pub max_cell: f64,
}

pub fn compare_mc_pde(empirical: &ScalarField, rho: &ScalarField) -> Result<McComparison> {
    empirical.grid().ensure_same(rho.grid())?;
    let diff = empirical.zip_with(rho, |a, b| (a - b).abs());
    Ok(McComparison {
        l1: crate::grid::integrate(&diff),
        max_cell: diff.max(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{CostFieldSpec, CostSpec, Penalty};
    use crate::forward::{make_initial_density, DensitySpec};
    use crate::model::ModelSpec;
    use crate::nonlocal::{KernelSpec, OmegaMask};
    use std::sync::Arc;

    struct Setup {
        grid: GridSpec,
        op: NonlocalOperator,
        u: ControlField,
        model: CoefficientModel,
        rho0: ScalarField,
    }

    fn setup(drift: f64, sigma: f64, steps: usize) -> Setup {
        let grid = GridSpec::new(1, 4.0, 128, 1.0, steps).unwrap();
        let op = NonlocalOperator::from_spec(
            &grid,
            &KernelSpec::Gaussian {
                sigma: 0.3,
                amplitude: 1.0,
                normalize: true,
                exponent: 2.0,
            },
        )
        .unwrap();
        let mask = Arc::new(OmegaMask::from_box(&grid, &[-1.0], &[1.0]).unwrap());
        let u = ControlField::constant(&mask, 1.0, 0.0).unwrap();
        let model = CoefficientModel::new(
            ModelSpec::Constant {
                drift: vec![drift],
                sigma,
            },
            &grid,
            1.0,
            None,
        )
        .unwrap();
        let rho0 = make_initial_density(
            &grid,
            &DensitySpec::Gaussian {
                mean: vec![0.0],
                variance: 0.04,
            },
        )
        .unwrap();
        Setup {
            grid,
            op,
            u,
            model,
            rho0,
        }
    }

    fn cost(grid: &GridSpec, running: f64, terminal: f64) -> CostFunctional {
        CostFunctional::new(
            CostSpec {
                running: CostFieldSpec::Constant { value: running },
                terminal: CostFieldSpec::Constant { value: terminal },
                penalty: Penalty::Quadratic { alpha: 1.0 },
            },
            grid,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn spike_histogram() {
        let g = GridSpec::new(1, 1.0, 10, 1.0, 1).unwrap();
        let samples = vec![[0.05, 0.0]; 7];
        let h = empirical_density(&samples, &g);
        let i = g.locate(0.05).unwrap();
        assert!((h.values()[i] - 1.0 / g.dx()).abs() < 1e-12);
        assert_eq!(h.values().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn histogram_mass_is_inside_fraction() {
        let g = GridSpec::new(1, 1.0, 10, 1.0, 1).unwrap();
        let samples = vec![[0.5, 0.0], [-0.2, 0.0], [3.0, 0.0], [0.9, 0.0]];
        let h = empirical_density(&samples, &g);
        assert!((crate::grid::integrate(&h) - 0.75).abs() < 1e-14);
    }

    #[test]
    fn interpolation_is_exact_for_linear_fields_inside() {
        let g = GridSpec::new(2, 2.0, 16, 1.0, 1).unwrap();
        let f = ScalarField::from_fn(&g, |x| 1.0 + 0.5 * x[0] - 0.25 * x[1]).unwrap();
        let x = [0.37, -0.81];
        assert!((interpolate(&f, x) - (1.0 + 0.5 * x[0] - 0.25 * x[1])).abs() < 1e-13);
        let c = f.grid().center(37);
        assert!((interpolate(&f, c) - f.values()[37]).abs() < 1e-13);
    }

    #[test]
    fn same_seed_same_histograms() {
        let s = setup(0.2, 0.4, 20);
        let mut cfg = McConfig::new(2000, 11);
        cfg.checkpoints = vec![0.5, 1.0];
        let a = simulate_paths(&s.op, &s.u, &s.model, &s.rho0, None, &cfg).unwrap();
        let b = simulate_paths(&s.op, &s.u, &s.model, &s.rho0, None, &cfg).unwrap();
        for (x, y) in a.density.histograms.iter().zip(&b.density.histograms) {
            assert_eq!(x.values(), y.values());
        }
        cfg.seed = 12;
        let c = simulate_paths(&s.op, &s.u, &s.model, &s.rho0, None, &cfg).unwrap();
        assert_ne!(
            a.density.histograms[1].values(),
            c.density.histograms[1].values()
        );
    }

    #[test]
    fn constant_costs_have_zero_error() {
        let s = setup(0.0, 0.3, 10);
        let cfg = McConfig::new(500, 3);
        let c = cost(&s.grid, 1.0, 0.0);
        let run = simulate_paths(&s.op, &s.u, &s.model, &s.rho0, Some(&c), &cfg).unwrap();
        let est = estimate_cost_mc(run.path_costs.as_ref().unwrap()).unwrap();
        assert!((est.running - s.grid.horizon).abs() < 1e-14);
        assert_eq!(est.running_se, 0.0);
        let c = cost(&s.grid, 0.0, 1.0);
        let run = simulate_paths(&s.op, &s.u, &s.model, &s.rho0, Some(&c), &cfg).unwrap();
        let est = estimate_cost_mc(run.path_costs.as_ref().unwrap()).unwrap();
        assert!((est.terminal - 1.0).abs() < 1e-15);
        assert_eq!(est.terminal_se, 0.0);
    }

    #[test]
    fn identical_fields_compare_to_zero() {
        let s = setup(0.0, 0.3, 10);
        let m = compare_mc_pde(&s.rho0, &s.rho0).unwrap();
        assert_eq!(m.l1, 0.0);
        let other = GridSpec::new(1, 4.0, 64, 1.0, 10).unwrap();
        assert!(compare_mc_pde(&ScalarField::zeros(&other), &s.rho0).is_err());
    }

    #[test]
    fn drift_shifts_the_mean() {
        let s = setup(0.5, 0.05, 20);
        let cfg = McConfig::new(20_000, 5);
        let run = simulate_paths(&s.op, &s.u, &s.model, &s.rho0, None, &cfg).unwrap();
        let xs: Vec<f64> = run.terminal_samples.iter().map(|x| x[0]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 0.5).abs() <= 3.0 * (var / n).sqrt(), "mean {mean}");
    }

    #[test]
    fn invalid_config_rejected() {
        let g = GridSpec::new(1, 1.0, 10, 1.0, 1).unwrap();
        assert!(McConfig::new(0, 1).validate(&g).is_err());
        let mut c = McConfig::new(10, 1);
        c.dt = Some(-1.0);
        assert!(c.validate(&g).unwrap_err().is_config());
    }
}

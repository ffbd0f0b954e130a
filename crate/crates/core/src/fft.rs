//! Periodic FFT helpers over the grid layout. Plans are rebuilt per call so
//! concurrent use never shares mutable state.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::grid::GridSpec;

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
}

fn transform(grid: &GridSpec, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
    let n = grid.cells;
    if grid.dim == 1 {
        fft.process(data);
        return;
    }
    for row in data.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            column[i] = data[i * n + j];
        }
        fft.process(&mut column);
        for i in 0..n {
            data[i * n + j] = column[i];
        }
    }
}

pub(crate) fn forward(grid: &GridSpec, values: &[f64]) -> Vec<Complex64> {
    let (fwd, _) = plans(grid.cells);
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(grid, &mut data, &fwd);
    data
}

/// Normalized inverse transform, returning the real part.
pub(crate) fn inverse_real(grid: &GridSpec, mut data: Vec<Complex64>) -> Vec<f64> {
    let (_, inv) = plans(grid.cells);
    transform(grid, &mut data, &inv);
    let scale = 1.0 / grid.len() as f64;
    data.iter().map(|c| c.re * scale).collect()
}

/// Eigenvalues of `-Δ_h` on the periodic grid, in FFT order.
pub(crate) fn neg_laplacian_symbol(grid: &GridSpec) -> Vec<f64> {
    let n = grid.cells;
    let dx2 = grid.dx() * grid.dx();
    let axis: Vec<f64> = (0..n)
        .map(|k| (2.0 - 2.0 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()) / dx2)
        .collect();
    (0..grid.len())
        .map(|idx| {
            let a = grid.axes(idx);
            (0..grid.dim).map(|k| axis[a[k]]).sum()
        })
        .collect()
}

/// `out_i = sum_j kernel_{i-j} u_j * dx^d` with wrapped displacement indexing.
pub(crate) fn circular_convolve(grid: &GridSpec, kernel: &[f64], u: &[f64]) -> Vec<f64> {
    let kh = forward(grid, kernel);
    let uh = forward(grid, u);
    let prod = kh.iter().zip(&uh).map(|(a, b)| a * b).collect();
    let w = grid.cell_volume();
    inverse_real(grid, prod)
        .into_iter()
        .map(|v| v * w)
        .collect()
}

/// `out_j = sum_i kernel_{i-j} f_i * dx^d`, the transpose of [`circular_convolve`].
pub(crate) fn circular_correlate(grid: &GridSpec, kernel: &[f64], f: &[f64]) -> Vec<f64> {
    let kh = forward(grid, kernel);
    let fh = forward(grid, f);
    let prod = kh.iter().zip(&fh).map(|(a, b)| a.conj() * b).collect();
    let w = grid.cell_volume();
    inverse_real(grid, prod)
        .into_iter()
        .map(|v| v * w)
        .collect()
}

//! Fixed sinusoidal embeddings for grid positions and flow timesteps.

use ndarray::Array2;

use super::Real;

fn frequencies(n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| (-(10_000f64).ln() * i as f64 / n as f64).exp())
}

/// 2D sin-cos table of shape `(grid_h * grid_w, dim)` in row-major cell order.
///
/// The first half of the channels encodes the row index, the second half the
/// column index. `dim` must be a multiple of 4.
pub fn sincos_2d<T: Real>(grid_h: usize, grid_w: usize, dim: usize) -> Array2<T> {
    assert!(dim.is_multiple_of(4), "2D position embedding needs dim % 4 == 0, got {dim}");
    let quarter = dim / 4;
    let freqs: Vec<f64> = frequencies(quarter).collect();
    let mut table = Array2::zeros((grid_h * grid_w, dim));
    for i in 0..grid_h {
        for j in 0..grid_w {
            let mut row = table.row_mut(i * grid_w + j);
            for (k, &f) in freqs.iter().enumerate() {
                let (a, b) = (i as f64 * f, j as f64 * f);
                row[k] = T::lit(a.sin());
                row[quarter + k] = T::lit(a.cos());
                row[2 * quarter + k] = T::lit(b.sin());
                row[3 * quarter + k] = T::lit(b.cos());
            }
        }
    }
    table
}

/// Timestep embedding `[cos(1000 t f_k), sin(1000 t f_k)]`, one row per entry of `t`.
pub fn timestep_embedding<T: Real>(t: &[T], dim: usize) -> Array2<T> {
    assert!(dim.is_multiple_of(2));
    let half = dim / 2;
    let freqs: Vec<f64> = frequencies(half).collect();
    let mut out = Array2::zeros((t.len(), dim));
    for (mut row, &ti) in out.rows_mut().into_iter().zip(t) {
        let ti = ti.as_f64() * 1000.0;
        for (k, &f) in freqs.iter().enumerate() {
            row[k] = T::lit((ti * f).cos());
            row[half + k] = T::lit((ti * f).sin());
        }
    }
    out
}

//! Composite Simpson quadrature on uniform grids.

use std::ops::{Add, Mul};

/// Quadrature weights for `n_intervals` uniform intervals of width `h`.
///
/// Even interval counts use composite Simpson; odd counts use Simpson on the
/// leading intervals and the 3/8 rule on the last three. A single interval
/// falls back to the trapezoid rule. All weights are positive.
pub fn simpson_weights(n_intervals: usize, h: f64) -> Vec<f64> {
    let n = n_intervals;
    let mut w = vec![0.0; n + 1];
    match n {
        0 => {}
        1 => {
            w[0] = 0.5 * h;
            w[1] = 0.5 * h;
        }
        _ => {
            let simpson_end = if n % 2 == 0 { n } else { n - 3 };
            let mut i = 0;
            while i < simpson_end {
                w[i] += h / 3.0;
                w[i + 1] += 4.0 * h / 3.0;
                w[i + 2] += h / 3.0;
                i += 2;
            }
            if simpson_end < n {
                let s = simpson_end;
                w[s] += 3.0 * h / 8.0;
                w[s + 1] += 9.0 * h / 8.0;
                w[s + 2] += 9.0 * h / 8.0;
                w[s + 3] += 3.0 * h / 8.0;
            }
        }
    }
    w
}

/// Integral of uniformly spaced samples. Summation order is fixed (left to
/// right), so results are bit-reproducible.
pub fn simpson<T>(values: &[T], h: f64) -> T
where
    T: Copy + Add<Output = T> + Mul<f64, Output = T> + Default,
{
    if values.len() < 2 {
        return T::default();
    }
    let w = simpson_weights(values.len() - 1, h);
    values
        .iter()
        .zip(w.iter())
        .fold(T::default(), |acc, (v, wi)| acc + *v * *wi)
}

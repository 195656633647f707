//! Deterministic numerics shared by every other module.
//!
//! All arithmetic is `f64`. Transcendentals come from `libm`, so results are
//! identical across targets and independent of the host C library.

mod matrix;
mod prob;
mod rng;
mod spectral;

use alloc::vec::Vec;

pub use matrix::{distance, dot, norm, Matrix};
pub use prob::{cosine_similarity, log_softmax, softmax_temp, ProbVector, SIMPLEX_TOL};
pub use rng::{sample_beta, SeededRng};
pub use spectral::{
    singular_values, smallest_eigenvalue, symmetric_eigen, SymmetricEigen, MAX_SWEEPS,
    SYMMETRY_TOL,
};

use crate::error::{invalid, Error, Result};
use crate::float::sqrt;

/// Central-difference gradient `(f(x + h e_i) − f(x − h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(invalid!("finite-difference step must be positive, got {h}"));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NumericFailure(alloc::format!(
                "function not finite near coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = distance(a, b);
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Ranks with ties given their average rank (1-based).
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = alloc::vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid!("correlation needs two equal-length samples of size >= 2"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::DegenerateInput("correlation of a constant sample".into()));
    }
    Ok(cov / sqrt(va * vb))
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&ranks(a), &ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|w| w[0] * w[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|w| 3.0 * w[0], &[0.7], 1e-5).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-9);
        assert!(finite_diff_grad(|w| w[0], &[0.0], 0.0).is_err());
        assert!(matches!(
            finite_diff_grad(|w| if w[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-6),
            Err(Error::NumericFailure(_))
        ));
    }

    #[test]
    fn spearman_handles_ties_and_monotone() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), alloc::vec![2.5, 1.0, 2.5]);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        let r = spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-15);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}

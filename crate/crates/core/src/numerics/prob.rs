use alloc::vec::Vec;
use core::ops::Deref;

use crate::error::{invalid, Error, Result};
use crate::float::{exp, ln};

/// Tolerance on `Σ p_k = 1` accepted by [`ProbVector::new`].
pub const SIMPLEX_TOL: f64 = 1e-12;

/// A probability vector: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid!("empty probability vector"));
        }
        if entries.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid!("probability entries must be finite and nonnegative"));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid!("probability entries sum to {sum}, not 1"));
        }
        Ok(Self(entries))
    }

    /// Scales nonnegative weights to sum to one.
    pub fn normalize(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid!("weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::DegenerateInput("weights sum to zero".into()));
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(invalid!("one-hot index {index} out of range for length {len}"));
        }
        let mut v = alloc::vec![0.0; len];
        v[index] = 1.0;
        Ok(Self(v))
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(invalid!("empty probability vector"));
        }
        Ok(Self(alloc::vec![1.0 / len as f64; len]))
    }

    /// `w·a + (1-w)·b` for `w ∈ [0, 1]`.
    pub fn mix(a: &ProbVector, b: &ProbVector, w: f64) -> Result<Self> {
        if a.len() != b.len() {
            return Err(invalid!("cannot mix vectors of length {} and {}", a.len(), b.len()));
        }
        if !(0.0..=1.0).contains(&w) {
            return Err(invalid!("mixing weight {w} outside [0, 1]"));
        }
        Self::new(a.iter().zip(b.iter()).map(|(x, y)| w * x + (1.0 - w) * y).collect())
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|p| **p > 0.0).map(|p| p * ln(*p)).sum::<f64>()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `exp(s_i/τ) / Σ_l exp(s_l/τ)` with max-subtraction.
pub fn softmax_temp(scores: &[f64], temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(invalid!("temperature must be positive, got {temperature}"));
    }
    if scores.is_empty() {
        return Err(invalid!("softmax of an empty vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid!("softmax scores must be finite"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|s| exp((s - max) / temperature)).collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    Ok(ProbVector(weights))
}

/// `log softmax(scores)` computed as `s - logsumexp(s)`.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + ln(scores.iter().map(|s| exp(s - max)).sum::<f64>());
    scores.iter().map(|s| s - lse).collect()
}

/// `⟨a, b⟩ / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid!("cosine of vectors with lengths {} and {}", a.len(), b.len()));
    }
    let na = super::norm(a);
    let nb = super::norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine similarity of a zero vector".into()));
    }
    Ok((super::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        assert!(close(&softmax_temp(&[1.0, 1.0], 0.2).unwrap(), &[0.5, 0.5], 1e-15));
        let e = core::f64::consts::E;
        let p = softmax_temp(&[1.0, 0.0], 1.0).unwrap();
        assert!(close(&p, &[e / (1.0 + e), 1.0 / (1.0 + e)], 1e-12));
        assert!(close(&p, &[0.7311, 0.2689], 1e-4));
        let p = softmax_temp(&[1.0, 0.0], 0.5).unwrap();
        assert!(close(&p, &[0.8808, 0.1192], 1e-4));
    }

    #[test]
    fn softmax_errors() {
        assert!(softmax_temp(&[1.0], 0.0).is_err());
        assert!(softmax_temp(&[1.0], -1.0).is_err());
        assert!(softmax_temp(&[], 1.0).is_err());
    }

    #[test]
    fn softmax_survives_huge_scores() {
        let p = softmax_temp(&[1e4, 0.0, -1e4], 0.01).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        let p = ProbVector::normalize(vec![1.0, 3.0]).unwrap();
        assert_eq!(p.as_slice(), &[0.25, 0.75]);
        assert_eq!(p.argmax(), 1);
    }
}

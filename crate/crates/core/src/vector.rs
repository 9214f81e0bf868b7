//! Dense parameter vectors and the small amount of linear algebra the
//! optimizer and diagnostic need.
//!
//! All arithmetic is in `f64`: the convergence signal of interest is an
//! inner product of near-cancelling stochastic gradients, and single
//! precision accumulation noise is on the same scale as that signal.
//! Long mixed-sign sums go through [`KahanSum`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fixed-dimension vector of finite `f64` entries (a parameter point θ,
/// a gradient, or an optimum θ⋆).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Wrap `values`, rejecting empty vectors and non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(
                "parameter vector must have dimension >= 1".into(),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::divergence(
                0,
                format!("non-finite entry {} at index {i}", values[i]),
            ));
        }
        Ok(Self { values })
    }

    /// The zero vector of dimension `p`.
    pub fn zeros(p: usize) -> Self {
        Self {
            values: vec![0.0; p],
        }
    }

    /// Build entrywise from a function of the index.
    pub fn from_fn(p: usize, f: impl FnMut(usize) -> f64) -> Self {
        Self {
            values: (0..p).map(f).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    /// Squared Euclidean norm ‖v‖².
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Euclidean norm ‖v‖.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Squared distance ‖self − other‖².
    pub fn dist_sq(&self, other: &ParamVector) -> Result<f64> {
        check_dims(self, other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Entrywise sum self + other.
    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        check_dims(self, other)?;
        Ok(ParamVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Entrywise difference self − other.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        check_dims(self, other)?;
        Ok(ParamVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// Scalar multiple c·self.
    pub fn scale(&self, c: f64) -> ParamVector {
        ParamVector {
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

fn check_dims(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// Inner product Σᵢ aᵢbᵢ.
pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x * y)
        .sum())
}

/// Cosine similarity dot(a,b)/(‖a‖‖b‖), clamped to [−1, 1] against
/// floating-point rounding. Zero-norm inputs are rejected.
pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let c = dot(a, b)? / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

/// Compensated (Kahan–Babuška) running sum for long sequences of small
/// mixed-sign terms, where naive accumulation loses the low-order bits
/// that carry the convergence signal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one term.
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    /// Current compensated total.
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }

    /// Reset to zero.
    pub fn reset(&mut self) {
        self.sum = 0.0;
        self.compensation = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn dot_basic_cases() {
        assert_eq!(dot(&pv(&[1.0, 0.0]), &pv(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(dot(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(dot(&pv(&[2.0, -3.0]), &pv(&[-1.0, 4.0])).unwrap(), -14.0);
    }

    #[test]
    fn dot_rejects_dimension_mismatch() {
        let e = dot(&pv(&[1.0]), &pv(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(
            e,
            Error::DimensionMismatch {
                expected: 1,
                got: 2
            }
        ));
    }

    #[test]
    fn cosine_parallel_antiparallel_orthogonal() {
        assert_eq!(
            cosine_similarity(&pv(&[1.0, 0.0]), &pv(&[2.0, 0.0])).unwrap(),
            1.0
        );
        assert_eq!(
            cosine_similarity(&pv(&[1.0, 0.0]), &pv(&[-3.0, 0.0])).unwrap(),
            -1.0
        );
        assert_eq!(
            cosine_similarity(&pv(&[1.0, 1.0]), &pv(&[1.0, -1.0])).unwrap(),
            0.0
        );
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let e = cosine_similarity(&pv(&[0.0, 0.0]), &pv(&[1.0, 0.0])).unwrap_err();
        assert!(matches!(e, Error::DegenerateInput(_)));
    }

    #[test]
    fn cosine_stays_clamped_under_rounding() {
        let a = pv(&[1e-8; 50]);
        let c = cosine_similarity(&a, &a).unwrap();
        assert!(c <= 1.0);
        assert!(c >= 0.999_999_999);
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(ParamVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParamVector::new(vec![f64::INFINITY]).is_err());
        assert!(ParamVector::new(vec![]).is_err());
    }

    #[test]
    fn kahan_recovers_small_terms() {
        // 1.0 followed by 1e16 copies of 1e-16 sums to ~2.0 compensated,
        // while naive summation would stay at 1.0. Use a shorter proxy.
        let mut k = KahanSum::new();
        k.add(1.0);
        for _ in 0..10_000 {
            k.add(1e-16);
        }
        let naive: f64 = std::iter::once(1.0)
            .chain(std::iter::repeat(1e-16).take(10_000))
            .sum();
        assert_eq!(naive, 1.0);
        assert!((k.value() - (1.0 + 1e-12)).abs() < 1e-15);
    }

    #[test]
    fn dist_sq_matches_sub_norm() {
        let a = pv(&[1.0, 2.0, 3.0]);
        let b = pv(&[-1.0, 0.5, 3.0]);
        let d1 = a.dist_sq(&b).unwrap();
        let d2 = a.sub(&b).unwrap().norm_sq();
        assert!((d1 - d2).abs() < 1e-15);
    }
}

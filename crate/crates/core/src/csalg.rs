//! Closed-form algebra for the compound-symmetric cluster covariance
//! Σ = σ²I_N + τ²1_N1_Nᵀ.
//!
//! Σ has one eigenvalue σ² + Nτ² (eigenvector 1_N) and N−1 eigenvalues σ²,
//! so its inverse is σ⁻²(I_N − τ²/(σ²+Nτ²)·1_N1_Nᵀ) by the Woodbury
//! identity. Everything here runs in O(N) without materializing the N×N
//! matrix.

use crate::error::{Error, Result};

/// Variance components (σ², τ²) of a compound-symmetric covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompoundSymmetry {
    sigma2: f64,
    tau2: f64,
}

impl CompoundSymmetry {
    /// Requires σ² > 0 and τ² ≥ 0.
    pub fn new(sigma2: f64, tau2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::Invalid(format!(
                "residual variance must be positive and finite, got {sigma2}"
            )));
        }
        if !(tau2 >= 0.0) || !tau2.is_finite() {
            return Err(Error::Invalid(format!(
                "random-intercept variance must be nonnegative and finite, got {tau2}"
            )));
        }
        Ok(Self { sigma2, tau2 })
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn tau2(&self) -> f64 {
        self.tau2
    }

    /// Intracluster correlation τ²/(τ²+σ²).
    pub fn icc(&self) -> f64 {
        self.tau2 / (self.tau2 + self.sigma2)
    }

    /// The 1ᵀΣ⁻¹1 quadratic form, N/(σ²+Nτ²).
    pub fn ones_quadform(&self, n: usize) -> f64 {
        let nf = n as f64;
        nf / (self.sigma2 + nf * self.tau2)
    }

    /// Off-diagonal Woodbury coefficient τ²/(σ²(σ²+Nτ²)).
    fn rank_one_coeff(&self, n: usize) -> f64 {
        self.tau2 / (self.sigma2 * (self.sigma2 + n as f64 * self.tau2))
    }
}

/// Applies Σ⁻¹ to a vector in O(N).
pub fn cs_inverse_apply(cs: &CompoundSymmetry, v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "vector must have length >= 1");
    let b = cs.rank_one_coeff(v.len());
    let s: f64 = v.iter().sum();
    v.iter().map(|&x| x / cs.sigma2() - b * s).collect()
}

/// log det(σ²I_N + τ²1_N1_Nᵀ) = (N−1)·log σ² + log(σ²+Nτ²).
pub fn cs_logdet(cs: &CompoundSymmetry, n: usize) -> f64 {
    assert!(n >= 1, "dimension must be >= 1");
    (n as f64 - 1.0) * cs.sigma2().ln() + (cs.sigma2() + n as f64 * cs.tau2()).ln()
}

/// uᵀΣ⁻¹w in O(N); symmetric in (u, w).
pub fn cs_quadform(cs: &CompoundSymmetry, u: &[f64], w: &[f64]) -> f64 {
    assert_eq!(u.len(), w.len(), "vectors must have equal length");
    assert!(!u.is_empty(), "vectors must have length >= 1");
    let b = cs.rank_one_coeff(u.len());
    let dot: f64 = u.iter().zip(w).map(|(&a, &c)| a * c).sum();
    let su: f64 = u.iter().sum();
    let sw: f64 = w.iter().sum();
    dot / cs.sigma2() - b * su * sw
}

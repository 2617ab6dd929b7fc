//! Variance estimation for the treatment-effect estimate: model-based,
//! sandwich, influence-function plug-in, and the analytic balanced-design
//! formulas.

use nalgebra::{DMatrix, DVector};
use libm::erfc;

use crate::csalg::cs_inverse_apply;
use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::mmfit::{build_design, EstimationMode, MixedFit, SuffStats};

/// Which variance estimator produced a standard error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMethod {
    ModelBased,
    Sandwich,
    ClusterOls,
}

impl std::fmt::Display for VarianceMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VarianceMethod::ModelBased => write!(f, "model-based"),
            VarianceMethod::Sandwich => write!(f, "sandwich"),
            VarianceMethod::ClusterOls => write!(f, "cluster-OLS"),
        }
    }
}

/// A point estimate with its normal-approximation confidence interval.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub delta_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub variance_method: VarianceMethod,
    pub estimator_label: String,
}

impl EstimateReport {
    /// The CI is always delta_hat ± z·se with the stored se, so the bounds
    /// and the se cannot drift apart.
    pub fn new(
        delta_hat: f64,
        se: f64,
        level: f64,
        variance_method: VarianceMethod,
        estimator_label: impl Into<String>,
    ) -> Self {
        let (ci_low, ci_high) = confidence_interval(delta_hat, se, level);
        Self {
            delta_hat,
            se,
            ci_low,
            ci_high,
            level,
            variance_method,
            estimator_label: estimator_label.into(),
        }
    }
}

/// Per-cluster influence values and the plug-in asymptotic variance.
#[derive(Debug, Clone)]
pub struct InfluenceDiagnostics {
    /// One influence value per cluster, in dataset order.
    pub if_values: Vec<f64>,
    /// Plug-in estimate of the asymptotic variance of √m(Δ̂ − Δ*).
    pub v_hat: f64,
    /// Estimate of the sum-weights scale 1ₙᵀE[V]1ₙ.
    pub denom_hat: f64,
}

fn df_factor(m: usize, p: usize) -> Result<f64> {
    if m <= p + 2 {
        return Err(Error::DegreesOfFreedom { m, p });
    }
    Ok(m as f64 / (m - p - 2) as f64)
}

fn gram_inverse(fit: &MixedFit, data: &TrialDataset) -> Result<DMatrix<f64>> {
    let ss = SuffStats::new(data);
    let gram = ss.gram(&fit.components());
    nalgebra::Cholesky::new(gram)
        .map(|c| c.inverse())
        .ok_or(Error::SingularDesign)
}

/// Model-based covariance (Σᵢ Q_iᵀΣ̂_i⁻¹Q_i)⁻¹ with the degrees-of-freedom
/// inflation Σ̂_i = m/(m−p−2)·Σ_i. Returns the full matrix and its (Δ̂, Δ̂)
/// entry.
///
/// The inflation compensates for the downward bias of the ML variance
/// components; REML components are already bias-corrected, so REML fits
/// use the plain inverse Gram (m ≤ p+2 is still rejected).
pub fn model_based_variance(
    fit: &MixedFit,
    data: &TrialDataset,
) -> Result<(DMatrix<f64>, f64)> {
    let factor = match fit.mode {
        EstimationMode::Ml => df_factor(data.m(), fit.n_params_p)?,
        EstimationMode::Reml => {
            df_factor(data.m(), fit.n_params_p)?;
            1.0
        }
    };
    let cov = gram_inverse(fit, data)? * factor;
    let var = cov[(1, 1)];
    Ok((cov, var))
}

/// Per-cluster weighted score contributions Q_iᵀΣ_i⁻¹r_i at the fitted
/// components (no df inflation).
fn cluster_scores(fit: &MixedFit, data: &TrialDataset) -> Vec<DVector<f64>> {
    let p = fit.n_params_p;
    let cs = fit.components();
    let beta = DVector::from_column_slice(&fit.beta);
    data.clusters()
        .iter()
        .map(|rec| {
            let q = build_design(rec, p);
            let y = DVector::from_column_slice(&rec.outcomes);
            let r = y - &q * &beta;
            let wr = DVector::from_vec(cs_inverse_apply(&cs, r.as_slice()));
            q.transpose() * wr
        })
        .collect()
}

/// Sandwich covariance bread·meat·bread with bread = (Σᵢ Q_iᵀΣ̂_i⁻¹Q_i)⁻¹
/// and meat the per-cluster residual outer products. The m/(m−p−2) factors
/// inside Σ̂ cancel between bread and meat.
pub fn sandwich_variance(
    fit: &MixedFit,
    data: &TrialDataset,
) -> Result<(DMatrix<f64>, f64)> {
    df_factor(data.m(), fit.n_params_p)?;
    let ginv = gram_inverse(fit, data)?;
    let d = fit.n_params_p + 2;
    let mut meat = DMatrix::zeros(d, d);
    for t in cluster_scores(fit, data) {
        meat += &t * t.transpose();
    }
    let cov = &ginv * meat * &ginv;
    let var = cov[(1, 1)];
    Ok((cov, var))
}

/// Per-cluster influence values
/// IF_i = (A_i−π)/(π(1−π)·denom)·1ᵀΣ_i⁻¹r_i with
/// denom = m⁻¹Σᵢ N_i/(σ̂²+N_iτ̂²).
pub fn influence_values(
    fit: &MixedFit,
    data: &TrialDataset,
    pi: f64,
) -> Result<InfluenceDiagnostics> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::InvalidPi(pi));
    }
    let cs = fit.components();
    let m = data.m() as f64;
    let denom_hat: f64 = data
        .clusters()
        .iter()
        .map(|c| cs.ones_quadform(c.size()))
        .sum::<f64>()
        / m;

    let beta = DVector::from_column_slice(&fit.beta);
    let p = fit.n_params_p;
    let if_values: Vec<f64> = data
        .clusters()
        .iter()
        .map(|rec| {
            let q = build_design(rec, p);
            let y = DVector::from_column_slice(&rec.outcomes);
            let r = y - &q * &beta;
            let resid_sum: f64 = r.iter().sum();
            let weighted = resid_sum / (cs.sigma2() + rec.size() as f64 * cs.tau2());
            (rec.treatment as f64 - pi) / (pi * (1.0 - pi) * denom_hat) * weighted
        })
        .collect();
    let v_hat = if_values.iter().map(|x| x * x).sum::<f64>() / m;
    Ok(InfluenceDiagnostics { if_values, v_hat, denom_hat })
}

/// Asymptotic variance of √m(Δ̂−Δ*) at π = 0.5 under correct specification
/// with common cluster size ñ: 4(σ²+ñτ²)/ñ.
pub fn balanced_true_variance(sigma2: f64, tau2: f64, n_tilde: usize) -> f64 {
    assert!(n_tilde >= 1 && sigma2 > 0.0 && tau2 >= 0.0);
    4.0 * (sigma2 + n_tilde as f64 * tau2) / n_tilde as f64
}

/// Cluster-level ANCOVA asymptotic variance 4·E[(σ²+Nτ²)/N] for a finite
/// discrete cluster-size distribution given as (size, weight) pairs.
pub fn cluster_level_true_variance(
    sigma2: f64,
    tau2: f64,
    size_distribution: &[(usize, f64)],
) -> f64 {
    assert!(!size_distribution.is_empty());
    let total: f64 = size_distribution.iter().map(|&(_, w)| w).sum();
    assert!(total > 0.0);
    4.0 * size_distribution
        .iter()
        .map(|&(n, w)| {
            assert!(n >= 1 && w >= 0.0);
            w / total * (sigma2 + n as f64 * tau2) / n as f64
        })
        .sum::<f64>()
}

/// Standard-normal quantile: Acklam's rational approximation refined by a
/// Halley step against the error function.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile argument must lie in (0,1)");

    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Halley refinement against Φ computed from erfc.
    let halley = |x: f64| {
        let cdf = 0.5 * erfc(-x / std::f64::consts::SQRT_2);
        let e = cdf - p;
        let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
        x - u / (1.0 + x * u / 2.0)
    };
    halley(halley(x))
}

/// delta_hat ± z·se at the (1+level)/2 standard-normal quantile.
pub fn confidence_interval(delta_hat: f64, se: f64, level: f64) -> (f64, f64) {
    assert!(se >= 0.0, "standard error must be nonnegative");
    assert!(level > 0.0 && level < 1.0, "level must lie in (0,1)");
    let z = normal_quantile((1.0 + level) / 2.0);
    (delta_hat - z * se, delta_hat + z * se)
}

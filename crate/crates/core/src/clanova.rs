//! Cluster-level ANCOVA: ordinary least squares on cluster means, its
//! classical and HC0 variance estimates, and the projection-gap diagnostic
//! comparing cluster-level and pooled individual-level covariate slopes.

use nalgebra::{DMatrix, DVector};

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::variance::{EstimateReport, VarianceMethod};

/// Pairwise (compensated) summation; accumulation error stays ulp-scale
/// even for long inputs.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// One row per cluster: exact means of outcomes and covariates.
#[derive(Debug, Clone)]
pub struct ClusterMeansRow {
    pub ybar: f64,
    pub treatment: u8,
    pub xbar: Vec<f64>,
    pub n_i: usize,
}

#[derive(Debug, Clone)]
pub struct ClusterMeansTable {
    pub rows: Vec<ClusterMeansRow>,
    pub p: usize,
}

/// Collapses a dataset to cluster means, preserving cluster order.
pub fn aggregate(data: &TrialDataset) -> ClusterMeansTable {
    let p = data.p();
    let rows = data
        .clusters()
        .iter()
        .map(|rec| {
            let n = rec.size();
            let ybar = pairwise_sum(&rec.outcomes) / n as f64;
            let xbar = (0..p)
                .map(|k| {
                    let col: Vec<f64> = (0..n).map(|j| rec.covariate(j, k, p)).collect();
                    pairwise_sum(&col) / n as f64
                })
                .collect();
            ClusterMeansRow { ybar, treatment: rec.treatment, xbar, n_i: n }
        })
        .collect();
    ClusterMeansTable { rows, p }
}

/// Classical s²(ZᵀZ)⁻¹ with df m−p−2, or heteroskedasticity-robust HC0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterVarianceMode {
    Classical,
    Robust,
}

/// Result of the cluster-level ANCOVA OLS fit.
#[derive(Debug, Clone)]
pub struct ClusterAncovaFit {
    pub report: EstimateReport,
    /// (α₀, α_A, α_X̄...).
    pub coefficients: Vec<f64>,
}

/// OLS of cluster-mean outcomes on (1, A, X̄); Δ̂^(cl) = α̂_A.
pub fn fit_cluster_ancova(
    data: &TrialDataset,
    variance_mode: ClusterVarianceMode,
    level: f64,
) -> Result<ClusterAncovaFit> {
    let table = aggregate(data);
    let m = table.rows.len();
    let p = table.p;
    let d = p + 2;
    if m <= d {
        return Err(Error::DegreesOfFreedom { m, p });
    }

    let mut z = DMatrix::zeros(m, d);
    let mut y = DVector::zeros(m);
    for (i, row) in table.rows.iter().enumerate() {
        z[(i, 0)] = 1.0;
        z[(i, 1)] = row.treatment as f64;
        for k in 0..p {
            z[(i, 2 + k)] = row.xbar[k];
        }
        y[i] = row.ybar;
    }

    let ztz = z.transpose() * &z;
    let chol = nalgebra::Cholesky::new(ztz).ok_or(Error::SingularDesign)?;
    let alpha = chol.solve(&(z.transpose() * &y));
    let resid = &y - &z * &alpha;

    let cov = match variance_mode {
        ClusterVarianceMode::Classical => {
            let s2 = resid.dot(&resid) / (m - d) as f64;
            chol.inverse() * s2
        }
        ClusterVarianceMode::Robust => {
            let inv = chol.inverse();
            let mut middle = DMatrix::zeros(d, d);
            for i in 0..m {
                let zi = z.row(i).transpose();
                middle += &zi * zi.transpose() * (resid[i] * resid[i]);
            }
            &inv * middle * &inv
        }
    };

    let se = cov[(1, 1)].max(0.0).sqrt();
    let label = match variance_mode {
        ClusterVarianceMode::Classical => "cluster-level ANCOVA (classical)",
        ClusterVarianceMode::Robust => "cluster-level ANCOVA (HC0)",
    };
    Ok(ClusterAncovaFit {
        report: EstimateReport::new(alpha[1], se, level, VarianceMethod::ClusterOls, label),
        coefficients: alpha.iter().copied().collect(),
    })
}

fn centered_cov(
    xs: &[Vec<f64>],
    ys: &[f64],
    p: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = xs.len() as f64;
    let mut xmean = vec![0.0; p];
    for x in xs {
        for k in 0..p {
            xmean[k] += x[k] / n;
        }
    }
    let ymean: f64 = ys.iter().sum::<f64>() / n;
    let mut var = DMatrix::zeros(p, p);
    let mut cov = DVector::zeros(p);
    for (x, &yv) in xs.iter().zip(ys) {
        for k in 0..p {
            let dk = x[k] - xmean[k];
            cov[k] += dk * (yv - ymean) / n;
            for l in 0..p {
                var[(k, l)] += dk * (x[l] - xmean[l]) / n;
            }
        }
    }
    (var, cov)
}

/// Difference between the cluster-mean projection coefficients
/// Var(X̄°)⁻¹Cov(X̄°, Ȳ°) and the pooled individual-level coefficients
/// Var(X)⁻¹Cov(X, Y). Near zero indicates the equal-asymptotic-variance
/// regime of the cluster-level comparison.
pub fn thm2_gap(data: &TrialDataset) -> Result<Vec<f64>> {
    let p = data.p();
    if p == 0 {
        return Err(Error::Invalid("projection gap requires p >= 1 covariates".into()));
    }
    if data.m() < p + 2 {
        return Err(Error::DegreesOfFreedom { m: data.m(), p });
    }

    let table = aggregate(data);
    let cl_x: Vec<Vec<f64>> = table.rows.iter().map(|r| r.xbar.clone()).collect();
    let cl_y: Vec<f64> = table.rows.iter().map(|r| r.ybar).collect();
    let (cl_var, cl_cov) = centered_cov(&cl_x, &cl_y, p);

    let mut ind_x = Vec::with_capacity(data.total_observations());
    let mut ind_y = Vec::with_capacity(data.total_observations());
    for rec in data.clusters() {
        for j in 0..rec.size() {
            ind_x.push((0..p).map(|k| rec.covariate(j, k, p)).collect::<Vec<f64>>());
            ind_y.push(rec.outcomes[j]);
        }
    }
    let (ind_var, ind_cov) = centered_cov(&ind_x, &ind_y, p);

    let cl_coef = nalgebra::Cholesky::new(cl_var)
        .ok_or(Error::SingularCovariance)?
        .solve(&cl_cov);
    let ind_coef = nalgebra::Cholesky::new(ind_var)
        .ok_or(Error::SingularCovariance)?
        .solve(&ind_cov);

    Ok((0..p).map(|k| cl_coef[k] - ind_coef[k]).collect())
}

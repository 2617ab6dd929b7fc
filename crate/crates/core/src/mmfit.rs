//! Maximum likelihood and REML fitting of the mixed-model ANCOVA with a
//! cluster random intercept.
//!
//! The marginal model for cluster i is Y_i ~ N(Q_i β, σ²I + τ²11ᵀ) with
//! Q_i = (1, A_i·1, X_i). β is profiled out by generalized least squares at
//! each candidate (σ², τ²); the two variance components are searched by
//! Nelder-Mead over (log σ², logit ρ) with ρ = τ²/(τ²+σ²), followed by an
//! exact check of the τ² = 0 boundary.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::csalg::CompoundSymmetry;
use crate::data::{ClusterRecord, TrialDataset};
use crate::error::{Error, Result};
use crate::optim::nelder_mead;

/// ML maximizes the marginal likelihood; REML additionally penalizes by
/// ½·log det of the weighted Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimationMode {
    Ml,
    Reml,
}

impl std::fmt::Display for EstimationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimationMode::Ml => write!(f, "ML"),
            EstimationMode::Reml => write!(f, "REML"),
        }
    }
}

/// Optimizer knobs for [`fit`].
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Simplex diameter tolerance in (log σ², logit ρ) space.
    pub simplex_tol: f64,
    /// Objective spread tolerance.
    pub objective_tol: f64,
    /// σ² floor as a multiple of the sample variance of Y.
    pub sigma2_floor_scale: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            simplex_tol: 1e-8,
            objective_tol: 1e-10,
            sigma2_floor_scale: 1e-10,
        }
    }
}

/// A fitted mixed-model ANCOVA.
#[derive(Debug, Clone)]
pub struct MixedFit {
    /// Coefficients ordered (β₀, β_A, β_X...).
    pub beta: Vec<f64>,
    pub sigma2_hat: f64,
    pub tau2_hat: f64,
    /// Maximized (restricted) profiled log-likelihood, constant fixed to
    /// −(Σ N_i/2)·log 2π.
    pub loglik: f64,
    pub mode: EstimationMode,
    pub converged: bool,
    /// Simplex iterations spent in the variance-component search.
    pub n_iterations: usize,
    /// Covariate count p used for degrees-of-freedom adjustments.
    pub n_params_p: usize,
    /// Set when the data contain clusters of size 1.
    pub singleton_warning: bool,
}

impl MixedFit {
    /// The treatment-effect estimate Δ̂ = β̂_A.
    pub fn delta_hat(&self) -> f64 {
        self.beta[1]
    }

    pub fn components(&self) -> CompoundSymmetry {
        CompoundSymmetry::new(self.sigma2_hat, self.tau2_hat)
            .expect("fitted components satisfy the invariants")
    }
}

/// Assembles the N_i×(p+2) design (1, A_i·1, X_i) for one cluster.
pub fn build_design(record: &ClusterRecord, p: usize) -> DMatrix<f64> {
    let n = record.size();
    let mut q = DMatrix::zeros(n, p + 2);
    for j in 0..n {
        q[(j, 0)] = 1.0;
        q[(j, 1)] = record.treatment as f64;
        for k in 0..p {
            q[(j, 2 + k)] = record.covariate(j, k, p);
        }
    }
    q
}

/// Per-size aggregated cross-products. The compound-symmetry weights depend
/// on the data only through Q_iᵀQ_i, Q_iᵀ1, Q_iᵀY and scalars, and the
/// Woodbury coefficient depends on the cluster only through N_i, so grouping
/// by size makes a likelihood evaluation O(#distinct sizes · (p+2)²).
struct SizeGroup {
    n: usize,
    count: usize,
    /// Σ (Q_iᵀ1)(Q_iᵀ1)ᵀ over clusters of this size.
    ones_outer: DMatrix<f64>,
    /// Σ (1ᵀY_i)·(Q_iᵀ1).
    ones_y_cross: DVector<f64>,
    /// Σ (1ᵀY_i)².
    ones_y_sq: f64,
}

pub(crate) struct SuffStats {
    d: usize,
    total_n: usize,
    m: usize,
    total_gram: DMatrix<f64>,
    total_qy: DVector<f64>,
    total_yty: f64,
    groups: Vec<SizeGroup>,
}

impl SuffStats {
    pub(crate) fn new(data: &TrialDataset) -> Self {
        let p = data.p();
        let d = p + 2;
        let mut total_gram = DMatrix::zeros(d, d);
        let mut total_qy = DVector::zeros(d);
        let mut total_yty = 0.0;
        let mut total_n = 0;
        let mut groups: Vec<SizeGroup> = Vec::new();

        for record in data.clusters() {
            let n = record.size();
            total_n += n;
            let q = build_design(record, p);
            let y = DVector::from_column_slice(&record.outcomes);
            let q_ones = q.transpose() * DVector::from_element(n, 1.0);
            let q_y = q.transpose() * &y;
            total_gram += q.transpose() * &q;
            total_qy += &q_y;
            total_yty += y.dot(&y);
            let ones_y: f64 = record.outcomes.iter().sum();

            let group = match groups.iter_mut().find(|g| g.n == n) {
                Some(g) => g,
                None => {
                    groups.push(SizeGroup {
                        n,
                        count: 0,
                        ones_outer: DMatrix::zeros(d, d),
                        ones_y_cross: DVector::zeros(d),
                        ones_y_sq: 0.0,
                    });
                    groups.last_mut().unwrap()
                }
            };
            group.count += 1;
            group.ones_outer += &q_ones * q_ones.transpose();
            group.ones_y_cross += q_ones * ones_y;
            group.ones_y_sq += ones_y * ones_y;
        }

        Self { d, total_n, m: data.m(), total_gram, total_qy, total_yty, groups }
    }

    fn woodbury_coeff(cs: &CompoundSymmetry, n: usize) -> f64 {
        cs.tau2() / (cs.sigma2() * (cs.sigma2() + n as f64 * cs.tau2()))
    }

    /// Σᵢ Q_iᵀΣ_i⁻¹Q_i.
    pub(crate) fn gram(&self, cs: &CompoundSymmetry) -> DMatrix<f64> {
        let mut g = &self.total_gram / cs.sigma2();
        for group in &self.groups {
            let b = Self::woodbury_coeff(cs, group.n);
            g -= &group.ones_outer * b;
        }
        g
    }

    /// Σᵢ Q_iᵀΣ_i⁻¹Y_i.
    fn rhs(&self, cs: &CompoundSymmetry) -> DVector<f64> {
        let mut r = &self.total_qy / cs.sigma2();
        for group in &self.groups {
            let b = Self::woodbury_coeff(cs, group.n);
            r -= &group.ones_y_cross * b;
        }
        r
    }

    /// Σᵢ Y_iᵀΣ_i⁻¹Y_i.
    fn y_quad(&self, cs: &CompoundSymmetry) -> f64 {
        let mut q = self.total_yty / cs.sigma2();
        for group in &self.groups {
            q -= Self::woodbury_coeff(cs, group.n) * group.ones_y_sq;
        }
        q
    }

    /// Σᵢ log det Σ_i.
    fn logdet(&self, cs: &CompoundSymmetry) -> f64 {
        let mut ld = (self.total_n - self.m) as f64 * cs.sigma2().ln();
        for group in &self.groups {
            ld += group.count as f64
                * (cs.sigma2() + group.n as f64 * cs.tau2()).ln();
        }
        ld
    }

    /// Analytic gradient of the profiled objective with respect to
    /// (σ², τ²). β is profiled out, so by the envelope theorem only the
    /// explicit dependence contributes:
    /// ∂ℓ/∂σ² = ½(rᵀΣ⁻²r − tr Σ⁻¹), ∂ℓ/∂τ² = ½Σᵢ[(1ᵀΣᵢ⁻¹rᵢ)² − 1ᵀΣᵢ⁻¹1].
    fn profile_gradient(
        &self,
        cs: &CompoundSymmetry,
        mode: EstimationMode,
    ) -> Result<(f64, f64)> {
        let s2 = cs.sigma2();
        let t2 = cs.tau2();
        let a = 1.0 / s2;
        let chol = self.cholesky(cs)?;
        let beta = chol.solve(&self.rhs(cs));

        // unweighted rᵀr from cached cross-products
        let rtr = self.total_yty - 2.0 * beta.dot(&self.total_qy)
            + beta.dot(&(&self.total_gram * &beta));

        let mut r_quad2 = a * a * rtr; // rᵀΣ⁻²r, rank-one parts subtracted below
        let mut trace = 0.0; // Σᵢ tr Σᵢ⁻¹
        let mut g_t = 0.0;
        for group in &self.groups {
            let n = group.n as f64;
            let denom = s2 + n * t2;
            let b = t2 / (s2 * denom);
            // Σ (1ᵀrᵢ)² over clusters of this size
            let ones_r_sq = group.ones_y_sq - 2.0 * beta.dot(&group.ones_y_cross)
                + beta.dot(&(&group.ones_outer * &beta));
            r_quad2 -= (2.0 * a * b - n * b * b) * ones_r_sq;
            trace += group.count as f64 * (n * a - n * b);
            // 1ᵀΣ⁻¹r = 1ᵀr/(σ²+nτ²) and 1ᵀΣ⁻¹1 = n/(σ²+nτ²)
            g_t += 0.5 * (ones_r_sq / (denom * denom) - group.count as f64 * n / denom);
        }
        let mut g_s = 0.5 * (r_quad2 - trace);

        if mode == EstimationMode::Reml {
            // subtract ½ tr(G⁻¹ ∂G/∂θ) with G the weighted Gram matrix
            let mut dg_s = &self.total_gram * (-a * a);
            let mut dg_t = DMatrix::zeros(self.d, self.d);
            for group in &self.groups {
                let n = group.n as f64;
                let denom = s2 + n * t2;
                let b = t2 / (s2 * denom);
                dg_s += &group.ones_outer * (2.0 * a * b - n * b * b);
                dg_t -= &group.ones_outer / (denom * denom);
            }
            g_s -= 0.5 * chol.solve(&dg_s).trace();
            g_t -= 0.5 * chol.solve(&dg_t).trace();
        }
        Ok((g_s, g_t))
    }

    fn cholesky(&self, cs: &CompoundSymmetry) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.gram(cs)).ok_or(Error::SingularDesign)
    }

    pub(crate) fn gls(&self, cs: &CompoundSymmetry) -> Result<DVector<f64>> {
        let chol = self.cholesky(cs)?;
        Ok(chol.solve(&self.rhs(cs)))
    }

    /// Profiled (over β) log-likelihood with the constant −(Σ N_i/2)·log 2π.
    fn profile_objective(&self, cs: &CompoundSymmetry, mode: EstimationMode) -> Result<f64> {
        let chol = self.cholesky(cs)?;
        let rhs = self.rhs(cs);
        let beta = chol.solve(&rhs);
        let rss_quad =
            self.y_quad(cs) - 2.0 * beta.dot(&rhs) + beta.dot(&(self.gram(cs) * &beta));
        let c = -(self.total_n as f64 / 2.0) * (2.0 * std::f64::consts::PI).ln();
        let mut obj = c - 0.5 * (self.logdet(cs) + rss_quad);
        if mode == EstimationMode::Reml {
            let ld_gram: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            obj -= 0.5 * ld_gram;
        }
        Ok(obj)
    }
}

/// Solves the GLS normal equations Σᵢ Q_iᵀΣ_i⁻¹(Y_i − Q_iβ) = 0 at the
/// given variance components.
pub fn gls_beta(data: &TrialDataset, cs: &CompoundSymmetry) -> Result<Vec<f64>> {
    let ss = SuffStats::new(data);
    Ok(ss.gls(cs)?.iter().copied().collect())
}

/// Profiled log-likelihood (β profiled out) at fixed variance components.
pub fn profile_loglik(
    data: &TrialDataset,
    cs: &CompoundSymmetry,
    mode: EstimationMode,
) -> Result<f64> {
    SuffStats::new(data).profile_objective(cs, mode)
}

fn sample_variance(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// ANOVA-style moment starting values from OLS residuals.
fn initial_components(data: &TrialDataset, beta_ols: &DVector<f64>, floor: f64) -> (f64, f64) {
    let p = data.p();
    let mut within_ss = 0.0;
    let mut within_df = 0usize;
    let mut cluster_means = Vec::with_capacity(data.m());
    let mut harmonic_sum = 0.0;
    for record in data.clusters() {
        let q = build_design(record, p);
        let y = DVector::from_column_slice(&record.outcomes);
        let r = y - q * beta_ols;
        let n = record.size();
        let mean = r.sum() / n as f64;
        cluster_means.push(mean);
        within_ss += r.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
        within_df += n - 1;
        harmonic_sum += 1.0 / n as f64;
    }
    let total_var = sample_variance(
        data.clusters().iter().flat_map(|c| c.outcomes.iter().copied()),
    );
    let sigma2_0 = if within_df > 0 {
        (within_ss / within_df as f64).max(floor)
    } else {
        (total_var / 2.0).max(floor)
    };
    let harmonic_mean = data.m() as f64 / harmonic_sum;
    let between = sample_variance(cluster_means.into_iter());
    let tau2_0 = (between - sigma2_0 / harmonic_mean).max(0.0);
    (sigma2_0, tau2_0)
}

/// Damped Newton refinement of an interior optimum in (ln σ², ln τ²),
/// using the analytic gradient and a finite-difference Hessian. The
/// simplex search locates the optimum only to ~√(objective tolerance) in
/// the parameters; Newton steps pin it down to gradient-noise level.
fn newton_polish(
    ss: &SuffStats,
    mode: EstimationMode,
    sigma2: f64,
    tau2: f64,
    floor: f64,
) -> (f64, f64, f64) {
    let eval = |u: &[f64; 2]| -> Option<(f64, [f64; 2])> {
        let s2 = u[0].exp().max(floor);
        let t2 = u[1].exp();
        let cs = CompoundSymmetry::new(s2, t2).ok()?;
        let obj = ss.profile_objective(&cs, mode).ok()?;
        let (gs, gt) = ss.profile_gradient(&cs, mode).ok()?;
        (obj.is_finite() && gs.is_finite() && gt.is_finite())
            .then_some((obj, [s2 * gs, t2 * gt]))
    };

    let mut u = [sigma2.max(floor).ln(), tau2.ln()];
    let fallback = (sigma2, tau2, f64::NEG_INFINITY);
    let Some((mut obj, mut g)) = eval(&u) else { return fallback };

    for _ in 0..30 {
        let gnorm = g[0].abs().max(g[1].abs());
        if gnorm < 1e-10 * (1.0 + obj.abs()) {
            break;
        }
        let h = 1e-5;
        let mut hess = [[0.0; 2]; 2];
        let mut usable = true;
        for j in 0..2 {
            let mut up = u;
            up[j] += h;
            let mut dn = u;
            dn[j] -= h;
            match (eval(&up), eval(&dn)) {
                (Some((_, gp)), Some((_, gm))) => {
                    hess[0][j] = (gp[0] - gm[0]) / (2.0 * h);
                    hess[1][j] = (gp[1] - gm[1]) / (2.0 * h);
                }
                _ => {
                    usable = false;
                    break;
                }
            }
        }
        let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
        if !usable || !det.is_finite() || det.abs() < 1e-300 {
            break;
        }
        let d = [
            -(hess[1][1] * g[0] - hess[0][1] * g[1]) / det,
            -(-hess[1][0] * g[0] + hess[0][0] * g[1]) / det,
        ];
        let scale = d[0].abs().max(d[1].abs());
        let mut step = if scale > 1.0 { 1.0 / scale } else { 1.0 };
        let mut accepted = false;
        for _ in 0..10 {
            let trial = [u[0] + step * d[0], u[1] + step * d[1]];
            if let Some((to, tg)) = eval(&trial) {
                let shrinks = tg[0].abs().max(tg[1].abs()) < gnorm;
                // near the optimum the objective changes at rounding-noise
                // level; the gradient norm is the reliable progress signal
                if to > obj || (to >= obj - 1e-9 * (1.0 + obj.abs()) && shrinks) {
                    u = trial;
                    obj = to;
                    g = tg;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (u[0].exp().max(floor), u[1].exp(), obj)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fits the mixed-model ANCOVA by maximizing the (restricted) profiled
/// log-likelihood over σ² ∈ [σ²_min, ∞), τ² ∈ [0, ∞).
///
/// Non-convergence is reported through `converged = false` on the best
/// iterate, not as an error.
pub fn fit(data: &TrialDataset, mode: EstimationMode, config: &FitConfig) -> Result<MixedFit> {
    let ss = SuffStats::new(data);
    let p = data.p();

    let total_var = sample_variance(
        data.clusters().iter().flat_map(|c| c.outcomes.iter().copied()),
    );
    let floor = (config.sigma2_floor_scale * total_var).max(1e-300);

    // OLS pass doubles as the singular-design check.
    let identity_cs = CompoundSymmetry::new(1.0, 0.0)?;
    let beta_ols = ss.gls(&identity_cs)?;

    let (sigma2_0, tau2_0) = initial_components(data, &beta_ols, floor);
    let rho_0 = (tau2_0 / (tau2_0 + sigma2_0)).clamp(1e-6, 1.0 - 1e-6);
    let x0 = [sigma2_0.max(floor).ln(), logit(rho_0)];

    let objective = |x: &[f64]| -> f64 {
        let sigma2 = x[0].exp().max(floor);
        let rho = sigmoid(x[1]).min(1.0 - 1e-12);
        let tau2 = sigma2 * rho / (1.0 - rho);
        match CompoundSymmetry::new(sigma2, tau2)
            .and_then(|cs| ss.profile_objective(&cs, mode))
        {
            Ok(obj) if obj.is_finite() => -obj,
            _ => f64::INFINITY,
        }
    };

    let coarse = nelder_mead(
        &objective,
        &x0,
        0.5,
        config.simplex_tol,
        config.objective_tol,
        config.max_iters,
    );
    // restart with a small simplex: a collapsed simplex can satisfy the
    // diameter criterion slightly off-optimum; the fresh simplex polishes
    // the last few digits
    let polish = nelder_mead(
        &objective,
        &coarse.x,
        1e-3,
        config.simplex_tol,
        config.objective_tol,
        config.max_iters,
    );
    let interior = if polish.fx <= coarse.fx { polish } else { coarse };
    let mut interior_sigma2 = interior.x[0].exp().max(floor);
    let interior_rho = sigmoid(interior.x[1]).min(1.0 - 1e-12);
    let mut interior_tau2 = interior_sigma2 * interior_rho / (1.0 - interior_rho);
    let mut interior_obj = -interior.fx;
    if interior_tau2 > 0.0 && interior_obj.is_finite() {
        // the polished point may print an objective a rounding-noise hair
        // below the simplex value; the gradient criterion it satisfies is
        // the better optimality certificate, so prefer it unconditionally
        let (ps, pt, pobj) = newton_polish(&ss, mode, interior_sigma2, interior_tau2, floor);
        if pobj.is_finite() {
            interior_sigma2 = ps;
            interior_tau2 = pt;
            interior_obj = pobj;
        }
    }

    // Exact τ² = 0 profile: β is the OLS solution and σ̂² has a closed form.
    let rss: f64 = {
        let mut rss = 0.0;
        for record in data.clusters() {
            let q = build_design(record, p);
            let y = DVector::from_column_slice(&record.outcomes);
            let r = y - q * &beta_ols;
            rss += r.dot(&r);
        }
        rss
    };
    let boundary_df = match mode {
        EstimationMode::Ml => ss.total_n as f64,
        EstimationMode::Reml => (ss.total_n as f64 - ss.d as f64).max(1.0),
    };
    let boundary_sigma2 = (rss / boundary_df).max(floor);
    let boundary_cs = CompoundSymmetry::new(boundary_sigma2, 0.0)?;
    let boundary_obj = ss.profile_objective(&boundary_cs, mode)?;

    // an interior ρ this small is numerically indistinguishable from the
    // boundary; prefer the exact closed form there
    let negligible_tau2 = interior_tau2 < 1e-10 * interior_sigma2;
    let (sigma2_hat, tau2_hat, loglik, converged) = if boundary_obj >= interior_obj
        || negligible_tau2
    {
        (boundary_sigma2, 0.0, boundary_obj, true)
    } else {
        (interior_sigma2, interior_tau2, interior_obj, interior.converged)
    };

    let cs_hat = CompoundSymmetry::new(sigma2_hat, tau2_hat)?;
    let beta = ss.gls(&cs_hat)?;

    Ok(MixedFit {
        beta: beta.iter().copied().collect(),
        sigma2_hat,
        tau2_hat,
        loglik,
        mode,
        converged,
        n_iterations: interior.iterations,
        n_params_p: p,
        singleton_warning: data.has_singleton_clusters(),
    })
}

/// The unadjusted mixed-model estimator: [`fit`] with covariates dropped.
pub fn fit_unadjusted(
    data: &TrialDataset,
    mode: EstimationMode,
    config: &FitConfig,
) -> Result<MixedFit> {
    fit(&data.without_covariates(), mode, config)
}

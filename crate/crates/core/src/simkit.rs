//! Monte Carlo simulation engine: runs estimators over replications and
//! computes bias, empirical SE, averaged SE, coverage, and relative
//! efficiency with Monte Carlo standard errors.

use rayon::prelude::*;

use crate::clanova::{fit_cluster_ancova, ClusterVarianceMode};
use crate::dgp::{gen_trial, ScenarioConfig};
use crate::error::{Error, Result};
use crate::mmfit::{fit, fit_unadjusted, EstimationMode, FitConfig};
use crate::variance::{confidence_interval, model_based_variance, sandwich_variance};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    MixedUnadjusted,
    MixedAncova,
    ClusterAncova,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceChoice {
    ModelBased,
    Sandwich,
    ClusterClassical,
    ClusterRobust,
}

/// One estimator to evaluate in a simulation study.
#[derive(Debug, Clone)]
pub struct EstimatorSpec {
    pub method: Method,
    pub estimation: EstimationMode,
    pub variance: VarianceChoice,
    pub label: String,
}

impl EstimatorSpec {
    pub fn new(
        method: Method,
        estimation: EstimationMode,
        variance: VarianceChoice,
        label: impl Into<String>,
    ) -> Result<Self> {
        let cluster_variance =
            matches!(variance, VarianceChoice::ClusterClassical | VarianceChoice::ClusterRobust);
        match method {
            Method::ClusterAncova if !cluster_variance => {
                return Err(Error::Config(
                    "cluster-level ANCOVA requires a cluster variance option".into(),
                ))
            }
            Method::MixedUnadjusted | Method::MixedAncova if cluster_variance => {
                return Err(Error::Config(
                    "cluster variance options apply only to cluster-level ANCOVA".into(),
                ))
            }
            _ => {}
        }
        Ok(Self { method, estimation, variance, label: label.into() })
    }

    /// The benchmark estimator roster: mixed-model unadjusted, mixed-model
    /// ANCOVA (both ML, model-based SE), and cluster-level ANCOVA
    /// (classical SE).
    pub fn default_roster() -> Vec<EstimatorSpec> {
        vec![
            EstimatorSpec::new(
                Method::MixedUnadjusted,
                EstimationMode::Ml,
                VarianceChoice::ModelBased,
                "mixed-model unadjusted",
            )
            .unwrap(),
            EstimatorSpec::new(
                Method::MixedAncova,
                EstimationMode::Ml,
                VarianceChoice::ModelBased,
                "mixed-model ANCOVA",
            )
            .unwrap(),
            EstimatorSpec::new(
                Method::ClusterAncova,
                EstimationMode::Ml,
                VarianceChoice::ClusterClassical,
                "cluster-level ANCOVA",
            )
            .unwrap(),
        ]
    }
}

/// One estimator's result on one replication. Failed replications carry
/// NaNs with `converged = false`; they are reported, never silently
/// dropped.
#[derive(Debug, Clone, Copy)]
pub struct RepOutcome {
    pub delta_hat: f64,
    pub se: f64,
    pub converged: bool,
}

impl RepOutcome {
    fn failed() -> Self {
        Self { delta_hat: f64::NAN, se: f64::NAN, converged: false }
    }
}

/// One simulate-fit-report cycle. Every estimator sees the identical
/// generated dataset.
pub fn run_replication(
    config: &ScenarioConfig,
    estimators: &[EstimatorSpec],
    rep_index: u64,
) -> Vec<RepOutcome> {
    let (data, _) = match gen_trial(config, rep_index) {
        Ok(d) => d,
        Err(_) => return vec![RepOutcome::failed(); estimators.len()],
    };
    let fit_config = FitConfig::default();

    estimators
        .iter()
        .map(|spec| {
            let outcome = || -> Result<RepOutcome> {
                match spec.method {
                    Method::MixedUnadjusted | Method::MixedAncova => {
                        let mf = if spec.method == Method::MixedUnadjusted {
                            fit_unadjusted(&data, spec.estimation, &fit_config)?
                        } else {
                            fit(&data, spec.estimation, &fit_config)?
                        };
                        let var = match spec.variance {
                            VarianceChoice::ModelBased => model_based_variance(&mf, &data)?.1,
                            VarianceChoice::Sandwich => sandwich_variance(&mf, &data)?.1,
                            _ => unreachable!("validated in EstimatorSpec::new"),
                        };
                        Ok(RepOutcome {
                            delta_hat: mf.delta_hat(),
                            se: var.max(0.0).sqrt(),
                            converged: mf.converged,
                        })
                    }
                    Method::ClusterAncova => {
                        let mode = match spec.variance {
                            VarianceChoice::ClusterRobust => ClusterVarianceMode::Robust,
                            _ => ClusterVarianceMode::Classical,
                        };
                        let f = fit_cluster_ancova(&data, mode, 0.95)?;
                        Ok(RepOutcome {
                            delta_hat: f.report.delta_hat,
                            se: f.report.se,
                            converged: true,
                        })
                    }
                }
            };
            outcome().unwrap_or_else(|_| RepOutcome::failed())
        })
        .collect()
}

/// Per-estimator simulation metrics.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub label: String,
    pub bias: f64,
    pub emp_se: f64,
    pub ase: f64,
    pub cp: f64,
    pub re: f64,
    pub mcse_bias: f64,
    pub mcse_emp_se: f64,
    pub mcse_cp: f64,
    pub mcse_re: f64,
    pub n_converged: usize,
    pub n_reps: usize,
}

#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub true_delta: f64,
    pub n_reps: usize,
    pub level: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let mu = mean(v);
    (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

/// Leave-one-out sample variance from sufficient statistics.
fn loo_variance(s1: f64, s2: f64, k: usize, x: f64) -> f64 {
    let km1 = (k - 1) as f64;
    let mu = (s1 - x) / km1;
    ((s2 - x * x) - km1 * mu * mu) / (km1 - 1.0)
}

/// Jackknife Monte Carlo SE for the squared-SE-ratio RE, paired over the
/// replications converged for both estimators.
fn jackknife_re_se(base: &[f64], est: &[f64]) -> f64 {
    let k = base.len();
    if k < 3 {
        return f64::NAN;
    }
    let (bs1, bs2) = base.iter().fold((0.0, 0.0), |(a, b), &x| (a + x, b + x * x));
    let (es1, es2) = est.iter().fold((0.0, 0.0), |(a, b), &x| (a + x, b + x * x));
    let kf = k as f64;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for i in 0..k {
        let re_i = loo_variance(bs1, bs2, k, base[i]) / loo_variance(es1, es2, k, est[i]);
        sum += re_i;
        sumsq += re_i * re_i;
    }
    let jack_mean = sum / kf;
    ((kf - 1.0) / kf * (sumsq - kf * jack_mean * jack_mean)).max(0.0).sqrt()
}

/// Runs the full study and reduces to one [`MetricsRow`] per estimator.
///
/// Replications execute in parallel; results are keyed by replication
/// index before reduction, so the table is identical for any worker-pool
/// size.
pub fn run_study(
    config: &ScenarioConfig,
    estimators: &[EstimatorSpec],
    n_reps: usize,
    level: f64,
) -> Result<MetricsTable> {
    if estimators.is_empty() {
        return Err(Error::Config("estimator list must be nonempty".into()));
    }
    if n_reps < 2 {
        return Err(Error::Config("need at least 2 replications".into()));
    }
    config.validate()?;

    let mut results: Vec<(u64, Vec<RepOutcome>)> = (0..n_reps as u64)
        .into_par_iter()
        .map(|rep| (rep, run_replication(config, estimators, rep)))
        .collect();
    results.sort_by_key(|(rep, _)| *rep);

    let truth = config.scenario.true_delta();
    let baseline_idx = estimators
        .iter()
        .position(|e| e.method == Method::MixedUnadjusted && e.estimation == EstimationMode::Ml)
        .or_else(|| estimators.iter().position(|e| e.method == Method::MixedUnadjusted));

    let per_estimator: Vec<Vec<RepOutcome>> = (0..estimators.len())
        .map(|j| results.iter().map(|(_, outs)| outs[j]).collect())
        .collect();

    let baseline_emp_se = baseline_idx.map(|b| {
        let deltas: Vec<f64> = per_estimator[b]
            .iter()
            .filter(|o| o.converged)
            .map(|o| o.delta_hat)
            .collect();
        sample_sd(&deltas)
    });

    let rows = estimators
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let outcomes = &per_estimator[j];
            let converged: Vec<&RepOutcome> = outcomes.iter().filter(|o| o.converged).collect();
            let k = converged.len();
            if k < 2 {
                return Err(Error::NoConvergedReps { label: spec.label.clone() });
            }
            let deltas: Vec<f64> = converged.iter().map(|o| o.delta_hat).collect();
            let ses: Vec<f64> = converged.iter().map(|o| o.se).collect();
            let kf = k as f64;

            let bias = mean(&deltas) - truth;
            let emp_se = sample_sd(&deltas);
            let ase = mean(&ses);
            let covered = converged
                .iter()
                .filter(|o| {
                    let (lo, hi) = confidence_interval(o.delta_hat, o.se, level);
                    lo <= truth && truth <= hi
                })
                .count();
            let cp = covered as f64 / kf;

            let (re, mcse_re) = match baseline_idx {
                Some(b) if b == j => (1.0, 0.0),
                Some(b) => {
                    let base_emp = baseline_emp_se.unwrap();
                    let re = (base_emp / emp_se).powi(2);
                    // pair over reps converged for both estimators
                    let mut base_pair = Vec::new();
                    let mut est_pair = Vec::new();
                    for (bo, eo) in per_estimator[b].iter().zip(outcomes) {
                        if bo.converged && eo.converged {
                            base_pair.push(bo.delta_hat);
                            est_pair.push(eo.delta_hat);
                        }
                    }
                    (re, jackknife_re_se(&base_pair, &est_pair))
                }
                None => (f64::NAN, f64::NAN),
            };

            Ok(MetricsRow {
                label: spec.label.clone(),
                bias,
                emp_se,
                ase,
                cp,
                re,
                mcse_bias: emp_se / kf.sqrt(),
                mcse_emp_se: emp_se / (2.0 * (kf - 1.0)).sqrt(),
                mcse_cp: (cp * (1.0 - cp) / kf).sqrt(),
                mcse_re,
                n_converged: k,
                n_reps,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MetricsTable { rows, true_delta: truth, n_reps, level })
}

/// Runs {unadjusted, ANCOVA} × {ML, REML} on shared draws; the relative
/// efficiency baseline is the unadjusted ML row.
pub fn compare_ml_reml(
    config: &ScenarioConfig,
    n_reps: usize,
    level: f64,
) -> Result<MetricsTable> {
    let roster = ml_reml_roster();
    run_study(config, &roster, n_reps, level)
}

/// The estimator roster used by [`compare_ml_reml`].
pub fn ml_reml_roster() -> Vec<EstimatorSpec> {
    vec![
        EstimatorSpec::new(
            Method::MixedUnadjusted,
            EstimationMode::Ml,
            VarianceChoice::ModelBased,
            "mixed-model unadjusted (ML)",
        )
        .unwrap(),
        EstimatorSpec::new(
            Method::MixedUnadjusted,
            EstimationMode::Reml,
            VarianceChoice::ModelBased,
            "mixed-model unadjusted (REML)",
        )
        .unwrap(),
        EstimatorSpec::new(
            Method::MixedAncova,
            EstimationMode::Ml,
            VarianceChoice::ModelBased,
            "mixed-model ANCOVA (ML)",
        )
        .unwrap(),
        EstimatorSpec::new(
            Method::MixedAncova,
            EstimationMode::Reml,
            VarianceChoice::ModelBased,
            "mixed-model ANCOVA (REML)",
        )
        .unwrap(),
    ]
}

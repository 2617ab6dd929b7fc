//! Estimation and simulation toolkit for cluster-randomized trials with
//! continuous outcomes.
//!
//! The centerpiece is the mixed-model ANCOVA estimator of the average
//! treatment effect — a linear mixed model with a random cluster
//! intercept (compound-symmetry covariance) and baseline covariate
//! adjustment — together with its unadjusted and cluster-level ANCOVA
//! competitors, model-based and cluster-robust sandwich variance
//! estimators, and a deterministic Monte Carlo engine for studying their
//! bias, efficiency, and coverage under randomization schemes and
//! data-generating processes where the working model is misspecified.
//!
//! Module map:
//! - [`csalg`]: O(N) compound-symmetry covariance kernels.
//! - [`data`]: cluster records and trial datasets.
//! - [`mmfit`]: ML/REML fitting of the mixed model via a profiled
//!   likelihood with an exact variance-boundary check.
//! - [`variance`]: model-based, sandwich, and influence-function
//!   variance machinery plus confidence intervals.
//! - [`clanova`]: cluster-level (means-based) ANCOVA.
//! - [`randomize`]: simple and stratified treatment assignment.
//! - [`dgp`]: the three benchmark data-generating scenarios.
//! - [`simkit`]: replication engine and simulation metrics.
//! - [`dataio`]: delimited-file ingestion and report serialization.
//! - [`rngstream`]: keyed, order-independent random streams.

pub mod clanova;
pub mod csalg;
pub mod data;
pub mod dataio;
pub mod dgp;
pub mod error;
pub mod mmfit;
mod optim;
pub mod randomize;
pub mod rngstream;
pub mod simkit;
pub mod variance;

pub use clanova::{fit_cluster_ancova, ClusterAncovaFit, ClusterVarianceMode};
pub use csalg::CompoundSymmetry;
pub use data::{ClusterRecord, TrialDataset};
pub use dataio::{read_trial, render_report, write_report, IngestReport, ReportFormat, SchemaMap, Tabular};
pub use dgp::{gen_trial, icc_estimate, icc_estimate_with_se, Scenario, ScenarioConfig};
pub use error::{Error, Result};
pub use mmfit::{fit, fit_unadjusted, EstimationMode, FitConfig, MixedFit};
pub use simkit::{
    compare_ml_reml, run_study, EstimatorSpec, Method, MetricsRow, MetricsTable, VarianceChoice,
};
pub use variance::{
    influence_values, model_based_variance, sandwich_variance, EstimateReport, VarianceMethod,
};

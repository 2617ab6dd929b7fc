//! Observed trial data: per-cluster records and the full dataset.

use crate::error::{Error, Result};

/// One cluster's observed data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRecord {
    pub cluster_id: String,
    /// Binary arm indicator A_i.
    pub treatment: u8,
    /// Observed outcomes, length N_i.
    pub outcomes: Vec<f64>,
    /// Covariates, row-major N_i × p.
    pub covariates: Vec<f64>,
    pub stratum: Option<String>,
}

impl ClusterRecord {
    pub fn new(
        cluster_id: impl Into<String>,
        treatment: u8,
        outcomes: Vec<f64>,
        covariates: Vec<f64>,
        p: usize,
        stratum: Option<String>,
    ) -> Result<Self> {
        let cluster_id = cluster_id.into();
        if treatment > 1 {
            return Err(Error::Invalid(format!(
                "treatment indicator must be 0 or 1, got {treatment} in cluster {cluster_id}"
            )));
        }
        if outcomes.is_empty() {
            return Err(Error::Invalid(format!("cluster {cluster_id} has no observations")));
        }
        if covariates.len() != outcomes.len() * p {
            return Err(Error::Invalid(format!(
                "cluster {cluster_id}: covariate matrix has {} entries, expected {} x {}",
                covariates.len(),
                outcomes.len(),
                p
            )));
        }
        Ok(Self { cluster_id, treatment, outcomes, covariates, stratum })
    }

    pub fn size(&self) -> usize {
        self.outcomes.len()
    }

    /// Covariate value for individual `j`, column `k`.
    pub fn covariate(&self, j: usize, k: usize, p: usize) -> f64 {
        self.covariates[j * p + k]
    }
}

/// An observed cluster-randomized trial: m clusters sharing p covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    clusters: Vec<ClusterRecord>,
    covariate_names: Vec<String>,
}

impl TrialDataset {
    pub fn new(clusters: Vec<ClusterRecord>, covariate_names: Vec<String>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let p = covariate_names.len();
        for c in &clusters {
            if c.covariates.len() != c.size() * p {
                return Err(Error::Invalid(format!(
                    "cluster {}: expected {} covariate columns",
                    c.cluster_id, p
                )));
            }
        }
        let treated = clusters.iter().filter(|c| c.treatment == 1).count();
        if treated == 0 || treated == clusters.len() {
            return Err(Error::Invalid(
                "both treatment arms must be represented".to_string(),
            ));
        }
        Ok(Self { clusters, covariate_names })
    }

    pub fn clusters(&self) -> &[ClusterRecord] {
        &self.clusters
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Number of covariate columns p.
    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    /// Number of clusters m.
    pub fn m(&self) -> usize {
        self.clusters.len()
    }

    pub fn total_observations(&self) -> usize {
        self.clusters.iter().map(|c| c.size()).sum()
    }

    /// Fraction of treated clusters.
    pub fn treated_fraction(&self) -> f64 {
        let t = self.clusters.iter().filter(|c| c.treatment == 1).count();
        t as f64 / self.m() as f64
    }

    /// A copy with all covariate columns dropped (p = 0).
    pub fn without_covariates(&self) -> TrialDataset {
        let clusters = self
            .clusters
            .iter()
            .map(|c| ClusterRecord {
                cluster_id: c.cluster_id.clone(),
                treatment: c.treatment,
                outcomes: c.outcomes.clone(),
                covariates: Vec::new(),
                stratum: c.stratum.clone(),
            })
            .collect();
        TrialDataset { clusters, covariate_names: Vec::new() }
    }

    /// True when any cluster has a single observation (no within-cluster
    /// information separating σ² from τ²).
    pub fn has_singleton_clusters(&self) -> bool {
        self.clusters.iter().any(|c| c.size() == 1)
    }
}

//! Data-generating processes for the three simulation scenarios, the
//! Gamma-contaminated variants, and the enrollment mechanism.
//!
//! Each cluster has a source population of `superpop_n` individuals with
//! potential outcomes and covariates; N_i of them are enrolled uniformly
//! without replacement, independent of everything else.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::data::{ClusterRecord, TrialDataset};
use crate::error::{Error, Result};
use crate::randomize::{simple_assign, stratified_assign, Scheme};
use crate::rngstream::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Cluster-mean-centered covariate effect, variable cluster sizes.
    One,
    /// Stratum-driven treatment effect, fixed N_i = 8, stratified
    /// randomization, Δ* = 1.2.
    Two,
    /// Correctly specified mixed-model ANCOVA.
    Three,
}

impl Scenario {
    pub fn from_index(idx: u8) -> Result<Self> {
        match idx {
            1 => Ok(Scenario::One),
            2 => Ok(Scenario::Two),
            3 => Ok(Scenario::Three),
            other => Err(Error::Config(format!("scenario must be 1, 2, or 3, got {other}"))),
        }
    }

    pub fn index(&self) -> u8 {
        match self {
            Scenario::One => 1,
            Scenario::Two => 2,
            Scenario::Three => 3,
        }
    }

    /// True average treatment effect Δ*.
    pub fn true_delta(&self) -> f64 {
        match self {
            Scenario::Two => 1.2,
            _ => 0.0,
        }
    }

    fn max_cluster_size(&self) -> usize {
        match self {
            Scenario::Two => 8,
            _ => 12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub m: usize,
    pub superpop_n: usize,
    pub pi: f64,
    pub add_gamma: bool,
    pub master_seed: u64,
    /// Overrides the scenario's default assignment scheme (simple for 1
    /// and 3, stratified for 2); used to study the precision effect of
    /// stratification on an otherwise identical data-generating process.
    pub assignment_override: Option<Scheme>,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, m: usize, master_seed: u64) -> Self {
        // Scenario 2 enrolls every source individual (n = N_i = 8), so the
        // within-cluster covariate average in its outcome model is computed
        // over exactly the observed units; scenarios 1 and 3 subsample from
        // a source population matching the largest drawable cluster.
        let superpop_n = match scenario {
            Scenario::Two => 8,
            _ => 12,
        };
        Self {
            scenario,
            m,
            superpop_n,
            pi: 0.5,
            add_gamma: false,
            master_seed,
            assignment_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config("need at least 2 clusters".into()));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::InvalidPi(self.pi));
        }
        if self.superpop_n < self.scenario.max_cluster_size() {
            return Err(Error::Config(format!(
                "source population size {} is below the maximum drawable cluster size {}",
                self.superpop_n,
                self.scenario.max_cluster_size()
            )));
        }
        Ok(())
    }

    fn tag(&self, purpose: &str) -> String {
        format!("scen{}/{}", self.scenario.index(), purpose)
    }
}

/// Uniform random N-subset of {0..n-1} via partial Fisher-Yates; the
/// returned indices are in shuffled order.
pub fn enroll(n: usize, n_enrolled: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n_enrolled == 0 || n_enrolled > n {
        return Err(Error::BadSize { requested: n_enrolled, available: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for j in 0..n_enrolled {
        let pick = rng.gen_range(j..n);
        idx.swap(j, pick);
    }
    idx.truncate(n_enrolled);
    Ok(idx)
}

struct CompleteCluster {
    y1: Vec<f64>,
    y0: Vec<f64>,
    x: Vec<f64>,
    stratum: Option<u8>,
}

fn draw_complete_clusters(
    config: &ScenarioConfig,
    rep_index: u64,
) -> Vec<CompleteCluster> {
    let n = config.superpop_n;
    let seed = config.master_seed;
    let x_dist = Normal::new(0.0, 2.0).unwrap();
    let eps_dist = Normal::new(0.0, 5.0).unwrap();
    let delta_dist = Normal::new(0.0, 1.0).unwrap();
    let gamma_dist = Gamma::new(25.0, 1.0).unwrap();

    let mut x_rng = stream(seed, &config.tag("x"), rep_index);
    let mut eps_rng = stream(seed, &config.tag("eps"), rep_index);
    let mut delta_rng = stream(seed, &config.tag("delta"), rep_index);
    let mut gamma_rng = stream(seed, &config.tag("gamma"), rep_index);
    let mut strata_rng = stream(seed, &config.tag("strata"), rep_index);

    (0..config.m)
        .map(|_| {
            let x: Vec<f64> = (0..n).map(|_| x_dist.sample(&mut x_rng)).collect();
            let eps: Vec<f64> = (0..n).map(|_| eps_dist.sample(&mut eps_rng)).collect();
            let xbar = x.iter().sum::<f64>() / n as f64;
            let gamma = if config.add_gamma { gamma_dist.sample(&mut gamma_rng) } else { 0.0 };

            match config.scenario {
                Scenario::One | Scenario::Three => {
                    let delta = delta_dist.sample(&mut delta_rng);
                    let y: Vec<f64> = x
                        .iter()
                        .zip(&eps)
                        .map(|(&xj, &ej)| {
                            let mean = match config.scenario {
                                Scenario::One => xj - xbar,
                                _ => xj,
                            };
                            mean + delta + ej + gamma
                        })
                        .collect();
                    CompleteCluster { y1: y.clone(), y0: y, x, stratum: None }
                }
                Scenario::Two => {
                    let s = u8::from(strata_rng.gen::<f64>() < 0.6);
                    let sf = 2.0 * s as f64;
                    let y_at = |a: f64| -> Vec<f64> {
                        x.iter()
                            .zip(&eps)
                            .map(|(&xj, &ej)| sf * (a + xj + xbar) + ej + gamma)
                            .collect()
                    };
                    CompleteCluster { y1: y_at(1.0), y0: y_at(0.0), x, stratum: Some(s) }
                }
            }
        })
        .collect()
}

/// Generates one observed trial and the true Δ* for the scenario.
pub fn gen_trial(config: &ScenarioConfig, rep_index: u64) -> Result<(TrialDataset, f64)> {
    config.validate()?;
    let seed = config.master_seed;
    let clusters = draw_complete_clusters(config, rep_index);

    let default_scheme = match config.scenario {
        Scenario::Two => Scheme::Stratified,
        _ => Scheme::Simple,
    };
    let treatment: Vec<u8> = match config.assignment_override.unwrap_or(default_scheme) {
        Scheme::Stratified => {
            let labels: Vec<String> = clusters
                .iter()
                .map(|c| c.stratum.unwrap_or(0).to_string())
                .collect();
            stratified_assign(&labels, config.pi, &mut stream(seed, &config.tag("assign"), rep_index))?
        }
        Scheme::Simple => {
            simple_assign(config.m, config.pi, &mut stream(seed, &config.tag("assign"), rep_index))?
        }
    };

    let mut size_rng = stream(seed, &config.tag("sizes"), rep_index);
    let mut enroll_rng = stream(seed, &config.tag("enroll"), rep_index);

    let p = match config.scenario {
        Scenario::Two => 2,
        _ => 1,
    };
    let covariate_names: Vec<String> = match config.scenario {
        Scenario::Two => vec!["x".into(), "s".into()],
        _ => vec!["x".into()],
    };

    let records: Vec<ClusterRecord> = clusters
        .iter()
        .zip(&treatment)
        .enumerate()
        .map(|(i, (cluster, &a))| {
            let n_i = match config.scenario {
                Scenario::Two => 8,
                _ => size_rng.gen_range(4..=12usize),
            };
            let chosen = enroll(config.superpop_n, n_i, &mut enroll_rng)?;
            let source = if a == 1 { &cluster.y1 } else { &cluster.y0 };
            let outcomes: Vec<f64> = chosen.iter().map(|&j| source[j]).collect();
            debug_assert!(chosen.iter().all(|&j| {
                // potential-outcome consistency on every enrolled unit
                source[j] == if a == 1 { cluster.y1[j] } else { cluster.y0[j] }
            }));
            let mut covariates = Vec::with_capacity(n_i * p);
            for &j in &chosen {
                covariates.push(cluster.x[j]);
                if config.scenario == Scenario::Two {
                    covariates.push(cluster.stratum.unwrap() as f64);
                }
            }
            ClusterRecord::new(
                format!("c{i:05}"),
                a,
                outcomes,
                covariates,
                p,
                cluster.stratum.map(|s| s.to_string()),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let data = TrialDataset::new(records, covariate_names)?;
    Ok((data, config.scenario.true_delta()))
}

/// Monte Carlo estimate of the marginal intracluster correlation
/// Corr(Y_ij, Y_ik), j ≠ k, among observed cluster members.
///
/// Computed on the untreated outcomes, so the correlation reflects the
/// outcome model itself rather than the between-arm shift that treatment
/// assignment would add to the within-cluster covariance.
pub fn icc_estimate(config: &ScenarioConfig, n_clusters_mc: usize) -> Result<f64> {
    config.validate()?;
    if n_clusters_mc < 1_000 {
        return Err(Error::Config("ICC estimation needs at least 1000 clusters".into()));
    }
    let batch = 2_000usize;
    let mut batch_config = config.clone();
    batch_config.m = batch;

    // per-cluster sums and sums of squares are sufficient for all
    // within-cluster pair products
    let mut cluster_stats: Vec<(f64, f64, usize)> = Vec::with_capacity(n_clusters_mc);
    let mut total_sum = 0.0;
    let mut total_sq = 0.0;
    let mut total_obs = 0usize;

    let mut rep = 0u64;
    while cluster_stats.len() < n_clusters_mc {
        let clusters = draw_complete_clusters(&batch_config, rep);
        let seed = batch_config.master_seed;
        let mut size_rng = stream(seed, &batch_config.tag("sizes"), rep);
        let mut enroll_rng = stream(seed, &batch_config.tag("enroll"), rep);
        for cluster in &clusters {
            let n_i = match batch_config.scenario {
                Scenario::Two => 8,
                _ => size_rng.gen_range(4..=12usize),
            };
            let chosen = enroll(batch_config.superpop_n, n_i, &mut enroll_rng)?;
            if cluster_stats.len() >= n_clusters_mc {
                break;
            }
            let outcomes: Vec<f64> = chosen.iter().map(|&j| cluster.y0[j]).collect();
            let s: f64 = outcomes.iter().sum();
            let ss: f64 = outcomes.iter().map(|y| y * y).sum();
            cluster_stats.push((s, ss, n_i));
            total_sum += s;
            total_sq += ss;
            total_obs += n_i;
        }
        rep += 1;
    }

    let mu = total_sum / total_obs as f64;
    let var = total_sq / total_obs as f64 - mu * mu;
    let mut pair_sum = 0.0;
    let mut pair_count = 0.0;
    for &(s, ss, n) in &cluster_stats {
        let nf = n as f64;
        let centered_sum = s - nf * mu;
        let centered_sq = ss - 2.0 * mu * s + nf * mu * mu;
        pair_sum += centered_sum * centered_sum - centered_sq;
        pair_count += nf * (nf - 1.0);
    }
    Ok(pair_sum / pair_count / var)
}

/// [`icc_estimate`] plus a Monte Carlo standard error: the cluster budget
/// is split across `n_batches` independent batches (each with its own
/// derived master seed) and the SE is the standard error of the batch
/// mean.
pub fn icc_estimate_with_se(
    config: &ScenarioConfig,
    n_clusters_mc: usize,
    n_batches: usize,
) -> Result<(f64, f64)> {
    if n_batches < 2 {
        return Err(Error::Config("need at least 2 batches for a standard error".into()));
    }
    let per_batch = n_clusters_mc / n_batches;
    let estimates: Vec<f64> = (0..n_batches)
        .map(|b| {
            let mut batch_config = config.clone();
            batch_config.master_seed = config
                .master_seed
                .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(b as u64 + 1));
            icc_estimate(&batch_config, per_batch)
        })
        .collect::<Result<_>>()?;
    let k = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / k;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Ok((mean, (var / k).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngstream::stream;

    #[test]
    fn cluster_size_ranges() {
        let cfg = ScenarioConfig::new(Scenario::One, 50, 3);
        let (data, delta) = gen_trial(&cfg, 0).unwrap();
        assert_eq!(delta, 0.0);
        for c in data.clusters() {
            assert!((4..=12).contains(&c.size()));
        }

        let cfg2 = ScenarioConfig::new(Scenario::Two, 50, 3);
        let (data2, delta2) = gen_trial(&cfg2, 0).unwrap();
        assert_eq!(delta2, 1.2);
        for c in data2.clusters() {
            assert_eq!(c.size(), 8);
            assert!(c.stratum.is_some());
        }
        assert_eq!(data2.p(), 2);
    }

    #[test]
    fn rejects_small_superpopulation() {
        let mut cfg = ScenarioConfig::new(Scenario::One, 10, 0);
        cfg.superpop_n = 10;
        assert!(gen_trial(&cfg, 0).is_err());
        let mut cfg2 = ScenarioConfig::new(Scenario::Two, 10, 0);
        cfg2.superpop_n = 8;
        assert!(cfg2.validate().is_ok());
    }

    #[test]
    fn determinism() {
        let cfg = ScenarioConfig::new(Scenario::Three, 20, 77);
        let (a, _) = gen_trial(&cfg, 5).unwrap();
        let (b, _) = gen_trial(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let (c, _) = gen_trial(&cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn enroll_full_set_and_determinism() {
        let mut rng = stream(1, "e", 0);
        let mut idx = enroll(4, 4, &mut rng).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);

        let a = enroll(10, 3, &mut stream(2, "e", 1)).unwrap();
        let b = enroll(10, 3, &mut stream(2, "e", 1)).unwrap();
        assert_eq!(a, b);

        assert!(enroll(4, 5, &mut rng).is_err());
        assert!(enroll(4, 0, &mut rng).is_err());
    }

    #[test]
    fn enroll_uniformity() {
        let mut counts = [0usize; 4];
        let reps = 100_000u64;
        for rep in 0..reps {
            let idx = enroll(4, 1, &mut stream(8, "u", rep)).unwrap();
            counts[idx[0]] += 1;
        }
        let bound = 3.0 * (0.25 * 0.75 / reps as f64).sqrt();
        for c in counts {
            let frac = c as f64 / reps as f64;
            assert!((frac - 0.25).abs() < bound, "frequency {frac}");
        }
    }

    #[test]
    fn enrollment_independent_of_outcomes() {
        // correlation between N_i and cluster-mean potential outcome
        let cfg = ScenarioConfig::new(Scenario::One, 4000, 21);
        let (data, _) = gen_trial(&cfg, 0).unwrap();
        let sizes: Vec<f64> = data.clusters().iter().map(|c| c.size() as f64).collect();
        let means: Vec<f64> = data
            .clusters()
            .iter()
            .map(|c| c.outcomes.iter().sum::<f64>() / c.size() as f64)
            .collect();
        let m = sizes.len() as f64;
        let sbar = sizes.iter().sum::<f64>() / m;
        let ybar = means.iter().sum::<f64>() / m;
        let cov: f64 = sizes
            .iter()
            .zip(&means)
            .map(|(s, y)| (s - sbar) * (y - ybar))
            .sum::<f64>()
            / m;
        let sd_s = (sizes.iter().map(|s| (s - sbar).powi(2)).sum::<f64>() / m).sqrt();
        let sd_y = (means.iter().map(|y| (y - ybar).powi(2)).sum::<f64>() / m).sqrt();
        let corr = cov / (sd_s * sd_y);
        assert!(corr.abs() < 3.0 / (m.sqrt()), "corr {corr}");
    }

    #[test]
    fn scenario_two_null_stratum_outcomes_are_noise() {
        // S = 0 clusters: Y = ε, so cluster means have mean 0 and variance 25/8
        let cfg = ScenarioConfig::new(Scenario::Two, 3000, 13);
        let (data, _) = gen_trial(&cfg, 0).unwrap();
        let null_means: Vec<f64> = data
            .clusters()
            .iter()
            .filter(|c| c.stratum.as_deref() == Some("0"))
            .map(|c| c.outcomes.iter().sum::<f64>() / c.size() as f64)
            .collect();
        assert!(null_means.len() > 500);
        let k = null_means.len() as f64;
        let mean = null_means.iter().sum::<f64>() / k;
        assert!(mean.abs() < 3.0 * (25.0 / 8.0 / k).sqrt(), "mean {mean}");
    }
}

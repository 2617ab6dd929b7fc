//! Treatment assignment generators: simple Bernoulli and stratified
//! cluster randomization.

use rand::Rng;

use crate::error::{Error, Result};

/// Randomization scheme for an assignment plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Simple,
    Stratified,
}

/// Declarative description of how clusters are randomized.
#[derive(Debug, Clone)]
pub struct AssignmentPlan {
    pub scheme: Scheme,
    pub pi: f64,
    /// Per-cluster stratum labels, required for [`Scheme::Stratified`].
    pub strata: Option<Vec<String>>,
}

impl AssignmentPlan {
    pub fn new(scheme: Scheme, pi: f64, strata: Option<Vec<String>>) -> Result<Self> {
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::InvalidPi(pi));
        }
        if scheme == Scheme::Stratified && strata.is_none() {
            return Err(Error::Config("stratified assignment requires strata labels".into()));
        }
        Ok(Self { scheme, pi, strata })
    }
}

/// i.i.d. Bernoulli(π) assignments.
pub fn simple_assign(m: usize, pi: f64, rng: &mut impl Rng) -> Result<Vec<u8>> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::InvalidPi(pi));
    }
    Ok((0..m).map(|_| u8::from(rng.gen::<f64>() < pi)).collect())
}

/// Stratified assignment with exact within-stratum balance and randomized
/// remainder: a stratum of size n_s treats k_s = ⌊π·n_s⌋ + Bernoulli(frac)
/// clusters, chosen uniformly, so P(A_i = 1) = π exactly.
pub fn stratified_assign<S: AsRef<str>>(
    strata: &[S],
    pi: f64,
    rng: &mut impl Rng,
) -> Result<Vec<u8>> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::InvalidPi(pi));
    }
    let mut assignment = vec![0u8; strata.len()];

    // group indices by stratum label, first-appearance order
    let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
    for (i, s) in strata.iter().enumerate() {
        let label = s.as_ref();
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((label, vec![i])),
        }
    }

    for (_, mut indices) in groups {
        let n_s = indices.len();
        let target = pi * n_s as f64;
        let mut k = target.floor() as usize;
        let frac = target - target.floor();
        if rng.gen::<f64>() < frac {
            k += 1;
        }
        // partial Fisher-Yates: the first k entries are a uniform subset
        for j in 0..k.min(n_s) {
            let pick = rng.gen_range(j..n_s);
            indices.swap(j, pick);
            assignment[indices[j]] = 1;
        }
    }
    Ok(assignment)
}

//! Helpers shared by the oracle, property, and acceptance suites:
//! dense linear-algebra constructions, synthetic datasets, the
//! brute-force likelihood grid search, and the estimating-function
//! residuals evaluated at a fit.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crt_ancova::csalg::cs_inverse_apply;
use crt_ancova::mmfit::{build_design, profile_loglik};
use crt_ancova::rngstream::stream;
use crt_ancova::{
    ClusterRecord, CompoundSymmetry, EstimationMode, MixedFit, TrialDataset,
};

/// Dense σ²I + τ²11ᵀ.
pub fn dense_sigma(cs: &CompoundSymmetry, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        cs.tau2() + if i == j { cs.sigma2() } else { 0.0 }
    })
}

/// The (σ², τ²) grid the compound-symmetry kernels are checked over.
pub fn parameter_grid() -> Vec<CompoundSymmetry> {
    let mut out = Vec::new();
    for &sigma2 in &[1e-3, 0.5, 1.0, 7.3, 1e3] {
        for &tau2 in &[0.0, 1e-3, 0.4, 2.0, 1e3] {
            out.push(CompoundSymmetry::new(sigma2, tau2).unwrap());
        }
    }
    out
}

/// Random dataset with sizes drawn from `sizes` and `p` covariates.
pub fn random_dataset(seed_rep: u64, m: usize, sizes: &[usize], p: usize) -> TrialDataset {
    let mut rng = stream(77, "oracle/data", seed_rep);
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let clusters: Vec<ClusterRecord> = (0..m)
            .map(|i| {
                let n = sizes[rng.gen_range(0..sizes.len())];
                let a = u8::from(rng.gen::<f64>() < 0.5);
                let shift = normal.sample(&mut rng); // cluster effect
                let x: Vec<f64> = (0..n * p).map(|_| normal.sample(&mut rng)).collect();
                let y: Vec<f64> = (0..n)
                    .map(|j| {
                        let xsum: f64 = (0..p).map(|k| x[j * p + k]).sum();
                        1.0 + 0.8 * a as f64 + 0.5 * xsum + shift + normal.sample(&mut rng)
                    })
                    .collect();
                ClusterRecord::new(format!("c{i}"), a, y, x, p, None).unwrap()
            })
            .collect();
        let treated: usize = clusters.iter().map(|c| c.treatment as usize).sum();
        if treated == 0 || treated == m {
            continue; // resample until both arms appear
        }
        let names = (0..p).map(|k| format!("x{k}")).collect();
        return TrialDataset::new(clusters, names).unwrap();
    }
}

/// Small synthetic trial whose τ̂² lands on the boundary when
/// `icc_strength` is 0 and in the interior when it is large.
pub fn noisy_dataset(seed_rep: u64, m: usize, icc_strength: f64) -> TrialDataset {
    let mut rng = stream(55, "prop/data", seed_rep);
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let clusters: Vec<ClusterRecord> = (0..m)
            .map(|i| {
                let n = rng.gen_range(2..=5usize);
                let a = u8::from(rng.gen::<f64>() < 0.5);
                let shift = icc_strength * normal.sample(&mut rng);
                let x: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                let y: Vec<f64> = (0..n)
                    .map(|j| 0.4 * a as f64 + 0.7 * x[j] + shift + normal.sample(&mut rng))
                    .collect();
                ClusterRecord::new(format!("c{i}"), a, y, x, 1, None).unwrap()
            })
            .collect();
        let treated: usize = clusters.iter().map(|c| c.treatment as usize).sum();
        if treated > 0 && treated < m {
            return TrialDataset::new(clusters, vec!["x".into()]).unwrap();
        }
    }
}

/// Stacks the full dense design, outcome vector, and block-diagonal Σ.
pub fn dense_stack(
    data: &TrialDataset,
    cs: &CompoundSymmetry,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let p = data.p();
    let n = data.total_observations();
    let mut q = DMatrix::zeros(n, p + 2);
    let mut y = DVector::zeros(n);
    let mut sigma = DMatrix::zeros(n, n);
    let mut row = 0;
    for rec in data.clusters() {
        let qi = build_design(rec, p);
        let ni = rec.size();
        for j in 0..ni {
            for k in 0..p + 2 {
                q[(row + j, k)] = qi[(j, k)];
            }
            y[row + j] = rec.outcomes[j];
            for l in 0..ni {
                sigma[(row + j, row + l)] =
                    cs.tau2() + if j == l { cs.sigma2() } else { 0.0 };
            }
        }
        row += ni;
    }
    (q, y, sigma)
}

/// Brute-force profiled-likelihood maximization over (log σ², τ²): a
/// 400×400 grid refined twice around the running argmax. Returns
/// (σ̂², τ̂², objective).
pub fn grid_search_fit(data: &TrialDataset, mode: EstimationMode) -> (f64, f64, f64) {
    let ys: Vec<f64> = data
        .clusters()
        .iter()
        .flat_map(|c| c.outcomes.iter().copied())
        .collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (ys.len() as f64 - 1.0);

    let mut lo = ((var / 200.0).ln(), 0.0);
    let mut hi = ((var * 20.0).ln(), 4.0 * var);
    let cells = 400usize;
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for _pass in 0..3 {
        let step = ((hi.0 - lo.0) / cells as f64, (hi.1 - lo.1) / cells as f64);
        for i in 0..=cells {
            let ls = lo.0 + step.0 * i as f64;
            for j in 0..=cells {
                let tau2 = lo.1 + step.1 * j as f64;
                let cs = CompoundSymmetry::new(ls.exp(), tau2).unwrap();
                if let Ok(obj) = profile_loglik(data, &cs, mode) {
                    if obj > best.0 {
                        best = (obj, ls, tau2);
                    }
                }
            }
        }
        // shrink the window to ±2 cells around the argmax
        lo = (best.1 - 2.0 * step.0, (best.2 - 2.0 * step.1).max(0.0));
        hi = (best.1 + 2.0 * step.0, best.2 + 2.0 * step.1);
    }
    (best.1.exp(), best.2, best.0)
}

/// The three blocks of the ML estimating function at (β̂, σ̂², τ̂²):
/// the GLS score ΣQᵀΣ⁻¹r, ∂ℓ/∂σ², and ∂ℓ/∂τ², each normalized by the
/// magnitude of its positive part so "small" is scale-free.
pub fn score_residuals(mf: &MixedFit, data: &TrialDataset) -> (f64, f64, f64) {
    let cs = mf.components();
    let p = mf.n_params_p;
    let d = p + 2;
    let beta = nalgebra::DVector::from_column_slice(&mf.beta);

    let mut beta_score = vec![0.0; d];
    let mut beta_scale = vec![0.0; d];
    let mut sigma2_score = 0.0;
    let mut sigma2_scale = 0.0;
    let mut tau2_score = 0.0;
    let mut tau2_scale = 0.0;

    for rec in data.clusters() {
        let n = rec.size();
        let nf = n as f64;
        let q = build_design(rec, p);
        let y = nalgebra::DVector::from_column_slice(&rec.outcomes);
        let r = y - &q * &beta;
        let wr = cs_inverse_apply(&cs, r.as_slice());

        for k in 0..d {
            for j in 0..n {
                beta_score[k] += q[(j, k)] * wr[j];
                beta_scale[k] += (q[(j, k)] * wr[j]).abs();
            }
        }

        // tr(Σ⁻¹) from the Woodbury form σ⁻²I − b·11ᵀ
        let b = cs.tau2() / (cs.sigma2() * (cs.sigma2() + nf * cs.tau2()));
        let trace = nf / cs.sigma2() - nf * b;
        let wwr = cs_inverse_apply(&cs, &wr);
        let r_quad2: f64 = r.iter().zip(&wwr).map(|(a, c)| a * c).sum();
        sigma2_score += 0.5 * (r_quad2 - trace);
        sigma2_scale += 0.5 * (r_quad2.abs() + trace);

        let ones_wr: f64 = wr.iter().sum();
        let ones_quad = cs.ones_quadform(n);
        tau2_score += 0.5 * (ones_wr * ones_wr - ones_quad);
        tau2_scale += 0.5 * (ones_wr * ones_wr + ones_quad);
    }

    let beta_rel = beta_score
        .iter()
        .zip(&beta_scale)
        .map(|(s, sc)| s.abs() / sc.max(1e-300))
        .fold(0.0f64, f64::max);
    (beta_rel, sigma2_score / sigma2_scale.max(1e-300), tau2_score / tau2_scale.max(1e-300))
}

/// Per-size weights for the Jensen / Cauchy-Schwarz grids.
pub fn size_distributions() -> Vec<Vec<(usize, f64)>> {
    vec![
        vec![(8, 1.0)],                      // degenerate
        (4..=12).map(|n| (n, 1.0)).collect(), // uniform {4..12}
        vec![(2, 0.5), (10, 0.5)],           // bimodal
        vec![(1, 0.2), (3, 0.3), (30, 0.5)], // skewed
    ]
}

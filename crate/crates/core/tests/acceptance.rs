//! The eight acceptance criteria, one test per criterion, each emitting a
//! single PASS/FAIL line. Criteria 1–5 and 8 reproduce the benchmark
//! simulation results and diagnostics at full replication counts; criteria
//! 6 and 7 run the oracle-equivalence and structural-property checks.

mod common;
use common::{
    dense_sigma, dense_stack, grid_search_fit, noisy_dataset, parameter_grid, random_dataset,
    score_residuals, size_distributions,
};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crt_ancova::csalg::{cs_inverse_apply, cs_logdet};
use crt_ancova::mmfit::gls_beta;
use crt_ancova::randomize::Scheme;
use crt_ancova::variance::cluster_level_true_variance;
use crt_ancova::{
    compare_ml_reml, fit, fit_cluster_ancova, fit_unadjusted, gen_trial, icc_estimate,
    model_based_variance, run_study, sandwich_variance, ClusterVarianceMode, CompoundSymmetry,
    EstimationMode, EstimatorSpec, FitConfig, MetricsTable, Scenario, ScenarioConfig,
    TrialDataset,
};

const REPS_TABLE: usize = 10_000;
const LEVEL: f64 = 0.95;

fn conclude(tag: &str, failures: Vec<String>) {
    if failures.is_empty() {
        println!("{tag}: PASS");
    } else {
        println!("{tag}: FAIL");
        panic!("{tag}: FAIL\n  {}", failures.join("\n  "));
    }
}

fn check(failures: &mut Vec<String>, ok: bool, detail: String) {
    if !ok {
        failures.push(detail);
    }
}

fn scenarios() -> [Scenario; 3] {
    [Scenario::One, Scenario::Two, Scenario::Three]
}

fn table(scenario: Scenario, m: usize, seed: u64, gamma: bool) -> MetricsTable {
    let mut sc = ScenarioConfig::new(scenario, m, seed);
    sc.add_gamma = gamma;
    run_study(&sc, &EstimatorSpec::default_roster(), REPS_TABLE, LEVEL).unwrap()
}

/// Benchmark values at m=200: (EmpSE, RE) per (scenario, roster row).
const MAIN_M200: [[(f64, f64); 3]; 3] = [
    [(0.29, 1.00), (0.30, 0.96), (0.30, 0.94)],
    [(0.41, 1.00), (0.34, 1.40), (0.32, 1.58)],
    [(0.31, 1.00), (0.29, 1.12), (0.30, 1.05)],
];

#[test]
fn criterion_1_main_benchmark_large_m() {
    let mut failures = Vec::new();
    for (s_idx, scenario) in scenarios().into_iter().enumerate() {
        let t = table(scenario, 200, 9001 + s_idx as u64, false);
        for (r_idx, row) in t.rows.iter().enumerate() {
            let (target_empse, target_re) = MAIN_M200[s_idx][r_idx];
            let who = format!("{scenario:?}/{}", row.label);
            check(
                &mut failures,
                row.bias.abs() <= 0.02,
                format!("{who}: |bias| {} > 0.02", row.bias.abs()),
            );
            check(
                &mut failures,
                (row.emp_se - target_empse).abs() <= 0.02,
                format!("{who}: EmpSE {} vs benchmark {target_empse}", row.emp_se),
            );
            check(
                &mut failures,
                (row.ase - row.emp_se).abs() <= 0.02,
                format!("{who}: ASE {} vs EmpSE {}", row.ase, row.emp_se),
            );
            check(
                &mut failures,
                (0.94..=0.96).contains(&row.cp),
                format!("{who}: CP {} outside [0.94, 0.96]", row.cp),
            );
            check(
                &mut failures,
                (row.re - target_re).abs() <= 0.06,
                format!("{who}: RE {} vs benchmark {target_re}", row.re),
            );
        }
    }
    conclude("criterion 1 (main benchmark, m=200)", failures);
}

#[test]
fn criterion_2_main_benchmark_small_m() {
    let mut failures = Vec::new();
    for (s_idx, scenario) in scenarios().into_iter().enumerate() {
        let t = table(scenario, 20, 9011 + s_idx as u64, false);
        for row in &t.rows {
            check(
                &mut failures,
                (0.91..=0.96).contains(&row.cp),
                format!("{scenario:?}/{}: CP {} outside [0.91, 0.96]", row.label, row.cp),
            );
        }
        if scenario == Scenario::Two {
            let re = t.rows[1].re;
            check(
                &mut failures,
                (re - 1.40).abs() <= 0.08,
                format!("Two/mixed-model ANCOVA: RE {re} vs benchmark 1.40"),
            );
        }
    }
    conclude("criterion 2 (main benchmark, m=20)", failures);
}

#[test]
fn criterion_3_gamma_variant() {
    // (scenario index, roster row, benchmark RE, tolerance)
    let cells = [(0usize, 1usize, 0.99, 0.04), (1, 1, 1.08, 0.05), (1, 2, 1.11, 0.05), (2, 1, 1.02, 0.04)];
    let mut failures = Vec::new();
    let tables: Vec<MetricsTable> = scenarios()
        .into_iter()
        .enumerate()
        .map(|(s_idx, scenario)| table(scenario, 200, 9021 + s_idx as u64, true))
        .collect();
    for (s_idx, r_idx, target_re, tol) in cells {
        let row = &tables[s_idx].rows[r_idx];
        check(
            &mut failures,
            (row.re - target_re).abs() <= tol,
            format!("scenario {}/{}: RE {} vs benchmark {target_re}", s_idx + 1, row.label, row.re),
        );
        check(
            &mut failures,
            (0.94..=0.96).contains(&row.cp),
            format!("scenario {}/{}: CP {} outside [0.94, 0.96]", s_idx + 1, row.label, row.cp),
        );
    }
    conclude("criterion 3 (Gamma variant, m=200)", failures);
}

#[test]
fn criterion_4_ml_reml_comparison() {
    let mut failures = Vec::new();
    // m=200: every paired ML/REML metric agrees within 0.01
    for (s_idx, scenario) in scenarios().into_iter().enumerate() {
        let sc = ScenarioConfig::new(scenario, 200, 9031 + s_idx as u64);
        let t = compare_ml_reml(&sc, REPS_TABLE, LEVEL).unwrap();
        for pair in [(0usize, 1usize), (2, 3)] {
            let (ml, reml) = (&t.rows[pair.0], &t.rows[pair.1]);
            for (name, a, b) in [
                ("bias", ml.bias, reml.bias),
                ("EmpSE", ml.emp_se, reml.emp_se),
                ("ASE", ml.ase, reml.ase),
                ("CP", ml.cp, reml.cp),
                ("RE", ml.re, reml.re),
            ] {
                check(
                    &mut failures,
                    (a - b).abs() <= 0.01,
                    format!("{scenario:?} m=200 {}: {name} {a} vs {b}", ml.label),
                );
            }
        }
    }
    // m=20, Scenario 3: the REML ANCOVA model-based SE averages at least
    // 0.02 below the ML one (benchmark 0.95 vs 0.99)
    let sc = ScenarioConfig::new(Scenario::Three, 20, 9041);
    let t = compare_ml_reml(&sc, REPS_TABLE, LEVEL).unwrap();
    let (ml_ase, reml_ase) = (t.rows[2].ase, t.rows[3].ase);
    check(
        &mut failures,
        reml_ase <= ml_ase - 0.02,
        format!("Three m=20 ANCOVA: REML ASE {reml_ase} not below ML ASE {ml_ase} by 0.02"),
    );
    conclude("criterion 4 (ML/REML comparison)", failures);
}

#[test]
fn criterion_5_icc_diagnostics() {
    let expected = [(false, [0.02, 0.09, 0.03]), (true, [0.47, 0.45, 0.47])];
    let mut failures = Vec::new();
    for (gamma, targets) in expected {
        for (s_idx, scenario) in scenarios().into_iter().enumerate() {
            let mut sc = ScenarioConfig::new(scenario, 200, 9051);
            sc.add_gamma = gamma;
            let icc = icc_estimate(&sc, 100_000).unwrap();
            check(
                &mut failures,
                (icc - targets[s_idx]).abs() <= 0.01,
                format!("{scenario:?} gamma={gamma}: ICC {icc} vs benchmark {}", targets[s_idx]),
            );
        }
    }
    conclude("criterion 5 (ICC diagnostics)", failures);
}

#[test]
fn criterion_6_oracle_equivalence() {
    let mut failures = Vec::new();
    let config = FitConfig::default();

    // optimizer vs brute-force likelihood grid, 20 random small datasets
    for rep in 0..20 {
        let data = random_dataset(500 + rep, 8, &[2, 3, 4], 1);
        let mf = fit(&data, EstimationMode::Ml, &config).unwrap();
        let (g_sigma2, g_tau2, g_loglik) = grid_search_fit(&data, EstimationMode::Ml);
        check(
            &mut failures,
            (mf.sigma2_hat - g_sigma2).abs() < 1e-4 * g_sigma2.max(1.0)
                && (mf.tau2_hat - g_tau2).abs() < 1e-4 * g_tau2.max(1.0)
                && (mf.loglik - g_loglik).abs() < 1e-6 * g_loglik.abs().max(1.0),
            format!(
                "grid oracle rep {rep}: ({}, {}, {}) vs ({g_sigma2}, {g_tau2}, {g_loglik})",
                mf.sigma2_hat, mf.tau2_hat, mf.loglik
            ),
        );
    }

    // csalg vs dense linear algebra over the parameter grid
    for cs in parameter_grid() {
        for n in [1usize, 3, 20] {
            let sigma = dense_sigma(&cs, n);
            let mut max_err = 0.0f64;
            for j in 0..n {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                let col = cs_inverse_apply(&cs, &e);
                let prod = &sigma * DVector::from_vec(col);
                for i in 0..n {
                    max_err = max_err.max((prod[i] - f64::from(u8::from(i == j))).abs());
                }
            }
            let chol = nalgebra::Cholesky::new(sigma).unwrap();
            let dense_ld: f64 =
                2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            let ld_err = (cs_logdet(&cs, n) - dense_ld).abs() / dense_ld.abs().max(1.0);
            check(
                &mut failures,
                max_err < 1e-9 && ld_err < 1e-9,
                format!(
                    "csalg at σ²={}, τ²={}, n={n}: inverse err {max_err}, logdet err {ld_err}",
                    cs.sigma2(),
                    cs.tau2()
                ),
            );
        }
    }

    // GLS and both variance estimators vs dense block-matrix oracles
    for rep in 0..5 {
        let data = random_dataset(200 + rep, 8, &[2, 3, 4], 1);
        let d = data.p() + 2;
        let cs = CompoundSymmetry::new(1.3, 0.6).unwrap();
        let (q, y, sigma) = dense_stack(&data, &cs);
        let sinv = sigma.try_inverse().unwrap();
        let gram = q.transpose() * &sinv * &q;
        let dense_beta = gram.try_inverse().unwrap() * q.transpose() * &sinv * &y;
        let fast_beta = gls_beta(&data, &cs).unwrap();
        let beta_err = (0..d)
            .map(|k| (fast_beta[k] - dense_beta[k]).abs() / dense_beta[k].abs().max(1.0))
            .fold(0.0f64, f64::max);
        check(&mut failures, beta_err < 1e-9, format!("gls_beta rep {rep}: err {beta_err}"));

        let mf = fit(&data, EstimationMode::Ml, &config).unwrap();
        let (qf, yf, sigf) = dense_stack(&data, &mf.components());
        let sinvf = sigf.try_inverse().unwrap();
        let m = data.m() as f64;
        let factor = m / (m - data.p() as f64 - 2.0);
        let dense_mb =
            (qf.transpose() * &sinvf * &qf).try_inverse().unwrap() * factor;
        let (fast_mb, _) = model_based_variance(&mf, &data).unwrap();
        let mb_err = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| (fast_mb[(i, j)] - dense_mb[(i, j)]).abs() / dense_mb[(i, j)].abs().max(1.0))
            .fold(0.0f64, f64::max);
        check(&mut failures, mb_err < 1e-9, format!("model-based rep {rep}: err {mb_err}"));

        let bread = &dense_mb / factor;
        let beta_hat = DVector::from_column_slice(&mf.beta);
        let mut meat = DMatrix::zeros(d, d);
        let mut row = 0;
        for rec in data.clusters() {
            let ni = rec.size();
            let qi = qf.rows(row, ni);
            let ri = yf.rows(row, ni) - qi * &beta_hat;
            let si = dense_sigma(&mf.components(), ni).try_inverse().unwrap();
            let t = qi.transpose() * si * ri;
            meat += &t * t.transpose();
            row += ni;
        }
        let dense_sw = &bread * meat * &bread;
        let (fast_sw, _) = sandwich_variance(&mf, &data).unwrap();
        let scale = dense_sw[(1, 1)].abs().max(1e-12);
        let sw_err = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| (fast_sw[(i, j)] - dense_sw[(i, j)]).abs() / scale.max(dense_sw[(i, j)].abs()))
            .fold(0.0f64, f64::max);
        check(&mut failures, sw_err < 1e-9, format!("sandwich rep {rep}: err {sw_err}"));
    }

    conclude("criterion 6 (oracle equivalence)", failures);
}

#[test]
fn criterion_7_property_suite() {
    let mut failures = Vec::new();
    let config = FitConfig::default();

    // estimating-equation residuals at converged ML fits, with the KKT
    // one-sided condition at the τ̂²=0 boundary
    for (rep, strength) in [(0u64, 1.0), (1, 1.0), (2, 1.0), (3, 0.0), (4, 0.0), (5, 0.0)] {
        let data = noisy_dataset(rep, 16, strength);
        let mf = fit(&data, EstimationMode::Ml, &config).unwrap();
        let (beta_rel, sigma2_rel, tau2_rel) = score_residuals(&mf, &data);
        let tau_ok =
            if mf.tau2_hat == 0.0 { tau2_rel < 1e-5 } else { tau2_rel.abs() < 1e-5 };
        check(
            &mut failures,
            beta_rel < 1e-5 && sigma2_rel.abs() < 1e-5 && tau_ok,
            format!("scores rep {rep}: β {beta_rel}, σ² {sigma2_rel}, τ² {tau2_rel}"),
        );
    }

    // covariate rescaling and outcome translation invariances at 1e-8
    let base = noisy_dataset(11, 20, 1.0);
    let transform = |f: &dyn Fn(&mut crt_ancova::ClusterRecord)| -> TrialDataset {
        let clusters = base
            .clusters()
            .iter()
            .map(|c| {
                let mut c2 = c.clone();
                f(&mut c2);
                c2
            })
            .collect();
        TrialDataset::new(clusters, vec!["x".into()]).unwrap()
    };
    let scaled = transform(&|c| c.covariates.iter_mut().for_each(|x| *x *= 37.5));
    let shifted = transform(&|c| c.outcomes.iter_mut().for_each(|y| *y += 250.0));
    let a = fit(&base, EstimationMode::Ml, &config).unwrap();
    let b = fit(&scaled, EstimationMode::Ml, &config).unwrap();
    let c = fit(&shifted, EstimationMode::Ml, &config).unwrap();
    check(
        &mut failures,
        (a.delta_hat() - b.delta_hat()).abs() < 1e-8 * a.delta_hat().abs().max(1.0)
            && (a.sigma2_hat - b.sigma2_hat).abs() < 1e-8 * a.sigma2_hat
            && (a.tau2_hat - b.tau2_hat).abs() < 1e-8 * a.sigma2_hat,
        format!("rescaling: Δ̂ {} vs {}", a.delta_hat(), b.delta_hat()),
    );
    check(
        &mut failures,
        (a.delta_hat() - c.delta_hat()).abs() < 1e-8 * (1.0 + a.delta_hat().abs())
            && (c.beta[0] - a.beta[0] - 250.0).abs() < 1e-8 * 250.0,
        format!("translation: Δ̂ {} vs {}", a.delta_hat(), c.delta_hat()),
    );

    // Jensen and Cauchy-Schwarz inequalities with strictness at
    // non-degenerate size distributions
    for &sigma2 in &[0.5, 1.0, 25.0] {
        for &tau2 in &[0.0, 0.1, 1.0, 5.0] {
            for dist in size_distributions() {
                let total: f64 = dist.iter().map(|&(_, w)| w).sum();
                let e_n: f64 = dist.iter().map(|&(n, w)| w / total * n as f64).sum();
                let e_weight: f64 = dist
                    .iter()
                    .map(|&(n, w)| w / total * n as f64 / (sigma2 + n as f64 * tau2))
                    .sum();
                let rhs = e_n / (sigma2 + e_n * tau2);
                let jensen = e_weight <= rhs + 1e-12 * rhs
                    && (dist.len() == 1 || tau2 == 0.0 || e_weight < rhs);
                let v = 4.0 / e_weight;
                let v_cl = cluster_level_true_variance(sigma2, tau2, &dist);
                let cauchy = v <= v_cl * (1.0 + 1e-12) && (dist.len() == 1 || v < v_cl);
                check(
                    &mut failures,
                    jensen && cauchy,
                    format!("inequalities at σ²={sigma2}, τ²={tau2}: {e_weight} vs {rhs}; {v} vs {v_cl}"),
                );
            }
        }
    }

    // equal-cluster-size coincidence of the unadjusted mixed estimator
    // and the p=0 cluster-level ANCOVA
    let sc = ScenarioConfig::new(Scenario::Two, 24, 31);
    let (data, _) = gen_trial(&sc, 0).unwrap();
    let mixed = fit_unadjusted(&data, EstimationMode::Ml, &config).unwrap();
    let cl = fit_cluster_ancova(&data.without_covariates(), ClusterVarianceMode::Classical, LEVEL)
        .unwrap();
    check(
        &mut failures,
        (mixed.delta_hat() - cl.report.delta_hat).abs()
            < 1e-8 * cl.report.delta_hat.abs().max(1.0),
        format!("coincidence: {} vs {}", mixed.delta_hat(), cl.report.delta_hat),
    );

    // Stratified assignment lowers the unadjusted EmpSE in
    // Scenario 2 beyond 3·MCSE (40,000 reps; the true SD gap ≈ 0.008
    // needs this many replications for the margin to clear it)
    let emp = |override_scheme: Option<Scheme>| -> (f64, f64) {
        let mut sc = ScenarioConfig::new(Scenario::Two, 200, 2024);
        sc.assignment_override = override_scheme;
        let deltas: Vec<f64> = (0..40_000u64)
            .into_par_iter()
            .map(|rep| {
                let (data, _) = gen_trial(&sc, rep).unwrap();
                fit_unadjusted(&data, EstimationMode::Ml, &config).unwrap().delta_hat()
            })
            .collect();
        let k = deltas.len() as f64;
        let mean = deltas.iter().sum::<f64>() / k;
        let sd = (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
        (sd, sd / (2.0 * (k - 1.0)).sqrt())
    };
    let (sd_strat, mcse_strat) = emp(None);
    let (sd_simple, mcse_simple) = emp(Some(Scheme::Simple));
    let margin = 3.0 * (mcse_strat.powi(2) + mcse_simple.powi(2)).sqrt();
    check(
        &mut failures,
        sd_strat <= sd_simple - margin,
        format!("stratification: stratified {sd_strat} vs simple {sd_simple}, margin {margin}"),
    );

    conclude("criterion 7 (property suite)", failures);
}

#[test]
fn criterion_8_variance_consistency() {
    let mut failures = Vec::new();
    let config = FitConfig::default();
    let reps = 2_000u64;

    for scenario in scenarios() {
        let sc = ScenarioConfig::new(scenario, 500, 9081);
        // per rep: (Δ̂, Var̂) for the unadjusted and ANCOVA mixed estimators,
        // plus the sandwich/model-based SE ratio for the ANCOVA fit
        let samples: Vec<(f64, f64, f64, f64, f64)> = (0..reps)
            .into_par_iter()
            .map(|rep| {
                let (data, _) = gen_trial(&sc, rep).unwrap();
                let mu = fit_unadjusted(&data, EstimationMode::Ml, &config).unwrap();
                let vu = model_based_variance(&mu, &data).unwrap().1;
                let ma = fit(&data, EstimationMode::Ml, &config).unwrap();
                let va = model_based_variance(&ma, &data).unwrap().1;
                let vs = sandwich_variance(&ma, &data).unwrap().1;
                (mu.delta_hat(), vu, ma.delta_hat(), va, (vs / va).sqrt())
            })
            .collect();

        for (name, deltas, vars) in [
            (
                "unadjusted",
                samples.iter().map(|s| s.0).collect::<Vec<_>>(),
                samples.iter().map(|s| s.1).collect::<Vec<_>>(),
            ),
            (
                "ANCOVA",
                samples.iter().map(|s| s.2).collect::<Vec<_>>(),
                samples.iter().map(|s| s.3).collect::<Vec<_>>(),
            ),
        ] {
            let k = deltas.len() as f64;
            let mean = deltas.iter().sum::<f64>() / k;
            let emp_var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0);
            let mean_var = vars.iter().sum::<f64>() / k;
            let ratio = mean_var / emp_var;
            check(
                &mut failures,
                (0.9..=1.1).contains(&ratio),
                format!("{scenario:?}/{name}: mean Var̂ / empirical Var = {ratio}"),
            );
        }

        if scenario == Scenario::Three {
            let inside = samples
                .iter()
                .filter(|s| (0.9..=1.1).contains(&s.4))
                .count() as f64
                / samples.len() as f64;
            check(
                &mut failures,
                inside >= 0.95,
                format!("Three: sandwich/model-based SE ratio within [0.9, 1.1] in only {inside}"),
            );
        }
    }
    conclude("criterion 8 (variance consistency)", failures);
}

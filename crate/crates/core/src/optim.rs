//! Small derivative-free simplex minimizer used for the 2-parameter
//! variance-component search.

/// Outcome of a Nelder-Mead run.
#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Minimizes `f` starting from `x0` with initial step `step` per coordinate.
///
/// Terminates when the simplex diameter drops below `x_tol` and the spread
/// of objective values below `f_tol`, or after `max_iters` iterations.
pub fn nelder_mead<F>(
    f: F,
    x0: &[f64],
    step: f64,
    x_tol: f64,
    f_tol: f64,
    max_iters: usize,
) -> SimplexResult
where
    F: Fn(&[f64]) -> f64,
{
    let dim = x0.len();
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..dim {
        let mut xi = x0.to_vec();
        xi[i] += step;
        let fx = f(&xi);
        simplex.push((xi, fx));
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));

        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        let spread = simplex[dim].1 - simplex[0].1;
        if diameter < x_tol && spread.abs() < f_tol {
            converged = true;
            break;
        }

        iterations += 1;

        // centroid of all but the worst point
        let mut centroid = vec![0.0; dim];
        for (x, _) in &simplex[..dim] {
            for (c, &xi) in centroid.iter_mut().zip(x) {
                *c += xi / dim as f64;
            }
        }

        let worst = simplex[dim].clone();
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&worst.0)
            .map(|(&c, &w)| c + alpha * (c - w))
            .collect();
        let f_reflect = f(&reflect);

        if f_reflect < simplex[0].1 {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&worst.0)
                .map(|(&c, &w)| c + gamma * (c - w))
                .collect();
            let f_expand = f(&expand);
            simplex[dim] = if f_expand < f_reflect {
                (expand, f_expand)
            } else {
                (reflect, f_reflect)
            };
        } else if f_reflect < simplex[dim - 1].1 {
            simplex[dim] = (reflect, f_reflect);
        } else {
            let contract: Vec<f64> = centroid
                .iter()
                .zip(&worst.0)
                .map(|(&c, &w)| c + rho * (w - c))
                .collect();
            let f_contract = f(&contract);
            if f_contract < worst.1 {
                simplex[dim] = (contract, f_contract);
            } else {
                // shrink toward the best vertex
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = best
                        .iter()
                        .zip(&entry.0)
                        .map(|(&b, &xi)| b + sigma * (xi - b))
                        .collect();
                    let fx = f(&x);
                    *entry = (x, fx);
                }
            }
        }
    }

    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    SimplexResult {
        x: simplex[0].0.clone(),
        fx: simplex[0].1,
        converged,
        iterations,
    }
}

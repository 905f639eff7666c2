//! Derivative-free minimisation (Nelder-Mead with dimension-adaptive
//! coefficients). The warp objectives are piecewise constant in the motion
//! parameters because events are rounded to pixels, so gradient methods get
//! little to work with.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmOptions {
    pub max_iters: usize,
    /// Stop once `f_worst - f_best <= tol * |f_best|`.
    pub tol: f64,
    /// Stop once every vertex is within this distance of the best one.
    pub x_tol: f64,
}

impl Default for NmOptions {
    fn default() -> Self {
        NmOptions {
            max_iters: 400,
            tol: 1e-6,
            x_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective after each iteration.
    pub history: Vec<f64>,
}

/// Minimises `f` starting from the simplex `x0, x0 + step_i * e_i`.
pub fn nelder_mead(f: &mut impl FnMut(&[f64]) -> f64, x0: &[f64], step: &[f64], opts: &NmOptions) -> NmResult {
    let n = x0.len();
    assert_eq!(step.len(), n, "one step per dimension");
    let nf = n.max(1) as f64;
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf);
    let mut evaluations = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0, &mut evaluations)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step[i];
        let fx = eval(&x, &mut evaluations);
        simplex.push((x, fx));
    }

    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        // Stable sort keeps the older vertex first on ties.
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = simplex
            .iter()
            .skip(1)
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if worst - best <= opts.tol * best.abs() || spread <= opts.x_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / nf;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(alpha);
        let fr = eval(&xr, &mut evaluations);
        if fr < simplex[0].1 {
            let xe = along(alpha * beta);
            let fe = eval(&xe, &mut evaluations);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(alpha * gamma);
                let fc = eval(&xc, &mut evaluations);
                (xc, fc)
            } else {
                let xc = along(-gamma);
                let fc = eval(&xc, &mut evaluations);
                (xc, fc)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for (x, fx) in simplex.iter_mut().skip(1) {
                    for (xi, bi) in x.iter_mut().zip(&x_best) {
                        *xi = bi + delta * (*xi - bi);
                    }
                    *fx = eval(x, &mut evaluations);
                }
            }
        }
        history.push(simplex.iter().map(|v| v.1).fold(f64::INFINITY, f64::min));
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, f) = simplex.swap_remove(0);
    NmResult {
        x,
        f,
        iterations,
        evaluations,
        converged,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_rosenbrock() {
        let mut f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let opts = NmOptions {
            max_iters: 2000,
            tol: 1e-14,
            x_tol: 1e-10,
        };
        let r = nelder_mead(&mut f, &[-1.2, 1.0], &[0.5, 0.5], &opts);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn six_dim_quadratic_and_monotone_history() {
        let target = [0.3, -1.2, 0.8, 2.0, -0.5, 0.1];
        let mut f = |x: &[f64]| {
            x.iter()
                .zip(&target)
                .enumerate()
                .map(|(i, (a, b))| (i + 1) as f64 * (a - b).powi(2))
                .sum::<f64>()
        };
        let opts = NmOptions {
            max_iters: 5000,
            tol: 1e-16,
            x_tol: 1e-9,
        };
        let r = nelder_mead(&mut f, &[0.0; 6], &[1.0; 6], &opts);
        for (a, b) in r.x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn stops_at_iteration_cap_without_converging() {
        let mut f = |x: &[f64]| x[0].abs() + x[1].abs();
        let opts = NmOptions {
            max_iters: 3,
            ..Default::default()
        };
        let r = nelder_mead(&mut f, &[5.0, 5.0], &[1.0, 1.0], &opts);
        assert_eq!(r.iterations, 3);
        assert!(!r.converged);
    }
}

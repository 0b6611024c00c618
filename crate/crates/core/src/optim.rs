//! Derivative-free minimization (Nelder-Mead with restarts) and a finite
//! difference Hessian used for standard errors.

#[derive(Debug, Clone)]
pub struct NelderMead {
    pub max_evals: usize,
    /// Convergence when the spread of simplex values falls below this.
    pub f_tol: f64,
    /// Convergence also requires the simplex diameter to fall below this.
    pub x_tol: f64,
    /// Number of restarts from the incumbent after a converged run.
    pub restarts: usize,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            max_evals: 20_000,
            f_tol: 1e-8,
            x_tol: 1e-7,
            restarts: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
    /// Best objective value after each iteration; nonincreasing.
    pub trace: Vec<f64>,
}

impl NelderMead {
    /// Minimize `f` from `x0`. `step` gives the initial simplex edge per
    /// coordinate. Non-finite objective values are treated as +inf, which is
    /// how callers express constraints.
    pub fn minimize<F>(&self, mut f: F, x0: &[f64], step: &[f64]) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        assert_eq!(x0.len(), step.len());
        let mut eval = |x: &[f64]| {
            let v = f(x);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };
        let mut best_x = x0.to_vec();
        let mut best_f = eval(&best_x);
        let mut evals = 1;
        let mut trace = vec![best_f];
        let mut converged = false;
        let mut scale = 1.0;
        for round in 0..=self.restarts {
            let budget = self.max_evals.saturating_sub(evals);
            if budget < x0.len() + 2 {
                break;
            }
            let steps: Vec<f64> = step.iter().map(|s| s * scale).collect();
            let run = self.run(&mut eval, &best_x, best_f, &steps, budget, &mut trace);
            evals += run.evals;
            let improvement = best_f - run.value;
            if run.value <= best_f {
                best_f = run.value;
                best_x = run.x;
            }
            converged = run.converged;
            if round > 0 && improvement.abs() <= self.f_tol {
                break;
            }
            scale *= 0.5;
        }
        Minimum {
            x: best_x,
            value: best_f,
            evals,
            converged,
            trace,
        }
    }

    fn run<F>(
        &self,
        f: &mut F,
        x0: &[f64],
        f0: f64,
        step: &[f64],
        budget: usize,
        trace: &mut Vec<f64>,
    ) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        let n = x0.len();
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        simplex.push((x0.to_vec(), f0));
        let mut evals = 0;
        for i in 0..n {
            let mut x = x0.to_vec();
            x[i] += if step[i] != 0.0 { step[i] } else { 1e-3 };
            let fx = f(&x);
            evals += 1;
            simplex.push((x, fx));
        }
        // Adaptive coefficients for higher dimensions (Gao & Han).
        let nf = n as f64;
        let (alpha, gamma, rho, sigma) = if n > 2 {
            (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf)
        } else {
            (1.0, 2.0, 0.5, 0.5)
        };
        let mut converged = false;
        let running_best = |s: &[(Vec<f64>, f64)]| s[0].1;
        while evals < budget {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let prev_best = *trace.last().unwrap_or(&f64::INFINITY);
            trace.push(running_best(&simplex).min(prev_best));
            let spread = simplex[n].1 - simplex[0].1;
            let diameter = simplex[1..]
                .iter()
                .map(|(x, _)| {
                    x.iter()
                        .zip(&simplex[0].0)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if spread.is_finite() && spread <= self.f_tol && diameter <= self.x_tol {
                converged = true;
                break;
            }
            let mut centroid = vec![0.0; n];
            for (x, _) in &simplex[..n] {
                for (c, xi) in centroid.iter_mut().zip(x) {
                    *c += xi / nf;
                }
            }
            let worst = simplex[n].clone();
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&worst.0)
                    .map(|(c, w)| c + t * (c - w))
                    .collect()
            };
            let xr = along(alpha);
            let fr = f(&xr);
            evals += 1;
            if fr < simplex[0].1 {
                let xe = along(alpha * gamma);
                let fe = f(&xe);
                evals += 1;
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
                continue;
            }
            let (xc, fc) = if fr < worst.1 {
                let xc = along(alpha * rho);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(-rho);
                let fc = f(&xc);
                (xc, fc)
            };
            evals += 1;
            if fc < worst.1.min(fr) {
                simplex[n] = (xc, fc);
                continue;
            }
            let best = simplex[0].0.clone();
            for item in simplex.iter_mut().skip(1) {
                let x: Vec<f64> = best
                    .iter()
                    .zip(&item.0)
                    .map(|(b, xi)| b + sigma * (xi - b))
                    .collect();
                let fx = f(&x);
                evals += 1;
                *item = (x, fx);
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, value) = simplex.swap_remove(0);
        Minimum {
            x,
            value,
            evals,
            converged,
            trace: Vec::new(),
        }
    }
}

/// Central-difference Hessian of `f` at `x`. Step per coordinate is
/// `rel * max(|x_i|, 1)`.
pub fn hessian<F>(mut f: F, x: &[f64], rel: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| rel * v.abs().max(1.0)).collect();
    let f0 = f(x);
    let mut out = vec![vec![0.0; n]; n];
    let mut p = x.to_vec();
    for i in 0..n {
        p[i] = x[i] + h[i];
        let fp = f(&p);
        p[i] = x[i] - h[i];
        let fm = f(&p);
        p[i] = x[i];
        out[i][i] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut q = x.to_vec();
            q[i] += h[i];
            q[j] += h[j];
            let fpp = f(&q);
            q[j] -= 2.0 * h[j];
            let fpm = f(&q);
            q[i] -= 2.0 * h[i];
            let fmm = f(&q);
            q[j] += 2.0 * h[j];
            let fmp = f(&q);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    out
}

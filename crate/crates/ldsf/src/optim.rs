//! General-purpose unconstrained minimizers used by the per-center parameter
//! refinement: BFGS quasi-Newton with central finite-difference gradients and
//! Armijo backtracking, the Nelder–Mead simplex, and the run-both-pick-best
//! combinator.
//!
//! Both methods take the objective as `FnMut` so callers can close over
//! mutable scratch workspaces (the extraction objective re-renders a model
//! image per evaluation). Objectives are expected to be deterministic.

use crate::core_types::{LdsfError, Result};
use serde::{Deserialize, Serialize};

/// Optimizer options. `tol` means simplex function-value spread for
/// Nelder–Mead and gradient ∞-norm for BFGS; `init_scale` sizes the initial
/// simplex; `fd_step` scales the central-difference step
/// `fd_step·max(1, |xᵢ|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub init_scale: f64,
    pub fd_step: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            tol: 1e-8,
            max_iter: 500,
            init_scale: 0.05,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Bfgs,
    NelderMead,
}

/// Outcome of one minimizer run; `f_min` is the objective value actually
/// evaluated at `x_min`.
#[derive(Debug, Clone)]
pub struct OptResult {
    pub x_min: Vec<f64>,
    pub f_min: f64,
    pub iterations: usize,
    pub converged: bool,
    pub method: Method,
}

fn check_start(f0: f64) -> Result<()> {
    if !f0.is_finite() {
        return Err(LdsfError::InvalidInput(format!(
            "objective is not finite at the start point (got {})",
            f0
        )));
    }
    Ok(())
}

/// NaN-tolerant comparison treating non-finite values as +∞.
fn fcmp(a: f64, b: f64) -> std::cmp::Ordering {
    let a = if a.is_finite() { a } else { f64::INFINITY };
    let b = if b.is_finite() { b } else { f64::INFINITY };
    a.partial_cmp(&b).unwrap()
}

/// Standard Nelder–Mead simplex with reflection 1, expansion 2, contraction
/// 0.5, shrink 0.5. The initial simplex is `x0` plus `init_scale·eᵢ`
/// perturbations; converged when the function-value spread across the simplex
/// drops below `tol`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &OptimConfig,
) -> Result<OptResult> {
    let n = x0.len();
    let f0 = f(x0);
    check_start(f0)?;
    if n == 0 {
        return Ok(OptResult {
            x_min: vec![],
            f_min: f0,
            iterations: 0,
            converged: true,
            method: Method::NelderMead,
        });
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += opts.init_scale;
        let fx = f(&x);
        simplex.push((x, fx));
    }
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        simplex.sort_by(|a, b| fcmp(a.1, b.1));
        let spread = {
            let lo = simplex[0].1;
            let hi = simplex[n].1;
            if hi.is_finite() {
                hi - lo
            } else {
                f64::INFINITY
            }
        };
        // Function-value spread alone can fire while the simplex symmetrically
        // straddles a kink (|x| with vertices ±d has zero spread), so also
        // require the simplex itself to have collapsed.
        let best_scale = simplex[0].0.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let diam = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0_f64, f64::max);
        if spread < opts.tol && diam < 1e3 * opts.tol * best_scale {
            converged = true;
            break;
        }
        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&worst.0)
            .map(|(c, w)| c + alpha * (c - w))
            .collect();
        let fr = f(&reflect);
        if fcmp(fr, simplex[0].1).is_lt() {
            // Try expanding further along the same direction.
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + gamma * (c - w))
                .collect();
            let fe = f(&expand);
            simplex[n] = if fcmp(fe, fr).is_lt() {
                (expand, fe)
            } else {
                (reflect, fr)
            };
        } else if fcmp(fr, simplex[n - 1].1).is_lt() {
            simplex[n] = (reflect, fr);
        } else {
            // Contract toward the centroid from the better of worst/reflected.
            let (base, fb) = if fcmp(fr, worst.1).is_lt() {
                (&reflect, fr)
            } else {
                (&worst.0, worst.1)
            };
            let contract: Vec<f64> = centroid
                .iter()
                .zip(base)
                .map(|(c, b)| c + rho * (b - c))
                .collect();
            let fc = f(&contract);
            if fcmp(fc, fb).is_lt() {
                simplex[n] = (contract, fc);
            } else {
                // Shrink everything toward the best vertex.
                let best = simplex[0].0.clone();
                for vert in simplex.iter_mut().skip(1) {
                    for (v, b) in vert.0.iter_mut().zip(&best) {
                        *v = b + sigma * (*v - b);
                    }
                    vert.1 = f(&vert.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| fcmp(a.1, b.1));
    let (x_min, f_min) = simplex.swap_remove(0);
    Ok(OptResult {
        x_min,
        f_min,
        iterations,
        converged,
        method: Method::NelderMead,
    })
}

/// Central finite-difference gradient with per-coordinate step
/// `fd_step·max(1, |xᵢ|)`.
fn fd_gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], fd_step: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = fd_step * x[i].abs().max(1.0);
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// BFGS quasi-Newton with the inverse-Hessian update, Armijo backtracking
/// line search (c₁ = 1e-4, step halving, at most 60 halvings), and central
/// finite-difference gradients. Converged when ‖g‖∞ < tol; a failed line
/// search returns the best point so far with `converged = false`.
pub fn bfgs<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &OptimConfig) -> Result<OptResult> {
    let n = x0.len();
    let mut fx = f(x0);
    check_start(fx)?;
    if n == 0 {
        return Ok(OptResult {
            x_min: vec![],
            f_min: fx,
            iterations: 0,
            converged: true,
            method: Method::Bfgs,
        });
    }
    let mut x = x0.to_vec();
    // Inverse Hessian estimate, dense row-major, initialized to identity.
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    let mut g = fd_gradient(&mut f, &x, opts.fd_step);
    let mut best = (x.clone(), fx);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let ginf = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if ginf < opts.tol {
            converged = true;
            break;
        }
        // d = -H g, with a steepest-descent reset if H has gone bad.
        let mut d = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += h[i * n + j] * g[j];
            }
            d[i] = -acc;
        }
        let mut gd: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        if !(gd < 0.0) {
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] = if i == j { 1.0 } else { 0.0 };
                }
                d[i] = -g[i];
            }
            gd = -g.iter().map(|v| v * v).sum::<f64>();
            if gd == 0.0 {
                converged = true;
                break;
            }
        }
        // Armijo backtracking with round-off slack so that steps of
        // objective-cancellation size near the optimum still accept.
        let slack = 1e-12 * fx.abs();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let ft = f(&xt);
            if ft.is_finite() && ft <= fx + ARMIJO_C1 * t * gd + slack {
                accepted = Some((xt, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // Line search exhausted its halvings: give up with best-so-far.
            return Ok(OptResult {
                x_min: best.0,
                f_min: best.1,
                iterations,
                converged: false,
                method: Method::Bfgs,
            });
        };
        let g_new = fd_gradient(&mut f, &x_new, opts.fd_step);
        // BFGS inverse update with curvature safeguard.
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let ys: f64 = y.iter().zip(&s).map(|(a, b)| a * b).sum();
        let ynorm: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let snorm: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ys > 1e-12 * ynorm * snorm {
            let rho = 1.0 / ys;
            // H' = (I - rho s yT) H (I - rho y sT) + rho s sT
            let mut hy = vec![0.0; n]; // H y
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += h[i * n + j] * y[j];
                }
                hy[i] = acc;
            }
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            // Expanded form: H' = H - rho(s yT H + H y sT) + rho^2 s (yT H y) sT + rho s sT
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        if fx < best.1 {
            best = (x.clone(), fx);
        }
    }
    Ok(OptResult {
        x_min: best.0,
        f_min: best.1,
        iterations,
        converged,
        method: Method::Bfgs,
    })
}

/// Runs both minimizers from the same start and returns the one with the
/// smaller `f_min`; exact ties go to BFGS. Propagates the start failure only
/// if both methods fail to start.
pub fn refine_best<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &OptimConfig,
) -> Result<OptResult> {
    let b = bfgs(&mut f, x0, opts);
    let nm = nelder_mead(&mut f, x0, opts);
    match (b, nm) {
        (Ok(b), Ok(nm)) => Ok(if fcmp(b.f_min, nm.f_min).is_le() { b } else { nm }),
        (Ok(b), Err(_)) => Ok(b),
        (Err(_), Ok(nm)) => Ok(nm),
        (Err(e), Err(_)) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol,
            "expected {} ~= {} (tol {}), diff {:e}",
            a,
            b,
            tol,
            (a - b).abs()
        );
    }

    fn quadratic(x: &[f64]) -> f64 {
        (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2)
    }

    fn rosenbrock(x: &[f64]) -> f64 {
        100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2)
    }

    #[test]
    fn nelder_mead_quadratic_and_abs() {
        // The convergence test is on function-value spread, so positional
        // accuracy on a quadratic is ~sqrt(tol): ask for spread 1e-14 to pin
        // x to 1e-6.
        let mut opts = OptimConfig::default();
        opts.tol = 1e-14;
        let r = nelder_mead(quadratic, &[0.0, 0.0], &opts).unwrap();
        assert!(r.converged);
        assert_close(r.x_min[0], 1.0, 1e-6);
        assert_close(r.x_min[1], 2.0, 1e-6);
        assert_eq!(r.method, Method::NelderMead);

        let r = nelder_mead(|x| x[0].abs(), &[5.0], &OptimConfig::default()).unwrap();
        assert_close(r.x_min[0], 0.0, 1e-6);
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let mut opts = OptimConfig::default();
        opts.max_iter = 2000;
        let r = nelder_mead(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert_close(r.x_min[0], 1.0, 1e-4);
        assert_close(r.x_min[1], 1.0, 1e-4);
    }

    #[test]
    fn bfgs_quadratic_and_rosenbrock() {
        let r = bfgs(quadratic, &[0.0, 0.0], &OptimConfig::default()).unwrap();
        assert!(r.converged);
        assert_close(r.x_min[0], 1.0, 1e-8);
        assert_close(r.x_min[1], 2.0, 1e-8);

        let r = bfgs(rosenbrock, &[-1.2, 1.0], &OptimConfig::default()).unwrap();
        assert_close(r.x_min[0], 1.0, 1e-5);
        assert_close(r.x_min[1], 1.0, 1e-5);
    }

    /// Gaussian-elimination solve, the independent oracle for the SPD
    /// quadratic family.
    fn solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
        let mut rhs = b.to_vec();
        for k in 0..n {
            let piv = (k..n).max_by(|&i, &j| m[i][k].abs().partial_cmp(&m[j][k].abs()).unwrap()).unwrap();
            m.swap(k, piv);
            rhs.swap(k, piv);
            for i in k + 1..n {
                let fac = m[i][k] / m[k][k];
                for j in k..n {
                    m[i][j] -= fac * m[k][j];
                }
                rhs[i] -= fac * rhs[k];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut acc = rhs[i];
            for j in i + 1..n {
                acc -= m[i][j] * x[j];
            }
            x[i] = acc / m[i][i];
        }
        x
    }

    #[test]
    fn bfgs_spd_quadratic_matches_linear_solve_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 4;
        // Q = R^T R + I is SPD.
        let r: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut q = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    q[i][j] += r[k][i] * r[k][j];
                }
            }
            q[i][i] += 1.0;
        }
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |x: &[f64]| {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += 0.5 * x[i] * q[i][j] * x[j];
                }
                acc -= b[i] * x[i];
            }
            acc
        };
        let want = solve(&q, &b);
        let got = bfgs(f, &vec![0.0; n], &OptimConfig::default()).unwrap();
        assert!(got.converged);
        for (g, w) in got.x_min.iter().zip(&want) {
            assert_close(*g, *w, 1e-6);
        }
    }

    #[test]
    fn refine_best_tie_goes_to_bfgs_on_smooth_quadratic() {
        let r = refine_best(quadratic, &[0.0, 0.0], &OptimConfig::default()).unwrap();
        assert_eq!(r.method, Method::Bfgs);
        assert_close(r.x_min[0], 1.0, 1e-6);
    }

    #[test]
    fn refine_best_prefers_nelder_mead_on_fd_hostile_kink() {
        let f = |x: &[f64]| x[0].abs() + 0.01 * x[0] * x[0];
        let b = bfgs(f, &[3.0], &OptimConfig::default()).unwrap();
        let nm = nelder_mead(f, &[3.0], &OptimConfig::default()).unwrap();
        let r = refine_best(f, &[3.0], &OptimConfig::default()).unwrap();
        assert!(r.f_min <= b.f_min.min(nm.f_min) + 1e-15);
        if nm.f_min < b.f_min {
            assert_eq!(r.method, Method::NelderMead);
        }
        assert_close(r.x_min[0], 0.0, 1e-5);
    }

    #[test]
    fn refine_best_rosenbrock_upper_bound() {
        let b = bfgs(rosenbrock, &[-1.2, 1.0], &OptimConfig::default()).unwrap();
        let mut opts = OptimConfig::default();
        opts.max_iter = 2000;
        let nm = nelder_mead(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        let r = refine_best(rosenbrock, &[-1.2, 1.0], &OptimConfig::default()).unwrap();
        assert!(r.f_min <= b.f_min + 1e-15);
        let _ = nm;
    }

    #[test]
    fn results_report_value_at_x_min_and_respect_start() {
        let r = bfgs(rosenbrock, &[-1.2, 1.0], &OptimConfig::default()).unwrap();
        assert_close(r.f_min, rosenbrock(&r.x_min), 1e-12);
        assert!(r.f_min <= rosenbrock(&[-1.2, 1.0]));
        let r = nelder_mead(rosenbrock, &[-1.2, 1.0], &OptimConfig::default()).unwrap();
        assert_close(r.f_min, rosenbrock(&r.x_min), 1e-12);
        assert!(r.f_min <= rosenbrock(&[-1.2, 1.0]));
    }

    #[test]
    fn translation_equivariance_on_quadratics() {
        let c = [10.0, -7.0];
        let shifted = |x: &[f64]| quadratic(&[x[0] - c[0], x[1] - c[1]]);
        let mut nm_opts = OptimConfig::default();
        nm_opts.tol = 1e-14;
        for result in [
            bfgs(shifted, &[c[0], c[1]], &OptimConfig::default()).unwrap(),
            nelder_mead(shifted, &[c[0], c[1]], &nm_opts).unwrap(),
        ] {
            assert_close(result.x_min[0], 1.0 + c[0], 1e-5);
            assert_close(result.x_min[1], 2.0 + c[1], 1e-5);
        }
    }

    #[test]
    fn invalid_start_propagates() {
        let f = |_: &[f64]| f64::NAN;
        assert!(matches!(
            bfgs(f, &[0.0], &OptimConfig::default()),
            Err(LdsfError::InvalidInput(_))
        ));
        assert!(matches!(
            nelder_mead(f, &[0.0], &OptimConfig::default()),
            Err(LdsfError::InvalidInput(_))
        ));
        assert!(matches!(
            refine_best(f, &[0.0], &OptimConfig::default()),
            Err(LdsfError::InvalidInput(_))
        ));
    }

    #[test]
    fn bfgs_survives_non_finite_probe_regions() {
        // Objective is finite at the start but +inf left of x = -1; the line
        // search must reject non-finite steps and still make progress.
        let f = |x: &[f64]| {
            if x[0] < -1.0 {
                f64::INFINITY
            } else {
                (x[0] - 0.5).powi(2)
            }
        };
        let r = bfgs(f, &[-0.9], &OptimConfig::default()).unwrap();
        assert_close(r.x_min[0], 0.5, 1e-6);
    }
}

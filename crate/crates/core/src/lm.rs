//! Dense Levenberg-Marquardt minimizer for small least-squares problems
//! with analytic Jacobians, used by the CMD estimator on the whitened
//! moment residuals.

use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop when the infinity norm of the objective gradient `2 J'r` falls
    /// below this.
    pub grad_tol: f64,
    /// Stop when the accepted step is shorter than `step_tol * (1 + |x|)`.
    pub step_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iter: 500,
            grad_tol: 1e-8,
            step_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub x: DVector<f64>,
    /// Sum of squared residuals at `x`.
    pub objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Minimizes `|r(x)|^2` by damped Gauss-Newton steps. `residual` and
/// `jacobian` may return `None` for points where the model cannot be
/// evaluated; such trial points are rejected like uphill steps.
pub fn minimize<R, J>(
    x0: DVector<f64>,
    residual: R,
    jacobian: J,
    opts: &LmOptions,
) -> LmOutcome
where
    R: Fn(&DVector<f64>) -> Option<DVector<f64>>,
    J: Fn(&DVector<f64>) -> Option<DMatrix<f64>>,
{
    let mut x = x0;
    let mut r = match residual(&x) {
        Some(r) if r.iter().all(|v| v.is_finite()) => r,
        _ => {
            return LmOutcome {
                objective: f64::INFINITY,
                grad_norm: f64::INFINITY,
                iterations: 0,
                converged: false,
                x,
            }
        }
    };
    let mut obj = r.norm_squared();
    let mut lambda: Option<f64> = None;
    let mut grad_norm = f64::INFINITY;

    for iter in 0..opts.max_iter {
        let Some(jac) = jacobian(&x) else {
            return LmOutcome { x, objective: obj, iterations: iter, grad_norm, converged: false };
        };
        let a = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        grad_norm = 2.0 * g.amax();
        if grad_norm < opts.grad_tol {
            return LmOutcome { x, objective: obj, iterations: iter, grad_norm, converged: true };
        }
        let max_diag = (0..a.nrows()).map(|i| a[(i, i)]).fold(0.0f64, f64::max);
        if max_diag == 0.0 {
            // zero Jacobian away from a stationary gradient: nothing to do
            return LmOutcome { x, objective: obj, iterations: iter, grad_norm, converged: false };
        }
        let lam = lambda.get_or_insert(1e-3 * max_diag);
        let mut accepted = false;
        for _ in 0..40 {
            let mut damped = a.clone();
            for i in 0..damped.nrows() {
                // Marquardt scaling with a floor so dead directions stay solvable
                damped[(i, i)] += *lam * a[(i, i)].max(1e-10 * max_diag);
            }
            let Some(chol) = Cholesky::new(damped) else {
                *lam *= 4.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let x_new = &x + &step;
            let r_new = residual(&x_new);
            match r_new {
                Some(rn) if rn.iter().all(|v| v.is_finite()) => {
                    let obj_new = rn.norm_squared();
                    if obj_new < obj {
                        let small_step = step.norm() < opts.step_tol * (1.0 + x.norm());
                        x = x_new;
                        r = rn;
                        obj = obj_new;
                        *lam = (*lam / 3.0).max(1e-14 * max_diag);
                        accepted = true;
                        if small_step {
                            return LmOutcome {
                                x,
                                objective: obj,
                                iterations: iter + 1,
                                grad_norm,
                                converged: true,
                            };
                        }
                        break;
                    }
                }
                _ => {}
            }
            *lam *= 4.0;
            if *lam > 1e14 * max_diag {
                return LmOutcome { x, objective: obj, iterations: iter + 1, grad_norm, converged: false };
            }
        }
        if !accepted {
            return LmOutcome { x, objective: obj, iterations: iter + 1, grad_norm, converged: false };
        }
    }
    LmOutcome { x, objective: obj, iterations: opts.max_iter, grad_norm, converged: false }
}

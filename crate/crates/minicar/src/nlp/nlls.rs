//! Box-constrained Levenberg-Marquardt for dense nonlinear least squares.

use nalgebra::{DMatrix, DVector};

use super::SolveStatus;

/// Tuning knobs for [`solve_nlls`].
#[derive(Clone, Copy, Debug)]
pub struct NllsOptions {
    pub max_iter: usize,
    /// Projected-gradient infinity-norm tolerance.
    pub tol_g: f64,
    /// Initial damping.
    pub lambda0: f64,
    /// Damping above which the solver declares itself stalled.
    pub lambda_max: f64,
}

impl Default for NllsOptions {
    fn default() -> Self {
        NllsOptions {
            max_iter: 200,
            tol_g: 1e-8,
            lambda0: 1e-3,
            lambda_max: 1e14,
        }
    }
}

/// Solver outcome.
#[derive(Clone, Debug)]
pub struct NllsReport {
    pub z: DVector<f64>,
    /// `0.5 * ||r||^2` at the solution.
    pub cost: f64,
    /// `||z - clamp(z - J^T r)||_inf` at the solution.
    pub optimality: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
}

fn clamp(z: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for i in 0..z.len() {
        z[i] = z[i].max(lower[i]).min(upper[i]);
    }
}

fn projected_gradient_norm(
    z: &DVector<f64>,
    g: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> f64 {
    let mut step = z - g;
    clamp(&mut step, lower, upper);
    (z - step).amax()
}

/// Minimizes `0.5 * ||r(z)||^2` subject to `lower <= z <= upper`.
///
/// `eval` returns the residual vector and its Jacobian at a point. Damping is
/// scaled by the Gauss-Newton diagonal, multiplied by 10 on rejected steps
/// and divided by 10 on accepted ones; trial points are clamped back into the
/// box, so the iterates are always feasible.
pub fn solve_nlls(
    eval: impl Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    z0: &DVector<f64>,
    opts: &NllsOptions,
) -> NllsReport {
    let n = z0.len();
    assert_eq!(lower.len(), n);
    assert_eq!(upper.len(), n);
    let mut z = z0.clone();
    if (0..n).any(|i| lower[i] > upper[i]) {
        return NllsReport {
            z,
            cost: f64::INFINITY,
            optimality: f64::INFINITY,
            iterations: 0,
            status: SolveStatus::InfeasibleBounds,
            cost_trace: vec![],
        };
    }
    clamp(&mut z, lower, upper);

    let (mut r, mut jac) = eval(&z);
    let mut cost = 0.5 * r.norm_squared();
    let mut lambda = opts.lambda0;
    let mut trace = vec![cost];
    let mut optimality = f64::INFINITY;

    for iter in 0..opts.max_iter {
        let g = jac.transpose() * &r;
        optimality = projected_gradient_norm(&z, &g, lower, upper);
        if optimality <= opts.tol_g {
            return NllsReport {
                z,
                cost,
                optimality,
                iterations: iter,
                status: SolveStatus::Converged,
                cost_trace: trace,
            };
        }
        // variables sitting on a bound with the gradient pushing outward are
        // held fixed; solving over them would drag the step out of the box
        // and the clamp would wreck it for the free variables
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                !((z[i] <= lower[i] && g[i] >= 0.0) || (z[i] >= upper[i] && g[i] <= 0.0))
            })
            .collect();
        let nf = free.len();
        let jf = jac.select_columns(free.iter());
        let gn = jf.transpose() * &jf;
        let gf = DVector::from_fn(nf, |i, _| g[free[i]]);
        loop {
            // damped normal equations (J^T J + lambda * diag(J^T J)) p = -g
            let mut a = gn.clone();
            for i in 0..nf {
                a[(i, i)] += lambda * gn[(i, i)].max(1e-12);
            }
            let step_f = match a.cholesky() {
                Some(ch) => ch.solve(&(-&gf)),
                None => {
                    lambda *= 10.0;
                    if lambda > opts.lambda_max {
                        break;
                    }
                    continue;
                }
            };
            let mut z_new = z.clone();
            for (k, &i) in free.iter().enumerate() {
                z_new[i] += step_f[k];
            }
            clamp(&mut z_new, lower, upper);
            let (r_new, jac_new) = eval(&z_new);
            let cost_new = 0.5 * r_new.norm_squared();
            // when neither the model nor the trial point can improve the
            // cost by more than a few ulps, no representable better point
            // exists along this step; stopping here is the ftol criterion
            if lambda <= opts.lambda0 {
                let r_lin = &r + &jf * &step_f;
                let pred_red = cost - 0.5 * r_lin.norm_squared();
                let floor = 8.0 * f64::EPSILON * cost;
                if pred_red.abs() <= floor && (cost - cost_new).abs() <= floor {
                    return NllsReport {
                        z,
                        cost,
                        optimality,
                        iterations: iter,
                        status: SolveStatus::Converged,
                        cost_trace: trace,
                    };
                }
            }
            if cost_new < cost {
                z = z_new;
                r = r_new;
                jac = jac_new;
                cost = cost_new;
                lambda = (lambda / 10.0).max(1e-12);
                trace.push(cost);
                break;
            }
            lambda *= 10.0;
            if lambda > opts.lambda_max {
                break;
            }
        }
        if lambda > opts.lambda_max {
            break;
        }
    }

    NllsReport {
        z,
        cost,
        optimality,
        iterations: opts.max_iter,
        status: SolveStatus::MaxIterations,
        cost_trace: trace,
    }
}

//! Weighted-sum lower-level solves.
//!
//! [`solve_ll`] is the inexact (stochastic) gradient-descent solver used
//! inside the upper-level iterations, with its iteration budget grown by
//! [`update_accuracy`]. [`solve_ll_newton`] is the accurate noiseless
//! reference solver used by the true-function evaluators.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::drivers::stepsize::{projected_armijo_search, StepsizeRule};
use crate::error::{check_dim, Error, Result};
use crate::noise::NoiseSpec;
use crate::numeric::{all_finite, SimplexWeight, Vector};
use crate::problems::{
    check_point, weighted_ll_grad_exact, weighted_ll_hess_yy_exact, weighted_ll_value, BilevelProblem,
};

/// Lower-level iteration budget with the increasing-accuracy controller.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LLBudget {
    pub current_iters: usize,
    pub max_iters: usize,
    pub f_u_threshold: f64,
    pub ll_stepsize: StepsizeRule,
}

impl LLBudget {
    pub fn new(current_iters: usize, max_iters: usize, f_u_threshold: f64, ll_stepsize: StepsizeRule) -> Result<Self> {
        let b = Self {
            current_iters,
            max_iters,
            f_u_threshold,
            ll_stepsize,
        };
        b.validate()?;
        Ok(b)
    }

    /// Starts at a single lower-level iteration.
    pub fn starting(max_iters: usize, f_u_threshold: f64, ll_stepsize: StepsizeRule) -> Result<Self> {
        Self::new(1, max_iters, f_u_threshold, ll_stepsize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.current_iters < 1 || self.current_iters > self.max_iters {
            return Err(Error::InvalidArgument(format!(
                "LL budget must satisfy 1 <= current ({}) <= max ({})",
                self.current_iters, self.max_iters
            )));
        }
        if !(self.f_u_threshold > 0.0) {
            return Err(Error::InvalidArgument("LL accuracy threshold must be positive".into()));
        }
        self.ll_stepsize.validate()
    }
}

/// Adds one lower-level iteration when consecutive upper-level values differ
/// by less than the threshold, up to the cap.
pub fn update_accuracy(budget: LLBudget, f_u_prev: f64, f_u_curr: f64) -> LLBudget {
    let mut next = budget;
    if (f_u_curr - f_u_prev).abs() < budget.f_u_threshold && budget.current_iters < budget.max_iters {
        next.current_iters += 1;
    }
    next
}

/// `sum_j lambda_j grad_y f^j(x, y)` with every gradient routed through the noise layer.
pub fn weighted_ll_grad(
    p: &dyn BilevelProblem,
    x: &Vector,
    lambda: &SimplexWeight,
    y: &Vector,
    noise: &mut NoiseSpec,
) -> Result<Vector> {
    check_point(p, x, y)?;
    check_dim("lambda", p.num_objectives(), lambda.len())?;
    let mut g = Vector::zeros(p.ll_dim());
    for (j, &w) in lambda.iter().enumerate() {
        if w != 0.0 {
            g.axpy(w, &noise.ll_grad_y(p, j, x, y), 1.0);
        }
    }
    Ok(g)
}

/// Runs `budget.current_iters` steps of (stochastic) gradient descent on
/// `lambda' F(x, .)` from `y0`.
///
/// Armijo backtracking, when configured, tests sufficient decrease of the
/// exact weighted objective along the (possibly noisy) negative gradient.
pub fn solve_ll(
    p: &dyn BilevelProblem,
    x: &Vector,
    lambda: &SimplexWeight,
    y0: &Vector,
    budget: &LLBudget,
    noise: &mut NoiseSpec,
) -> Result<Vector> {
    budget.validate()?;
    let mut y = y0.clone();
    for _ in 0..budget.current_iters {
        let g = weighted_ll_grad(p, x, lambda, &y, noise)?;
        y = match &budget.ll_stepsize {
            StepsizeRule::Fixed { value } => y - g * *value,
            StepsizeRule::Armijo(params) => {
                let d = -g;
                let out = projected_armijo_search(
                    |yy: &Vector| Ok(weighted_ll_value(p, lambda, x, yy)),
                    &y,
                    None,
                    &d,
                    params,
                    |v| v.clone(),
                )?;
                out.point
            }
        };
        if !all_finite(&y) {
            return Err(Error::NonFinite(
                "lower-level iterate diverged (stepsize too large for the weighted Hessian)".into(),
            ));
        }
    }
    Ok(y)
}

/// Maximum Newton iterations of the reference solver.
const NEWTON_MAX_ITERS: usize = 100;

/// Noiseless damped Newton on `lambda' F(x, .)` until the weighted
/// stationarity residual (infinity norm) is at most `tol`. A stalled solve is
/// still accepted at the roundoff level of the per-objective gradients.
///
/// Accepts any nonnegative weight vector (not only simplex points) so that
/// finite-difference oracles can perturb weights. A weighted Hessian that is
/// not positive definite is reported as [`Error::NotPositiveDefinite`].
pub fn solve_ll_newton(p: &dyn BilevelProblem, x: &Vector, lambda: &[f64], y0: &Vector, tol: f64) -> Result<Vector> {
    check_point(p, x, y0)?;
    check_dim("lambda", p.num_objectives(), lambda.len())?;
    let value = |yy: &Vector| -> f64 {
        lambda
            .iter()
            .enumerate()
            .map(|(j, &w)| if w == 0.0 { 0.0 } else { w * p.ll_value(j, x, yy) })
            .sum()
    };
    let mut y = y0.clone();
    let mut g = weighted_ll_grad_exact(p, lambda, x, &y);
    for _ in 0..NEWTON_MAX_ITERS {
        let res = g.amax();
        if res <= tol {
            return Ok(y);
        }
        let h = weighted_ll_hess_yy_exact(p, lambda, x, &y);
        let chol = Cholesky::new(h).ok_or(Error::NotPositiveDefinite)?;
        let step = chol.solve(&g);
        let f0 = value(&y);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &y - &step * alpha;
            let g_trial = weighted_ll_grad_exact(p, lambda, x, &trial);
            let f_trial = value(&trial);
            let decreased = f_trial <= f0 - 1e-4 * alpha * step.dot(&g);
            if all_finite(&trial) && (decreased || g_trial.amax() < res) {
                accepted = Some((trial, g_trial));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, g_trial)) => {
                y = trial;
                g = g_trial;
            }
            None => break,
        }
    }
    let res = g.amax();
    if res <= tol.max(roundoff_floor(p, x, lambda, &y)) {
        Ok(y)
    } else {
        Err(Error::NonFinite(format!(
            "Newton lower-level solve stalled at residual {res:e} (target {tol:e})"
        )))
    }
}

/// Residual attainable in floating point when the weighted gradient is a
/// cancelling sum of large terms: per objective, the gradient at `y = 0` and
/// the curvature term `H_j y`.
fn roundoff_floor(p: &dyn BilevelProblem, x: &Vector, lambda: &[f64], y: &Vector) -> f64 {
    let zero = Vector::zeros(y.len());
    let magnitude: f64 = lambda
        .iter()
        .enumerate()
        .filter(|(_, &w)| w != 0.0)
        .map(|(j, &w)| w * (p.ll_grad_y(j, x, &zero).amax() + (p.ll_hess_yy(j, x, y) * y).amax()))
        .sum();
    1e3 * f64::EPSILON * (1.0 + magnitude)
}

/// Infinity norm of the noiseless weighted stationarity residual.
pub fn ll_residual(p: &dyn BilevelProblem, x: &Vector, lambda: &[f64], y: &Vector) -> f64 {
    weighted_ll_grad_exact(p, lambda, x, y).amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;
    use crate::problems::{SelectObjectives, SyntheticProblem};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn w(l1: f64) -> SimplexWeight {
        SimplexWeight::new(vec![l1, 1.0 - l1]).unwrap()
    }

    #[test]
    fn weighted_gradient_examples() {
        let p = SyntheticProblem::gkv1_separable(1).unwrap();
        let mut noise = NoiseSpec::none();
        let g = weighted_ll_grad(&p, &v(&[-1.7]), &w(0.5), &v(&[0.0]), &mut noise).unwrap();
        assert_eq!(g[0], 0.0);

        let p = SyntheticProblem::sp1(2).unwrap();
        let (x, y) = (v(&[0.3, 1.1]), v(&[2.0, -1.0]));
        let g = weighted_ll_grad(&p, &x, &w(1.0), &y, &mut noise).unwrap();
        assert_eq!(g, p.ll_grad_y(0, &x, &y));

        let p = SyntheticProblem::jos1(1).unwrap();
        let g = weighted_ll_grad(&p, &v(&[1.0]), &w(0.5), &v(&[1.0]), &mut noise).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn gd_examples() {
        let mut noise = NoiseSpec::none();
        let p = SyntheticProblem::gkv1_separable(1).unwrap();
        let budget = LLBudget::new(25, 30, 0.1, StepsizeRule::fixed(0.1)).unwrap();
        let y = solve_ll(&p, &v(&[-2.0]), &w(0.5), &v(&[0.0]), &budget, &mut noise).unwrap();
        assert_eq!(y[0], 0.0);

        let p = SyntheticProblem::sp1(1).unwrap();
        let budget = LLBudget::new(1000, 1000, 0.1, StepsizeRule::fixed(0.1)).unwrap();
        let y = solve_ll(&p, &v(&[1.0]), &w(0.0), &v(&[0.0]), &budget, &mut noise).unwrap();
        assert!((y[0] - 2.0).abs() < 1e-6);

        let p = SyntheticProblem::jos1(1).unwrap();
        let budget = LLBudget::new(200, 200, 0.1, StepsizeRule::fixed(0.1)).unwrap();
        let y = solve_ll(&p, &v(&[1.0]), &w(0.5), &v(&[0.0]), &budget, &mut noise).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gd_with_armijo_converges() {
        let mut noise = NoiseSpec::none();
        let p = SyntheticProblem::jos1(3).unwrap();
        let x = v(&[-1.0, 0.7, 2.6]);
        let lambda = w(0.3);
        let budget = LLBudget::new(500, 500, 0.1, StepsizeRule::armijo()).unwrap();
        let y = solve_ll(&p, &x, &lambda, &Vector::zeros(3), &budget, &mut noise).unwrap();
        let exact = p.closed_form_ll_solution(&x, &lambda).unwrap();
        assert!((y - exact).amax() < 1e-6);
    }

    #[test]
    fn vertex_weight_matches_single_objective_descent() {
        let mut noise = NoiseSpec::none();
        let p = SyntheticProblem::sp1(2).unwrap();
        let single = SelectObjectives::new(SyntheticProblem::sp1(2).unwrap(), vec![1]).unwrap();
        let x = v(&[0.5, -1.0]);
        let y0 = v(&[0.1, 0.2]);
        for iters in 1..6 {
            let budget = LLBudget::new(iters, 10, 0.1, StepsizeRule::fixed(0.05)).unwrap();
            let a = solve_ll(&p, &x, &w(0.0), &y0, &budget, &mut noise).unwrap();
            let b = solve_ll(&single, &x, &SimplexWeight::vertex(1, 0), &y0, &budget, &mut noise).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn divergent_stepsize_is_reported() {
        let mut noise = NoiseSpec::none();
        let p = SyntheticProblem::sp1(1).unwrap();
        let budget = LLBudget::new(5000, 5000, 0.1, StepsizeRule::fixed(10.0)).unwrap();
        let err = solve_ll(&p, &v(&[1.0]), &w(0.5), &v(&[0.0]), &budget, &mut noise).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn accuracy_controller() {
        let b = LLBudget::new(3, 30, 0.1, StepsizeRule::fixed(0.1)).unwrap();
        assert_eq!(update_accuracy(b, 1.0, 1.05).current_iters, 4);
        assert_eq!(update_accuracy(b, 1.0, 1.5).current_iters, 3);
        let top = LLBudget::new(30, 30, 0.1, StepsizeRule::fixed(0.1)).unwrap();
        assert_eq!(update_accuracy(top, 1.0, 1.0).current_iters, 30);
        assert!(LLBudget::new(0, 30, 0.1, StepsizeRule::fixed(0.1)).is_err());
        assert!(LLBudget::new(31, 30, 0.1, StepsizeRule::fixed(0.1)).is_err());
    }

    #[test]
    fn newton_matches_closed_form() {
        let mut rng = RngStream::new(3, 0);
        let p = SyntheticProblem::gkv1_nonseparable(6, &mut rng).unwrap();
        let x = Vector::from_fn(6, |_, _| rng.uniform_in(0.0, 5.0));
        let lambda = w(0.37);
        let y = solve_ll_newton(&p, &x, lambda.as_slice(), &Vector::zeros(6), 1e-10).unwrap();
        let exact = p.closed_form_ll_solution(&x, &lambda).unwrap();
        assert!((y - exact).amax() < 1e-9);
    }

    #[test]
    fn newton_on_flat_objective_keeps_start() {
        // x = 0 with all weight on the first objective: every y is stationary
        let p = SyntheticProblem::jos1(1).unwrap();
        let y = solve_ll_newton(&p, &v(&[0.0]), &[1.0, 0.0], &v(&[1.0]), 1e-10).unwrap();
        assert_eq!(y[0], 1.0);
    }
}

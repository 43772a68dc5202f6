//! Adjoint (hypergradient) assembly for the optimistic and risk-neutral
//! formulations.
//!
//! With `H = sum_j lambda_j hess_yy f^j`, `B = sum_j lambda_j hess_xy f^j`
//! and `mu = H^{-1} grad_y f_u`, the gradient of `f_u(x, y(x, lambda))` is
//! `grad_x f_u - B mu` in `x` and `-G mu` in `lambda`, where row `j` of `G`
//! is `grad_y f^j`.

use nalgebra::Cholesky;

use crate::error::{check_dim, Error, Result};
use crate::noise::NoiseSpec;
use crate::numeric::{all_finite, asymmetry, Matrix, SimplexWeight, Vector, WeightGrid};
use crate::problems::{check_point, BilevelProblem};

/// Oracle quantities of one direction assembly.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointWorkspace {
    pub grad_x_ul: Vector,
    pub grad_y_ul: Vector,
    /// `sum_j lambda_j hess_yy f^j`, m x m.
    pub hess_yy: Matrix,
    /// `sum_j lambda_j hess_xy f^j`, n x m.
    pub hess_xy: Matrix,
    /// Row `j` is `grad_y f^j`, q x m. Empty (0 x m) when not requested.
    pub lambda_hess: Matrix,
    pub mu: Vector,
}

impl AdjointWorkspace {
    /// Draws every oracle once through `noise` and solves the adjoint system.
    pub fn assemble(
        p: &dyn BilevelProblem,
        x: &Vector,
        lambda: &SimplexWeight,
        y: &Vector,
        noise: &mut NoiseSpec,
        with_lambda_rows: bool,
    ) -> Result<Self> {
        check_point(p, x, y)?;
        check_dim("lambda", p.num_objectives(), lambda.len())?;
        let (n, m, q) = (p.ul_dim(), p.ll_dim(), p.num_objectives());

        let grad_x_ul = noise.ul_grad_x(p, x, y);
        let grad_y_ul = noise.ul_grad_y(p, x, y);
        let mut hess_yy = Matrix::zeros(m, m);
        let mut hess_xy = Matrix::zeros(n, m);
        for (j, &w) in lambda.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            hess_yy += noise.ll_hess_yy(p, j, x, y)? * w;
            hess_xy += noise.ll_hess_xy(p, j, x, y) * w;
        }
        let lambda_hess = if with_lambda_rows {
            let mut g = Matrix::zeros(q, m);
            for j in 0..q {
                g.set_row(j, &noise.ll_grad_y(p, j, x, y).transpose());
            }
            g
        } else {
            Matrix::zeros(0, m)
        };
        let mu = solve_adjoint(&hess_yy, &grad_y_ul)?;
        Ok(Self {
            grad_x_ul,
            grad_y_ul,
            hess_yy,
            hess_xy,
            lambda_hess,
            mu,
        })
    }

    /// `grad_x f_u - B mu`.
    pub fn hypergradient_x(&self) -> Vector {
        &self.grad_x_ul - &self.hess_xy * &self.mu
    }

    /// `-G mu`; empty when the lambda rows were not assembled.
    pub fn hypergradient_lambda(&self) -> Vector {
        -(&self.lambda_hess * &self.mu)
    }
}

/// Solves `H mu = g` by Cholesky with one step of iterative refinement.
pub fn solve_adjoint(hyy: &Matrix, g: &Vector) -> Result<Vector> {
    if !hyy.is_square() {
        return Err(Error::InvalidArgument(format!(
            "adjoint matrix must be square, got {}x{}",
            hyy.nrows(),
            hyy.ncols()
        )));
    }
    check_dim("adjoint right-hand side", hyy.nrows(), g.len())?;
    if !hyy.iter().all(|v| v.is_finite()) || !all_finite(g) {
        return Err(Error::NonFinite("adjoint system".into()));
    }
    let asym = asymmetry(hyy);
    if asym > 1e-10 * hyy.amax().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let chol = Cholesky::new(hyy.clone()).ok_or(Error::NotPositiveDefinite)?;
    let mut mu = chol.solve(g);
    let r = g - hyy * &mu;
    mu += chol.solve(&r);
    if !all_finite(&mu) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(mu)
}

/// Negative joint hypergradient `(d_x, d_lambda)` of `f_u(x, y(x, lambda))`
/// evaluated at the approximate lower-level solution `y_tilde`.
pub fn bsg_opt_direction(
    p: &dyn BilevelProblem,
    x: &Vector,
    lambda: &SimplexWeight,
    y_tilde: &Vector,
    noise: &mut NoiseSpec,
) -> Result<(Vector, Vector)> {
    let ws = AdjointWorkspace::assemble(p, x, lambda, y_tilde, noise, true)?;
    Ok((-ws.hypergradient_x(), -ws.hypergradient_lambda()))
}

/// `x`-block hypergradient at one weight (no lambda rows drawn).
pub fn hypergradient_x(
    p: &dyn BilevelProblem,
    x: &Vector,
    lambda: &SimplexWeight,
    y: &Vector,
    noise: &mut NoiseSpec,
) -> Result<Vector> {
    Ok(AdjointWorkspace::assemble(p, x, lambda, y, noise, false)?.hypergradient_x())
}

/// Negative mini-batch average of the `x` hypergradients, member `i` taken
/// at `(x, y_tildes[i])` with weight `batch[i]`.
pub fn bsg_rn_direction(
    p: &dyn BilevelProblem,
    x: &Vector,
    batch: &WeightGrid,
    y_tildes: &[Vector],
    noise: &mut NoiseSpec,
) -> Result<Vector> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("mini-batch must not be empty".into()));
    }
    check_dim("lower-level solutions per batch member", batch.len(), y_tildes.len())?;
    let mut sum = Vector::zeros(p.ul_dim());
    for (i, (lambda, y)) in batch.iter().zip(y_tildes).enumerate() {
        let g = hypergradient_x(p, x, lambda, y, noise).map_err(|e| e.in_batch(i))?;
        sum += g;
    }
    Ok(-sum / batch.len() as f64)
}

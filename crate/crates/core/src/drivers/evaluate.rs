//! Noiseless "true function" evaluators for the three formulations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{bsg_opt_direction, hypergradient_x};
use crate::error::{Error, Result};
use crate::lower::solve_ll_newton;
use crate::noise::NoiseSpec;
use crate::numeric::{SimplexWeight, Vector, WeightGrid};
use crate::problems::BilevelProblem;
use crate::riskaverse::{solve_inner_max_with, InnerMaxOptions};

/// Lower-level residual target of the evaluators.
pub const EVAL_LL_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    Opt,
    Rn,
    Ra,
}

impl Formulation {
    pub const ALL: [Formulation; 3] = [Formulation::Opt, Formulation::Rn, Formulation::Ra];

    pub fn as_str(&self) -> &'static str {
        match self {
            Formulation::Opt => "opt",
            Formulation::Rn => "rn",
            Formulation::Ra => "ra",
        }
    }
}

impl std::fmt::Display for Formulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "opt" | "bsg-opt" => Ok(Formulation::Opt),
            "rn" | "bsg-rn" => Ok(Formulation::Rn),
            "ra" | "bsg-ra" => Ok(Formulation::Ra),
            other => Err(Error::Config(format!("unknown algorithm '{other}' (expected opt, rn or ra)"))),
        }
    }
}

/// Exact lower-level solution `y(x, lambda)`.
pub fn ll_solution(p: &dyn BilevelProblem, x: &Vector, lambda: &SimplexWeight) -> Result<Vector> {
    solve_ll_newton(p, x, lambda.as_slice(), &Vector::zeros(p.ll_dim()), EVAL_LL_TOL)
}

/// `f_OPT(x, lambda) = f_u(x, y(x, lambda))`.
pub fn true_value_opt(p: &dyn BilevelProblem, x: &Vector, lambda: &SimplexWeight) -> Result<f64> {
    let y = ll_solution(p, x, lambda)?;
    Ok(p.ul_value(x, &y))
}

/// `f_RN(x)`: average of `f_OPT(x, lambda_i)` over the grid.
pub fn true_value_rn(p: &dyn BilevelProblem, x: &Vector, grid: &WeightGrid) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("risk-neutral grid must not be empty".into()));
    }
    let values: Vec<f64> = grid
        .points()
        .par_iter()
        .map(|w| true_value_opt(p, x, w))
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `f_RA(x)`: value of the inner maximization solved from a cold start.
pub fn true_value_ra(p: &dyn BilevelProblem, x: &Vector, opts: &InnerMaxOptions) -> Result<f64> {
    Ok(solve_inner_max_with(p, x, None, opts)?.f_u_value)
}

/// Evaluation point for [`true_value`].
#[derive(Clone, Copy, Debug)]
pub enum TruePoint<'a> {
    Opt { x: &'a Vector, lambda: &'a SimplexWeight },
    Rn { x: &'a Vector, grid: &'a WeightGrid },
    Ra { x: &'a Vector },
}

impl TruePoint<'_> {
    pub fn formulation(&self) -> Formulation {
        match self {
            TruePoint::Opt { .. } => Formulation::Opt,
            TruePoint::Rn { .. } => Formulation::Rn,
            TruePoint::Ra { .. } => Formulation::Ra,
        }
    }
}

pub fn true_value(p: &dyn BilevelProblem, point: TruePoint<'_>) -> Result<f64> {
    match point {
        TruePoint::Opt { x, lambda } => true_value_opt(p, x, lambda),
        TruePoint::Rn { x, grid } => true_value_rn(p, x, grid),
        TruePoint::Ra { x } => true_value_ra(p, x, &InnerMaxOptions::default()),
    }
}

/// Exact gradient of `f_OPT` in `(x, lambda)`.
pub fn exact_gradient_opt(p: &dyn BilevelProblem, x: &Vector, lambda: &SimplexWeight) -> Result<(Vector, Vector)> {
    let y = ll_solution(p, x, lambda)?;
    let (dx, dl) = bsg_opt_direction(p, x, lambda, &y, &mut NoiseSpec::none())?;
    Ok((-dx, -dl))
}

/// Exact gradient of `f_RN` over the full grid.
pub fn exact_gradient_rn(p: &dyn BilevelProblem, x: &Vector, grid: &WeightGrid) -> Result<Vector> {
    let grads: Vec<Vector> = grid
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let y = ll_solution(p, x, w).map_err(|e| e.in_batch(i))?;
            hypergradient_x(p, x, w, &y, &mut NoiseSpec::none()).map_err(|e| e.in_batch(i))
        })
        .collect::<Result<_>>()?;
    let mut sum = Vector::zeros(p.ul_dim());
    for g in &grads {
        sum += g;
    }
    Ok(sum / grid.len() as f64)
}

//! Weighted-sum sweeps of the lower-level Pareto front.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{SimplexWeight, Vector};
use crate::problems::BilevelProblem;

use super::evaluate::ll_solution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontPoint {
    pub lambda: SimplexWeight,
    pub f1: f64,
    pub f2: f64,
    pub y: Vector,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoFrontSample {
    pub points: Vec<FrontPoint>,
    /// Weights whose lower-level solve failed, with the reason.
    pub skipped: Vec<(f64, String)>,
    pub optimistic: Option<FrontPoint>,
    pub pessimistic: Option<FrontPoint>,
}

/// Objective values of the lower-level solution at `(x, lambda)`.
pub fn front_point(p: &dyn BilevelProblem, x: &Vector, lambda: &SimplexWeight) -> Result<FrontPoint> {
    if p.num_objectives() != 2 {
        return Err(Error::InvalidArgument(format!(
            "front sweeps need two lower-level objectives, got {}",
            p.num_objectives()
        )));
    }
    let y = ll_solution(p, x, lambda)?;
    Ok(FrontPoint {
        lambda: lambda.clone(),
        f1: p.ll_value(0, x, &y),
        f2: p.ll_value(1, x, &y),
        y,
    })
}

/// Sweeps `lambda_1` over `m` equispaced values in `[0, 1]` at fixed `x`.
pub fn pareto_front(p: &dyn BilevelProblem, x: &Vector, m: usize) -> Result<ParetoFrontSample> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("front sweep needs at least 2 weights, got {m}")));
    }
    let mut out = ParetoFrontSample::default();
    for i in 0..m {
        let t = i as f64 / (m - 1) as f64;
        let lambda = SimplexWeight::new(vec![t, 1.0 - t])?;
        match front_point(p, x, &lambda) {
            Ok(pt) => out.points.push(pt),
            Err(e @ Error::InvalidArgument(_)) => return Err(e),
            Err(e) => out.skipped.push((t, e.to_string())),
        }
    }
    Ok(out)
}

impl ParetoFrontSample {
    /// Marks the lower-level point selected by the optimistic solution `(x, lambda)`.
    pub fn mark_optimistic(&mut self, p: &dyn BilevelProblem, x: &Vector, lambda: &SimplexWeight) -> Result<()> {
        self.optimistic = Some(front_point(p, x, lambda)?);
        Ok(())
    }

    /// Marks the lower-level point selected by the risk-averse inner maximization.
    pub fn mark_pessimistic(&mut self, p: &dyn BilevelProblem, x: &Vector, lambda: &SimplexWeight) -> Result<()> {
        self.pessimistic = Some(front_point(p, x, lambda)?);
        Ok(())
    }

    pub fn values(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.f1, p.f2)).collect()
    }
}

/// `a` weakly dominates `b`: `a <= b` componentwise.
pub fn weakly_dominates(a: (f64, f64), b: (f64, f64), tol: f64) -> bool {
    a.0 <= b.0 + tol && a.1 <= b.1 + tol
}

/// `a` strictly dominates `b`: `a <= b` componentwise with one strict inequality.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 && a.1 <= b.1 && (a.0 < b.0 || a.1 < b.1)
}

/// Index pairs `(i, j)` where point `i` dominates point `j` by more than `tol`
/// in at least one component.
pub fn dominated_pairs(points: &[(f64, f64)], tol: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, &a) in points.iter().enumerate() {
        for (j, &b) in points.iter().enumerate() {
            if i != j && a.0 <= b.0 && a.1 <= b.1 && (a.0 < b.0 - tol || a.1 < b.1 - tol) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Every point of `b` is weakly dominated (within `tol`) by some point on the
/// piecewise-linear curve through the points of `a`, taken in sweep order.
pub fn front_weakly_dominates(a: &[(f64, f64)], b: &[(f64, f64)], tol: f64) -> bool {
    b.iter().all(|&pt| curve_dominates_point(a, pt, tol))
}

fn curve_dominates_point(a: &[(f64, f64)], b: (f64, f64), tol: f64) -> bool {
    if a.iter().any(|&p| weakly_dominates(p, b, tol)) {
        return true;
    }
    a.windows(2).any(|seg| {
        // t in [0,1] with p(t) = s0 + t (s1 - s0) <= b + tol componentwise
        let (s0, s1) = (seg[0], seg[1]);
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for (a0, a1, bound) in [(s0.0, s1.0, b.0 + tol), (s0.1, s1.1, b.1 + tol)] {
            let slope = a1 - a0;
            if slope > 0.0 {
                hi = hi.min((bound - a0) / slope);
            } else if slope < 0.0 {
                lo = lo.max((bound - a0) / slope);
            } else if a0 > bound {
                return false;
            }
        }
        lo <= hi
    })
}

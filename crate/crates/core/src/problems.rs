//! Bilevel problem oracles and the synthetic test instances.
//!
//! Every instance pairs the quadratic upper level
//! `f_u(x, y) = h1'x + h2'y + x'H1y/2 + x'H2x/2` with a bi-objective lower
//! level (JOS1, SP1 or GKV1). Objective indices are 0-based throughout.

use std::fmt;
use std::str::FromStr;

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{asymmetry, BoxSet, Matrix, RngStream, SimplexWeight, Vector};

/// Oracle bundle for a bilevel problem with `q` lower-level objectives.
///
/// `ll_hess_xy` returns the `n x m` block of mixed second derivatives
/// `d^2 f / dx_i dy_k`; `ll_hess_yy` the symmetric `m x m` block. Callers
/// are expected to pass correctly sized arguments; [`ul_oracle`] and
/// [`ll_oracle`] validate before dispatching.
pub trait BilevelProblem: Send + Sync {
    fn ul_dim(&self) -> usize;
    fn ll_dim(&self) -> usize;
    fn num_objectives(&self) -> usize;
    fn ul_box(&self) -> &BoxSet;

    fn ul_value(&self, x: &Vector, y: &Vector) -> f64;
    fn ul_grad_x(&self, x: &Vector, y: &Vector) -> Vector;
    fn ul_grad_y(&self, x: &Vector, y: &Vector) -> Vector;

    fn ll_value(&self, j: usize, x: &Vector, y: &Vector) -> f64;
    fn ll_grad_y(&self, j: usize, x: &Vector, y: &Vector) -> Vector;
    fn ll_hess_xy(&self, j: usize, x: &Vector, y: &Vector) -> Matrix;
    fn ll_hess_yy(&self, j: usize, x: &Vector, y: &Vector) -> Matrix;
}

#[derive(Clone, Debug, PartialEq)]
pub struct UlEval {
    pub value: f64,
    pub grad_x: Vector,
    pub grad_y: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LlEval {
    pub value: f64,
    pub grad_y: Vector,
    pub hess_xy: Matrix,
    pub hess_yy: Matrix,
}

pub fn check_point(p: &dyn BilevelProblem, x: &Vector, y: &Vector) -> Result<()> {
    check_dim("upper-level variable x", p.ul_dim(), x.len())?;
    check_dim("lower-level variable y", p.ll_dim(), y.len())
}

pub(crate) fn check_objective(p: &dyn BilevelProblem, j: usize) -> Result<()> {
    if j < p.num_objectives() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "objective index {j} out of range for q = {}",
            p.num_objectives()
        )))
    }
}

pub fn ul_oracle(p: &dyn BilevelProblem, x: &Vector, y: &Vector) -> Result<UlEval> {
    check_point(p, x, y)?;
    Ok(UlEval {
        value: p.ul_value(x, y),
        grad_x: p.ul_grad_x(x, y),
        grad_y: p.ul_grad_y(x, y),
    })
}

pub fn ll_oracle(p: &dyn BilevelProblem, j: usize, x: &Vector, y: &Vector) -> Result<LlEval> {
    check_objective(p, j)?;
    check_point(p, x, y)?;
    Ok(LlEval {
        value: p.ll_value(j, x, y),
        grad_y: p.ll_grad_y(j, x, y),
        hess_xy: p.ll_hess_xy(j, x, y),
        hess_yy: p.ll_hess_yy(j, x, y),
    })
}

/// `lambda' F(x, y)`.
pub fn weighted_ll_value(p: &dyn BilevelProblem, lambda: &SimplexWeight, x: &Vector, y: &Vector) -> f64 {
    lambda
        .iter()
        .enumerate()
        .map(|(j, &w)| if w == 0.0 { 0.0 } else { w * p.ll_value(j, x, y) })
        .sum()
}

/// Noiseless `sum_j lambda_j grad_y f^j(x, y)`.
pub fn weighted_ll_grad_exact(p: &dyn BilevelProblem, lambda: &[f64], x: &Vector, y: &Vector) -> Vector {
    let mut g = Vector::zeros(p.ll_dim());
    for (j, &w) in lambda.iter().enumerate() {
        if w != 0.0 {
            g.axpy(w, &p.ll_grad_y(j, x, y), 1.0);
        }
    }
    g
}

/// Noiseless `sum_j lambda_j hess_yy f^j(x, y)`.
pub fn weighted_ll_hess_yy_exact(p: &dyn BilevelProblem, lambda: &[f64], x: &Vector, y: &Vector) -> Matrix {
    let m = p.ll_dim();
    let mut h = Matrix::zeros(m, m);
    for (j, &w) in lambda.iter().enumerate() {
        if w != 0.0 {
            h += p.ll_hess_yy(j, x, y) * w;
        }
    }
    h
}

/// Quadratic upper level `h1'x + h2'y + x'H1y/2 + x'H2x/2` with `H2` SPD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticUL {
    pub linear_x: Vector,
    pub linear_y: Vector,
    /// `H1`, `n x m`.
    pub coupling: Matrix,
    /// `H2`, `n x n`, symmetric positive definite.
    pub curvature: Matrix,
}

impl QuadraticUL {
    pub fn new(linear_x: Vector, linear_y: Vector, coupling: Matrix, curvature: Matrix) -> Result<Self> {
        let (n, m) = (linear_x.len(), linear_y.len());
        check_dim("H1 rows", n, coupling.nrows())?;
        check_dim("H1 cols", m, coupling.ncols())?;
        check_dim("H2 rows", n, curvature.nrows())?;
        check_dim("H2 cols", n, curvature.ncols())?;
        let asym = asymmetry(&curvature);
        if asym > 1e-12 {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        if Cholesky::new(curvature.clone()).is_none() {
            return Err(Error::InvalidArgument("H2 must be positive definite".into()));
        }
        Ok(Self {
            linear_x,
            linear_y,
            coupling,
            curvature,
        })
    }

    /// `h1 = a 1`, `h2 = b 1`, `H1 = H2 = I`.
    pub fn constant(nbar: usize, a: f64, b: f64) -> Self {
        Self {
            linear_x: Vector::from_element(nbar, a),
            linear_y: Vector::from_element(nbar, b),
            coupling: Matrix::identity(nbar, nbar),
            curvature: Matrix::identity(nbar, nbar),
        }
    }

    pub fn value(&self, x: &Vector, y: &Vector) -> f64 {
        self.linear_x.dot(x)
            + self.linear_y.dot(y)
            + 0.5 * x.dot(&(&self.coupling * y))
            + 0.5 * x.dot(&(&self.curvature * x))
    }

    pub fn grad_x(&self, x: &Vector, y: &Vector) -> Vector {
        &self.linear_x + (&self.coupling * y) * 0.5 + &self.curvature * x
    }

    pub fn grad_y(&self, x: &Vector, _y: &Vector) -> Vector {
        &self.linear_y + self.coupling.tr_mul(x) * 0.5
    }
}

/// Matrices of the GKV1 lower level:
/// `f1 = y'H3y/2 - y'H4x/2`, `f2 = y'H5y/2 + y'H6x/2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gkv1Params {
    /// `H3`, symmetric positive definite.
    pub curvature1: Matrix,
    /// `H4`, `m x n`.
    pub coupling1: Matrix,
    /// `H5`, symmetric positive definite.
    pub curvature2: Matrix,
    /// `H6`, `m x n`.
    pub coupling2: Matrix,
}

impl Gkv1Params {
    pub fn identity(nbar: usize) -> Self {
        let eye = Matrix::identity(nbar, nbar);
        Self {
            curvature1: eye.clone(),
            coupling1: eye.clone(),
            curvature2: eye.clone(),
            coupling2: eye,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, h) in [("H3", &self.curvature1), ("H5", &self.curvature2)] {
            let asym = asymmetry(h);
            if asym > 1e-12 {
                return Err(Error::NotSymmetric { asymmetry: asym });
            }
            if Cholesky::new(h.clone()).is_none() {
                return Err(Error::InvalidArgument(format!("{name} must be positive definite")));
            }
        }
        let m = self.curvature1.nrows();
        check_dim("H5 size", m, self.curvature2.nrows())?;
        check_dim("H4 rows", m, self.coupling1.nrows())?;
        check_dim("H6 rows", m, self.coupling2.nrows())?;
        check_dim("H6 cols", self.coupling1.ncols(), self.coupling2.ncols())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LowerLevel {
    Jos1,
    Sp1,
    Gkv1(Gkv1Params),
}

/// Quadratic upper level over one of the shipped bi-objective lower levels,
/// with `n = m = nbar`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProblem {
    pub ul: QuadraticUL,
    pub ll: LowerLevel,
    pub ul_box: BoxSet,
    nbar: usize,
}

impl SyntheticProblem {
    pub fn new(ul: QuadraticUL, ll: LowerLevel, ul_box: BoxSet) -> Result<Self> {
        let nbar = ul.linear_x.len();
        check_dim("upper-level y dimension", nbar, ul.linear_y.len())?;
        check_dim("box dimension", nbar, ul_box.dim())?;
        if nbar == 0 {
            return Err(Error::InvalidArgument("problem dimension must be positive".into()));
        }
        if let LowerLevel::Gkv1(params) = &ll {
            params.validate()?;
            check_dim("GKV1 dimension", nbar, params.curvature1.nrows())?;
        }
        Ok(Self { ul, ll, ul_box, nbar })
    }

    /// JOS1 lower level, `h1 = h2 = 1`, `x_i >= -2`.
    pub fn jos1(nbar: usize) -> Result<Self> {
        let ul_box = BoxSet::uniform(nbar, -2.0, f64::INFINITY)?;
        Self::new(QuadraticUL::constant(nbar, 1.0, 1.0), LowerLevel::Jos1, ul_box)
    }

    /// SP1 lower level, `h1 = h2 = 1`, `-2 <= x_i <= 3`.
    pub fn sp1(nbar: usize) -> Result<Self> {
        let ul_box = BoxSet::uniform(nbar, -2.0, 3.0)?;
        Self::new(QuadraticUL::constant(nbar, 1.0, 1.0), LowerLevel::Sp1, ul_box)
    }

    /// Separable GKV1: identity matrices, `h1 = 3`, `h2 = 1`, `x_i <= 0`.
    pub fn gkv1_separable(nbar: usize) -> Result<Self> {
        let ul_box = BoxSet::uniform(nbar, f64::NEG_INFINITY, 0.0)?;
        Self::new(
            QuadraticUL::constant(nbar, 3.0, 1.0),
            LowerLevel::Gkv1(Gkv1Params::identity(nbar)),
            ul_box,
        )
    }

    /// Non-separable GKV1: random SPD `H3`, `H5`, identity `H4`, `H6`,
    /// `h1 ~ U(-5, 0)`, `h2 ~ U(-3, 0)`, `x_i >= 0`.
    pub fn gkv1_nonseparable(nbar: usize, rng: &mut RngStream) -> Result<Self> {
        let curvature1 = make_spd(nbar, rng);
        let curvature2 = make_spd(nbar, rng);
        let linear_x = Vector::from_fn(nbar, |_, _| rng.uniform_in(-5.0, 0.0));
        let linear_y = Vector::from_fn(nbar, |_, _| rng.uniform_in(-3.0, 0.0));
        let eye = Matrix::identity(nbar, nbar);
        let ul = QuadraticUL {
            linear_x,
            linear_y,
            coupling: eye.clone(),
            curvature: eye.clone(),
        };
        let params = Gkv1Params {
            curvature1,
            coupling1: eye.clone(),
            curvature2,
            coupling2: eye,
        };
        let ul_box = BoxSet::uniform(nbar, 0.0, f64::INFINITY)?;
        Self::new(ul, LowerLevel::Gkv1(params), ul_box)
    }

    pub fn nbar(&self) -> usize {
        self.nbar
    }

    /// Closed-form minimizer of `lambda' F(x, .)`, when the weighted Hessian
    /// is nonsingular.
    pub fn closed_form_ll_solution(&self, x: &Vector, lambda: &SimplexWeight) -> Option<Vector> {
        let (l1, l2) = (lambda[0], lambda[1]);
        match &self.ll {
            LowerLevel::Jos1 => {
                let mut y = Vector::zeros(self.nbar);
                for i in 0..self.nbar {
                    let (a, b) = (x[i] * x[i], (x[i] - 2.0).powi(2));
                    let denom = l1 * a + l2 * b;
                    if denom <= 0.0 {
                        return None;
                    }
                    y[i] = 2.0 * l2 * b / denom;
                }
                Some(y)
            }
            LowerLevel::Sp1 => Some(x.map(|xi| (xi + 3.0 * l2) / (1.0 + l2))),
            LowerLevel::Gkv1(g) => {
                let h = &g.curvature1 * l1 + &g.curvature2 * l2;
                let rhs = (&g.coupling1 * x * l1 - &g.coupling2 * x * l2) * 0.5;
                Cholesky::new(h).map(|c| c.solve(&rhs))
            }
        }
    }
}

impl BilevelProblem for SyntheticProblem {
    fn ul_dim(&self) -> usize {
        self.nbar
    }

    fn ll_dim(&self) -> usize {
        self.nbar
    }

    fn num_objectives(&self) -> usize {
        2
    }

    fn ul_box(&self) -> &BoxSet {
        &self.ul_box
    }

    fn ul_value(&self, x: &Vector, y: &Vector) -> f64 {
        self.ul.value(x, y)
    }

    fn ul_grad_x(&self, x: &Vector, y: &Vector) -> Vector {
        self.ul.grad_x(x, y)
    }

    fn ul_grad_y(&self, x: &Vector, y: &Vector) -> Vector {
        self.ul.grad_y(x, y)
    }

    fn ll_value(&self, j: usize, x: &Vector, y: &Vector) -> f64 {
        let nbar = self.nbar as f64;
        match (&self.ll, j) {
            (LowerLevel::Jos1, 0) => x.iter().zip(y.iter()).map(|(a, b)| a * a * b * b).sum::<f64>() / nbar,
            (LowerLevel::Jos1, _) => {
                x.iter()
                    .zip(y.iter())
                    .map(|(a, b)| (a - 2.0).powi(2) * (b - 2.0).powi(2))
                    .sum::<f64>()
                    / nbar
            }
            (LowerLevel::Sp1, 0) => x
                .iter()
                .zip(y.iter())
                .map(|(a, b)| (a - 1.0).powi(2) + (a - b).powi(2))
                .sum(),
            (LowerLevel::Sp1, _) => x
                .iter()
                .zip(y.iter())
                .map(|(a, b)| (b - 3.0).powi(2) + (a - b).powi(2))
                .sum(),
            (LowerLevel::Gkv1(g), 0) => 0.5 * y.dot(&(&g.curvature1 * y)) - 0.5 * y.dot(&(&g.coupling1 * x)),
            (LowerLevel::Gkv1(g), _) => 0.5 * y.dot(&(&g.curvature2 * y)) + 0.5 * y.dot(&(&g.coupling2 * x)),
        }
    }

    fn ll_grad_y(&self, j: usize, x: &Vector, y: &Vector) -> Vector {
        let nbar = self.nbar as f64;
        match (&self.ll, j) {
            (LowerLevel::Jos1, 0) => x.zip_map(y, |a, b| 2.0 * a * a * b / nbar),
            (LowerLevel::Jos1, _) => x.zip_map(y, |a, b| 2.0 * (a - 2.0).powi(2) * (b - 2.0) / nbar),
            (LowerLevel::Sp1, 0) => x.zip_map(y, |a, b| 2.0 * (b - a)),
            (LowerLevel::Sp1, _) => x.zip_map(y, |a, b| 2.0 * (b - 3.0) + 2.0 * (b - a)),
            (LowerLevel::Gkv1(g), 0) => &g.curvature1 * y - (&g.coupling1 * x) * 0.5,
            (LowerLevel::Gkv1(g), _) => &g.curvature2 * y + (&g.coupling2 * x) * 0.5,
        }
    }

    fn ll_hess_xy(&self, j: usize, x: &Vector, y: &Vector) -> Matrix {
        let nbar = self.nbar as f64;
        match (&self.ll, j) {
            (LowerLevel::Jos1, 0) => Matrix::from_diagonal(&x.zip_map(y, |a, b| 4.0 * a * b / nbar)),
            (LowerLevel::Jos1, _) => {
                Matrix::from_diagonal(&x.zip_map(y, |a, b| 4.0 * (a - 2.0) * (b - 2.0) / nbar))
            }
            (LowerLevel::Sp1, _) => Matrix::from_diagonal_element(self.nbar, self.nbar, -2.0),
            (LowerLevel::Gkv1(g), 0) => g.coupling1.transpose() * -0.5,
            (LowerLevel::Gkv1(g), _) => g.coupling2.transpose() * 0.5,
        }
    }

    fn ll_hess_yy(&self, j: usize, x: &Vector, _y: &Vector) -> Matrix {
        let nbar = self.nbar as f64;
        match (&self.ll, j) {
            (LowerLevel::Jos1, 0) => Matrix::from_diagonal(&x.map(|a| 2.0 * a * a / nbar)),
            (LowerLevel::Jos1, _) => Matrix::from_diagonal(&x.map(|a| 2.0 * (a - 2.0).powi(2) / nbar)),
            (LowerLevel::Sp1, 0) => Matrix::from_diagonal_element(self.nbar, self.nbar, 2.0),
            (LowerLevel::Sp1, _) => Matrix::from_diagonal_element(self.nbar, self.nbar, 4.0),
            (LowerLevel::Gkv1(g), 0) => g.curvature1.clone(),
            (LowerLevel::Gkv1(g), _) => g.curvature2.clone(),
        }
    }
}

/// Restricts a problem to a subset of its lower-level objectives.
///
/// With a single index this yields the classical single-objective bilevel
/// problem used for degeneration checks.
pub struct SelectObjectives<P> {
    inner: P,
    objectives: Vec<usize>,
}

impl<P: BilevelProblem> SelectObjectives<P> {
    pub fn new(inner: P, objectives: Vec<usize>) -> Result<Self> {
        if objectives.is_empty() {
            return Err(Error::InvalidArgument("at least one objective must be selected".into()));
        }
        for &j in &objectives {
            check_objective(&inner, j)?;
        }
        Ok(Self { inner, objectives })
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: BilevelProblem> BilevelProblem for SelectObjectives<P> {
    fn ul_dim(&self) -> usize {
        self.inner.ul_dim()
    }

    fn ll_dim(&self) -> usize {
        self.inner.ll_dim()
    }

    fn num_objectives(&self) -> usize {
        self.objectives.len()
    }

    fn ul_box(&self) -> &BoxSet {
        self.inner.ul_box()
    }

    fn ul_value(&self, x: &Vector, y: &Vector) -> f64 {
        self.inner.ul_value(x, y)
    }

    fn ul_grad_x(&self, x: &Vector, y: &Vector) -> Vector {
        self.inner.ul_grad_x(x, y)
    }

    fn ul_grad_y(&self, x: &Vector, y: &Vector) -> Vector {
        self.inner.ul_grad_y(x, y)
    }

    fn ll_value(&self, j: usize, x: &Vector, y: &Vector) -> f64 {
        self.inner.ll_value(self.objectives[j], x, y)
    }

    fn ll_grad_y(&self, j: usize, x: &Vector, y: &Vector) -> Vector {
        self.inner.ll_grad_y(self.objectives[j], x, y)
    }

    fn ll_hess_xy(&self, j: usize, x: &Vector, y: &Vector) -> Matrix {
        self.inner.ll_hess_xy(self.objectives[j], x, y)
    }

    fn ll_hess_yy(&self, j: usize, x: &Vector, y: &Vector) -> Matrix {
        self.inner.ll_hess_yy(self.objectives[j], x, y)
    }
}

/// `A'A + 0.1 I` with `A` standard normal, exactly symmetric.
pub fn make_spd(n: usize, rng: &mut RngStream) -> Matrix {
    let a = rng.normal_matrix(n, n, 1.0);
    let ata = a.tr_mul(&a);
    let mut h = (&ata + ata.transpose()) * 0.5;
    for i in 0..n {
        h[(i, i)] += 0.1;
    }
    h
}

/// Half-width of the sampling window used for unbounded box sides.
pub const INIT_WINDOW: f64 = 5.0;

/// Uniform draw inside `bounds`. Half-infinite sides are truncated to a
/// window of width 5 at the finite bound; fully free coordinates use `[-5, 5]`.
pub fn initial_point(bounds: &BoxSet, rng: &mut RngStream) -> Vector {
    Vector::from_fn(bounds.dim(), |i, _| {
        let (lo, hi) = (bounds.lower()[i], bounds.upper()[i]);
        let (lo, hi) = match (lo.is_finite(), hi.is_finite()) {
            (true, true) => (lo, hi),
            (true, false) => (lo, lo + INIT_WINDOW),
            (false, true) => (hi - INIT_WINDOW, hi),
            (false, false) => (-INIT_WINDOW, INIT_WINDOW),
        };
        if lo == hi {
            lo
        } else {
            rng.uniform_in(lo, hi)
        }
    })
}

/// CLI selection keys for the shipped instances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKey {
    Jos1,
    Sp1,
    Gkv1Sep,
    Gkv1Nonsep,
}

impl ProblemKey {
    pub const ALL: [ProblemKey; 4] = [
        ProblemKey::Jos1,
        ProblemKey::Sp1,
        ProblemKey::Gkv1Sep,
        ProblemKey::Gkv1Nonsep,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemKey::Jos1 => "jos1",
            ProblemKey::Sp1 => "sp1",
            ProblemKey::Gkv1Sep => "gkv1-sep",
            ProblemKey::Gkv1Nonsep => "gkv1-nonsep",
        }
    }

    /// Builds the instance; `problem_seed` only matters for `gkv1-nonsep`.
    pub fn build(&self, nbar: usize, problem_seed: u64) -> Result<SyntheticProblem> {
        if nbar == 0 {
            return Err(Error::Config("nbar must be at least 1".into()));
        }
        match self {
            ProblemKey::Jos1 => SyntheticProblem::jos1(nbar),
            ProblemKey::Sp1 => SyntheticProblem::sp1(nbar),
            ProblemKey::Gkv1Sep => SyntheticProblem::gkv1_separable(nbar),
            ProblemKey::Gkv1Nonsep => {
                SyntheticProblem::gkv1_nonseparable(nbar, &mut RngStream::new(problem_seed, u64::MAX))
            }
        }
    }
}

impl fmt::Display for ProblemKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProblemKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProblemKey::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown problem key '{s}' (expected jos1, sp1, gkv1-sep, gkv1-nonsep)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, finite_diff_jacobian};
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn scalar_ul(h1: f64, h2: f64) -> SyntheticProblem {
        let ul = QuadraticUL::constant(1, h1, h2);
        SyntheticProblem::new(
            ul,
            LowerLevel::Gkv1(Gkv1Params::identity(1)),
            BoxSet::unbounded(1),
        )
        .unwrap()
    }

    #[test]
    fn ul_oracle_hand_example() {
        let p = scalar_ul(3.0, 1.0);
        let e = ul_oracle(&p, &v(&[-1.0]), &v(&[0.0])).unwrap();
        assert_abs_diff_eq!(e.value, -2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(e.grad_x[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.grad_y[0], 0.5, epsilon = 1e-15);

        let fd = finite_diff_grad(|x| p.ul_value(x, &v(&[0.0])), &v(&[-1.0]), 1e-5).unwrap();
        assert_abs_diff_eq!(fd[0], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn ul_oracle_zero_point() {
        let ul = QuadraticUL::new(
            Vector::zeros(2),
            Vector::zeros(2),
            Matrix::zeros(2, 2),
            Matrix::identity(2, 2),
        )
        .unwrap();
        let p = SyntheticProblem::new(ul, LowerLevel::Sp1, BoxSet::unbounded(2)).unwrap();
        let e = ul_oracle(&p, &Vector::zeros(2), &v(&[0.7, -0.3])).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.grad_x, Vector::zeros(2));
        assert_eq!(e.grad_y, Vector::zeros(2));
    }

    #[test]
    fn oracle_dimension_errors() {
        let p = SyntheticProblem::sp1(2).unwrap();
        assert!(ul_oracle(&p, &v(&[1.0]), &v(&[1.0, 2.0])).is_err());
        assert!(ll_oracle(&p, 2, &v(&[1.0, 1.0]), &v(&[1.0, 2.0])).is_err());
        assert!(ll_oracle(&p, 0, &v(&[1.0, 1.0]), &v(&[1.0])).is_err());
    }

    #[test]
    fn ll_oracle_hand_examples() {
        let p = SyntheticProblem::jos1(1).unwrap();
        let e = ll_oracle(&p, 0, &v(&[1.0]), &v(&[1.0])).unwrap();
        assert_eq!(e.value, 1.0);
        assert_eq!(e.grad_y[0], 2.0);
        assert_eq!(e.hess_yy[(0, 0)], 2.0);
        assert_eq!(e.hess_xy[(0, 0)], 4.0);

        let p = SyntheticProblem::sp1(1).unwrap();
        let e = ll_oracle(&p, 1, &v(&[3.0]), &v(&[3.0])).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.grad_y[0], 0.0);

        let p = SyntheticProblem::gkv1_separable(2).unwrap();
        let x = v(&[0.4, -1.2]);
        let e = ll_oracle(&p, 0, &x, &Vector::zeros(2)).unwrap();
        assert_eq!(e.grad_y, &x * -0.5);
        assert_eq!(e.hess_yy, Matrix::identity(2, 2));
        assert_eq!(e.hess_xy, Matrix::identity(2, 2) * -0.5);
    }

    fn check_derivatives(p: &SyntheticProblem, x: &Vector, y: &Vector) {
        for j in 0..2 {
            let g = p.ll_grad_y(j, x, y);
            let fd = finite_diff_grad(|yy| p.ll_value(j, x, yy), y, 1e-6).unwrap();
            assert!((&g - &fd).amax() <= 1e-6 * g.amax().max(1.0), "grad_y objective {j}");

            let hyy = p.ll_hess_yy(j, x, y);
            let fd_yy = finite_diff_jacobian(|yy| p.ll_grad_y(j, x, yy), y, 1e-6).unwrap();
            assert!((&hyy - &fd_yy).amax() <= 1e-5 * hyy.amax().max(1.0), "hess_yy objective {j}");

            // column i of the FD Jacobian w.r.t. x is d(grad_y)/dx_i, i.e. row i of hess_xy
            let hxy = p.ll_hess_xy(j, x, y);
            let fd_xy = finite_diff_jacobian(|xx| p.ll_grad_y(j, xx, y), x, 1e-6).unwrap();
            assert!(
                (&hxy - fd_xy.transpose()).amax() <= 1e-5 * hxy.amax().max(1.0),
                "hess_xy objective {j}"
            );
        }
        let fdx = finite_diff_grad(|xx| p.ul_value(xx, y), x, 1e-6).unwrap();
        assert!((p.ul_grad_x(x, y) - fdx).amax() <= 1e-6 * 10.0);
        let fdy = finite_diff_grad(|yy| p.ul_value(x, yy), y, 1e-6).unwrap();
        assert!((p.ul_grad_y(x, y) - fdy).amax() <= 1e-6 * 10.0);
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let mut rng = RngStream::new(11, 0);
        for key in ProblemKey::ALL {
            for nbar in [1, 3] {
                let p = key.build(nbar, 4).unwrap();
                for _ in 0..20 {
                    let x = Vector::from_fn(nbar, |_, _| rng.uniform_in(-2.0, 3.0));
                    let y = Vector::from_fn(nbar, |_, _| rng.uniform_in(-2.0, 3.0));
                    check_derivatives(&p, &x, &y);
                }
            }
        }
    }

    #[test]
    fn closed_forms_are_stationary() {
        let mut rng = RngStream::new(5, 0);
        for key in ProblemKey::ALL {
            let p = key.build(3, 2).unwrap();
            for _ in 0..20 {
                let x = Vector::from_fn(3, |_, _| rng.uniform_in(-2.0, 3.0));
                let l1 = rng.uniform();
                let lambda = SimplexWeight::new(vec![l1, 1.0 - l1]).unwrap();
                let Some(y) = p.closed_form_ll_solution(&x, &lambda) else { continue };
                let r = weighted_ll_grad_exact(&p, lambda.as_slice(), &x, &y);
                assert!(r.amax() <= 1e-10, "{key}: residual {}", r.amax());
            }
        }
    }

    #[test]
    fn spd_generation() {
        let h = make_spd(1, &mut RngStream::new(3, 0));
        assert!(h[(0, 0)] > 0.0);

        let h = make_spd(50, &mut RngStream::new(0, 0));
        assert_eq!(asymmetry(&h), 0.0);
        let eig = h.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() >= 0.1 - 1e-10);

        let h2 = make_spd(50, &mut RngStream::new(0, 0));
        assert_eq!(h, h2);
    }

    #[test]
    fn initial_point_respects_bounds() {
        let mut rng = RngStream::new(8, 0);
        let b = BoxSet::uniform(1, -2.0, 3.0).unwrap();
        let x = initial_point(&b, &mut rng);
        assert!(b.contains(&x));

        let b = BoxSet::uniform(1, 0.0, 0.0).unwrap();
        assert_eq!(initial_point(&b, &mut rng)[0], 0.0);

        let b = BoxSet::uniform(200, -2.0, f64::INFINITY).unwrap();
        let x = initial_point(&b, &mut rng);
        assert!(x.iter().all(|&xi| (-2.0..=3.0).contains(&xi)));

        let b = BoxSet::unbounded(100);
        assert!(initial_point(&b, &mut rng).iter().all(|&xi| (-5.0..=5.0).contains(&xi)));
    }

    #[test]
    fn problem_keys_round_trip() {
        for key in ProblemKey::ALL {
            assert_eq!(key.as_str().parse::<ProblemKey>().unwrap(), key);
        }
        assert!("rosenbrock".parse::<ProblemKey>().is_err());
        let a = ProblemKey::Gkv1Nonsep.build(4, 9).unwrap();
        let b = ProblemKey::Gkv1Nonsep.build(4, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.ul.linear_x.iter().all(|&h| (-5.0..=0.0).contains(&h)));
        assert!(a.ul.linear_y.iter().all(|&h| (-3.0..=0.0).contains(&h)));
    }

    #[test]
    fn select_objectives_restricts_q() {
        let p = SelectObjectives::new(SyntheticProblem::sp1(2).unwrap(), vec![1]).unwrap();
        assert_eq!(p.num_objectives(), 1);
        let x = v(&[0.5, 1.0]);
        let y = v(&[1.0, 2.0]);
        assert_eq!(p.ll_grad_y(0, &x, &y), p.inner().ll_grad_y(1, &x, &y));
        assert!(SelectObjectives::new(SyntheticProblem::sp1(2).unwrap(), vec![2]).is_err());
    }
}

//! Oracle checks behind the `verify` subcommand.

use std::fmt;

use serde::Serialize;

use crate::adjoint::{bsg_opt_direction, bsg_rn_direction};
use crate::drivers::evaluate::ll_solution;
use crate::drivers::{true_value_ra, true_value_rn, StepsizeRule};
use crate::error::Result;
use crate::lower::{ll_residual, solve_ll, solve_ll_newton, LLBudget};
use crate::noise::NoiseSpec;
use crate::numeric::{
    finite_diff_grad_rel, project_simplex, rel_err, sample_simplex_point, sample_weight_grid, RngStream,
    SimplexWeight, Vector, WeightGrid,
};
use crate::problems::{initial_point, BilevelProblem, ProblemKey};
use crate::riskaverse::{brute_force_max, ra_subgradient, solve_inner_max_with, InnerMaxOptions};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error.
    pub worst: f64,
    pub tol: f64,
    pub samples: usize,
    pub note: String,
}

impl CheckResult {
    fn new(name: &str, worst: f64, tol: f64, samples: usize) -> Self {
        Self {
            name: name.into(),
            passed: worst <= tol,
            worst,
            tol,
            samples,
            note: String::new(),
        }
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<6} {:<34} worst {:>10.3e}  tol {:>8.1e}  n={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tol,
            self.samples
        )?;
        if !self.note.is_empty() {
            write!(f, "  ({})", self.note)?;
        }
        Ok(())
    }
}

/// `f_u(x, y(x, lambda))` for an arbitrary nonnegative weight vector.
fn value_at_raw_weights(p: &dyn BilevelProblem, x: &Vector, lambda: &[f64]) -> f64 {
    match solve_ll_newton(p, x, lambda, &Vector::zeros(p.ll_dim()), 1e-12) {
        Ok(y) => p.ul_value(x, &y),
        Err(_) => f64::NAN,
    }
}

fn interior_weight(q: usize, rng: &mut RngStream) -> SimplexWeight {
    loop {
        let w = sample_simplex_point(q, rng);
        if w.iter().all(|&v| v > 1e-3) {
            return w;
        }
    }
}

/// Adjoint directions against central differences of `f_OPT` (in `x` and
/// `lambda`) and of `f_RN` over a full grid of `grid_size` weights.
pub fn hypergradient_fd(
    keys: &[ProblemKey],
    nbars: &[usize],
    points: usize,
    grid_size: usize,
    tol: f64,
    seed: u64,
) -> Result<[CheckResult; 2]> {
    let (mut worst_opt, mut worst_rn, mut n) = (0.0_f64, 0.0_f64, 0);
    let mut rng = RngStream::new(seed, 11);
    for &key in keys {
        for &nbar in nbars {
            let p = key.build(nbar, seed)?;
            let grid = sample_weight_grid(p.num_objectives(), grid_size, &mut rng)?;
            for _ in 0..points {
                let x = initial_point(p.ul_box(), &mut rng);
                let lambda = interior_weight(p.num_objectives(), &mut rng);
                let y = ll_solution(&p, &x, &lambda)?;
                let (dx, dl) = bsg_opt_direction(&p, &x, &lambda, &y, &mut NoiseSpec::none())?;
                let fd_x = finite_diff_grad_rel(|xx| value_at_raw_weights(&p, xx, lambda.as_slice()), &x)?;
                let fd_l = finite_diff_grad_rel(|ll| value_at_raw_weights(&p, &x, ll.as_slice()), lambda.as_vector())?;
                worst_opt = worst_opt.max(rel_err(&-dx, &fd_x)).max(rel_err(&-dl, &fd_l));

                let ys: Vec<Vector> = grid.iter().map(|w| ll_solution(&p, &x, w)).collect::<Result<_>>()?;
                let d_rn = bsg_rn_direction(&p, &x, &grid, &ys, &mut NoiseSpec::none())?;
                let fd_rn = finite_diff_grad_rel(|xx| true_value_rn(&p, xx, &grid).unwrap_or(f64::NAN), &x)?;
                worst_rn = worst_rn.max(rel_err(&-d_rn, &fd_rn));
                n += 1;
            }
        }
    }
    Ok([
        CheckResult::new("hypergradient vs FD (opt)", worst_opt, tol, n),
        CheckResult::new("hypergradient vs FD (rn, full grid)", worst_rn, tol, n),
    ])
}

/// Gradient-descent lower-level solves against the closed forms of the
/// separable instances. Each solve runs in chunks of `CHUNK` Armijo steps
/// until the stationarity residual is below `1e-9`, a chunk no longer moves
/// the iterate, or `max_iters` is spent.
pub fn closed_form_ll(
    keys: &[ProblemKey],
    nbar: usize,
    samples: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<CheckResult> {
    const CHUNK: usize = 500;
    let mut rng = RngStream::new(seed, 12);
    let (mut worst, mut n, mut most_iters) = (0.0_f64, 0, 0);
    let budget = LLBudget::new(CHUNK, CHUNK, 1.0, StepsizeRule::armijo())?;
    for &key in keys {
        let p = key.build(nbar, seed)?;
        for _ in 0..samples {
            let x = initial_point(p.ul_box(), &mut rng);
            let lambda = interior_weight(p.num_objectives(), &mut rng);
            let Some(exact) = p.closed_form_ll_solution(&x, &lambda) else {
                continue;
            };
            let mut y = Vector::zeros(p.ll_dim());
            let mut used = 0;
            while used < max_iters {
                let next = solve_ll(&p, &x, &lambda, &y, &budget, &mut NoiseSpec::none())?;
                let moved = (&next - &y).amax();
                y = next;
                used += CHUNK;
                if ll_residual(&p, &x, lambda.as_slice(), &y) <= 1e-9 || moved <= 1e-13 {
                    break;
                }
            }
            most_iters = most_iters.max(used);
            worst = worst.max((y - exact).amax());
            n += 1;
        }
    }
    Ok(CheckResult::new("lower-level closed forms", worst, tol, n)
        .with_note(format!("at most {most_iters} gradient steps per solve")))
}

/// Grid oracle for the simplex projection: `lambda_1` on a grid of step `h`,
/// the remaining coordinates minimized exactly (q <= 3).
fn simplex_grid_oracle(v: &Vector, h: f64) -> Vector {
    let k = (1.0 / h).round() as usize;
    let mut best = (f64::INFINITY, Vector::zeros(v.len()));
    for i in 0..=k {
        let a = i as f64 / k as f64;
        let cand = match v.len() {
            2 => Vector::from_vec(vec![a, 1.0 - a]),
            3 => {
                // min (b - v1)^2 + (r - b - v2)^2 over b in [0, r]
                let r = 1.0 - a;
                let b = ((r + v[1] - v[2]) / 2.0).clamp(0.0, r);
                Vector::from_vec(vec![a, b, r - b])
            }
            q => panic!("grid oracle supports q <= 3, got {q}"),
        };
        let d = (v - &cand).norm_squared();
        if d < best.0 {
            best = (d, cand);
        }
    }
    best.1
}

/// Projection against the grid oracle, plus idempotence and non-expansiveness.
pub fn simplex_projection(samples: usize, seed: u64) -> Result<[CheckResult; 2]> {
    let h = 1e-4;
    let mut rng = RngStream::new(seed, 13);
    let (mut worst, mut worst_prop) = (0.0_f64, 0.0_f64);
    for q in [2, 3] {
        for _ in 0..samples {
            let a = Vector::from_fn(q, |_, _| rng.uniform_in(-2.0, 2.0));
            let b = Vector::from_fn(q, |_, _| rng.uniform_in(-2.0, 2.0));
            let pa = project_simplex(&a)?;
            let pb = project_simplex(&b)?;
            worst = worst.max((pa.as_vector() - simplex_grid_oracle(&a, h)).amax());
            let idem = (project_simplex(pa.as_vector())?.as_vector() - pa.as_vector()).amax();
            let expand = (pa.as_vector() - pb.as_vector()).norm() - (&a - &b).norm();
            worst_prop = worst_prop.max(idem).max(expand);
        }
    }
    Ok([
        CheckResult::new("simplex projection vs grid", worst, h, 2 * samples),
        CheckResult::new("simplex idempotent/non-expansive", worst_prop, 1e-12, 2 * samples),
    ])
}

fn lambda1_sweep(step: f64) -> Vec<SimplexWeight> {
    let k = (1.0 / step).round() as usize;
    (0..=k)
        .map(|i| {
            let t = i as f64 / k as f64;
            SimplexWeight::new(vec![t, 1.0 - t]).expect("sweep weight")
        })
        .collect()
}

/// Inner maximization value against a brute-force sweep over `lambda_1`.
pub fn ra_brute_force(keys: &[ProblemKey], points: usize, step: f64, tol: f64, seed: u64) -> Result<CheckResult> {
    let mut rng = RngStream::new(seed, 14);
    let sweep = lambda1_sweep(step);
    let mut worst = 0.0_f64;
    let mut n = 0;
    for &key in keys {
        let p = key.build(1, seed)?;
        for _ in 0..points {
            let x = initial_point(p.ul_box(), &mut rng);
            let sol = solve_inner_max_with(&p, &x, None, &InnerMaxOptions::default())?.require_converged()?;
            let brute = brute_force_max(&p, &x, &sweep)?;
            worst = worst.max((sol.f_u_value - brute).abs());
            n += 1;
        }
    }
    Ok(CheckResult::new("risk-averse vs brute force", worst, tol, n))
}

/// Negative subgradient against central differences of the risk-averse value
/// at points where multi-start agrees on the maximizer.
pub fn danskin(keys: &[ProblemKey], nbar: usize, points: usize, tol: f64, seed: u64) -> Result<CheckResult> {
    let mut rng = RngStream::new(seed, 15);
    let opts = InnerMaxOptions::default();
    let multi = InnerMaxOptions {
        multistart: 8,
        seed,
        ..Default::default()
    };
    let (mut worst, mut n, mut skipped) = (0.0_f64, 0, 0);
    for &key in keys {
        let p = key.build(nbar, seed)?;
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < points && attempts < 10 * points {
            attempts += 1;
            let x = initial_point(p.ul_box(), &mut rng);
            let a = solve_inner_max_with(&p, &x, None, &opts)?;
            let b = solve_inner_max_with(&p, &x, None, &multi)?;
            if !a.converged || (a.lambda.as_vector() - b.lambda.as_vector()).amax() > 1e-6 {
                skipped += 1;
                continue;
            }
            let (d, _) = ra_subgradient(&p, &x, &mut NoiseSpec::none(), None, &opts)?;
            let fd = finite_diff_grad_rel(|xx| true_value_ra(&p, xx, &opts).unwrap_or(f64::NAN), &x)?;
            worst = worst.max(rel_err(&-d, &fd));
            accepted += 1;
            n += 1;
        }
    }
    Ok(CheckResult::new("risk-averse subgradient vs FD", worst, tol, n)
        .with_note(format!("{skipped} points without multi-start agreement skipped")))
}

/// `min-probe <= f_RN <= f_RA` over an equispaced probe grid.
pub fn ordering(keys: &[ProblemKey], nbar: usize, points: usize, probes: usize, slack: f64, seed: u64) -> Result<CheckResult> {
    let mut rng = RngStream::new(seed, 16);
    let grid = WeightGrid::equispaced_biobjective(probes)?;
    let mut worst = 0.0_f64;
    let mut n = 0;
    for &key in keys {
        let p = key.build(nbar, seed)?;
        for _ in 0..points {
            let x = initial_point(p.ul_box(), &mut rng);
            let vals: Vec<f64> = grid
                .iter()
                .map(|w| Ok(p.ul_value(&x, &ll_solution(&p, &x, w)?)))
                .collect::<Result<_>>()?;
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let rn = vals.iter().sum::<f64>() / vals.len() as f64;
            let ra = true_value_ra(&p, &x, &InnerMaxOptions::default())?;
            worst = worst.max(min - rn).max(rn - ra);
            n += 1;
        }
    }
    Ok(CheckResult::new("ordering min <= rn <= ra", worst, slack, n))
}

const SEPARABLE: [ProblemKey; 3] = [ProblemKey::Jos1, ProblemKey::Sp1, ProblemKey::Gkv1Sep];

/// All oracle checks; `quick` shrinks the sample counts.
pub fn run_all(quick: bool, seed: u64) -> Result<Vec<CheckResult>> {
    let s = |full: usize, small: usize| if quick { small } else { full };
    let mut out = Vec::new();
    out.extend(hypergradient_fd(&ProblemKey::ALL, &[1, 5], s(20, 3), s(50, 10), 1e-4, seed)?);
    for nbar in [1, 5] {
        out.push(closed_form_ll(&SEPARABLE, nbar, s(50, 10), 200_000, 1e-5, seed)?);
    }
    out.extend(simplex_projection(s(100, 10), seed)?);
    out.push(ra_brute_force(&[ProblemKey::Gkv1Sep, ProblemKey::Jos1], s(20, 5), 1e-3, 1e-4, seed)?);
    out.push(danskin(&ProblemKey::ALL, 2, s(10, 3), 1e-3, seed)?);
    out.push(ordering(&ProblemKey::ALL, 2, s(50, 10), 100, 1e-8, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_oracle_on_known_projections() {
        let v = Vector::from_vec(vec![0.3, 0.3, 0.4]);
        assert!((simplex_grid_oracle(&v, 1e-2) - &v).amax() < 1e-12);
        let v = Vector::from_vec(vec![2.0, 0.0, 0.0]);
        assert!((simplex_grid_oracle(&v, 1e-2) - Vector::from_vec(vec![1.0, 0.0, 0.0])).amax() < 1e-12);
    }

    #[test]
    fn quick_checks_pass() {
        for c in run_all(true, 1).unwrap() {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn failing_check_reports_fail() {
        let c = CheckResult::new("x", 2.0, 1.0, 1);
        assert!(!c.passed);
        assert!(c.to_string().starts_with("FAIL"));
    }
}

//! Risk-averse inner maximization over the Pareto set and its Danskin
//! subgradient.
//!
//! The inner problem is
//!
//! ```text
//! max_{y, lambda}  f_u(x, y)   s.t.  sum_j lambda_j grad_y f^j(x, y) = 0,  lambda in simplex
//! ```
//!
//! Every lower-level objective is strictly convex in `y`, so the stationarity
//! rows are eliminated by an exact lower-level solve `y = y(x, lambda)` and
//! the reduced value `phi(lambda) = f_u(x, y(x, lambda))` is maximized over
//! the simplex by a projected, damped Newton method in the tangent space of
//! the free weights. Multipliers follow the convention
//! `L = f_u + z_stat' c + z_sum (1' lambda - 1) + z_I' lambda`.

use nalgebra::{Cholesky, SVD};
use serde::{Deserialize, Serialize};

use crate::drivers::stepsize::{projected_armijo_search, ArmijoParams};
use crate::error::{check_dim, Error, Result};
use crate::lower::solve_ll_newton;
use crate::noise::NoiseSpec;
use crate::numeric::{project_simplex, sample_simplex_point, Matrix, RngStream, SimplexWeight, Vector};
use crate::problems::BilevelProblem;

/// Tolerance of the exact lower-level solves.
const LL_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerMaxOptions {
    pub kkt_tol: f64,
    pub max_iter: usize,
    /// Step of the forward differences forming the reduced Hessian.
    pub fd_step: f64,
    /// Weights probed to pick a cold start (equispaced for two objectives,
    /// random otherwise).
    pub probe_points: usize,
    /// Extra random starts; the best KKT point wins.
    pub multistart: usize,
    pub seed: u64,
}

impl Default for InnerMaxOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-6,
            max_iter: 100,
            fd_step: 1e-6,
            probe_points: 101,
            multistart: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerMaxSolution {
    pub y: Vector,
    pub lambda: SimplexWeight,
    /// Stationarity-row multipliers (m entries) followed by the simplex-sum multiplier.
    pub z_e: Vector,
    pub z_i: Vector,
    pub f_u_value: f64,
    pub kkt_residual: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Smallest singular value of the active-constraint Jacobian.
    pub licq_sigma_min: f64,
}

impl InnerMaxSolution {
    pub fn z_stationarity(&self) -> Vector {
        self.z_e.rows(0, self.y.len()).into_owned()
    }

    pub fn z_sum(&self) -> f64 {
        self.z_e[self.y.len()]
    }

    /// Converts an unconverged solution into [`Error::InnerMaxNotConverged`].
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::InnerMaxNotConverged {
                residual: self.kkt_residual,
            })
        }
    }
}

/// Stationarity residual `sum_j lambda_j grad_y f^j(x, y)`.
fn constraint(p: &dyn BilevelProblem, x: &Vector, lambda: &[f64], y: &Vector) -> Vector {
    let mut c = Vector::zeros(y.len());
    for (j, &w) in lambda.iter().enumerate() {
        if w != 0.0 {
            c.axpy(w, &p.ll_grad_y(j, x, y), 1.0);
        }
    }
    c
}

fn lower_solution(p: &dyn BilevelProblem, x: &Vector, lambda: &[f64]) -> Result<Vector> {
    solve_ll_newton(p, x, lambda, &Vector::zeros(p.ll_dim()), LL_TOL)
}

/// `f_u(x, y(x, lambda))`.
fn reduced_value(p: &dyn BilevelProblem, x: &Vector, lambda: &SimplexWeight) -> Result<(Vector, f64)> {
    let y = lower_solution(p, x, lambda.as_slice())?;
    let f = p.ul_value(x, &y);
    Ok((y, f))
}

/// `z_stat = -H^{-1} grad_y f_u` at a feasible point.
fn stationarity_multiplier(p: &dyn BilevelProblem, x: &Vector, lambda: &[f64], y: &Vector) -> Result<Vector> {
    let mut h = Matrix::zeros(y.len(), y.len());
    for (j, &w) in lambda.iter().enumerate() {
        if w != 0.0 {
            h += p.ll_hess_yy(j, x, y) * w;
        }
    }
    let chol = Cholesky::new(h).ok_or(Error::NotPositiveDefinite)?;
    Ok(-chol.solve(&p.ul_grad_y(x, y)))
}

/// Value and gradient of `psi = -phi` at a (possibly unnormalized) weight.
fn reduced_derivatives(p: &dyn BilevelProblem, x: &Vector, lambda: &[f64]) -> Result<(f64, Vector)> {
    let y = lower_solution(p, x, lambda)?;
    let z = stationarity_multiplier(p, x, lambda, &y)?;
    let grad = Vector::from_fn(lambda.len(), |j, _| -p.ll_grad_y(j, x, &y).dot(&z));
    Ok((-p.ul_value(x, &y), grad))
}

/// KKT residual of `min psi` over the simplex from the gradient alone.
fn simplex_kkt(lambda: &[f64], grad: &Vector) -> f64 {
    let support: Vec<usize> = (0..lambda.len()).filter(|&j| lambda[j] > 0.0).collect();
    let nu = support.iter().map(|&j| grad[j]).sum::<f64>() / support.len() as f64;
    let mut r: f64 = 0.0;
    for (j, &l) in lambda.iter().enumerate() {
        let slack = grad[j] - nu;
        r = r.max(if l > 0.0 { slack.abs() } else { (-slack).max(0.0) });
    }
    r
}

/// Projected damped Newton on `psi = -phi` from `start`. Returns the final
/// weight and the iteration count.
fn reduced_newton(
    p: &dyn BilevelProblem,
    x: &Vector,
    start: &SimplexWeight,
    opts: &InnerMaxOptions,
) -> Result<(Vector, usize)> {
    let q = start.len();
    let params = ArmijoParams::default();
    let project = |v: &Vector| project_simplex(v).map(|w| w.as_vector().clone()).unwrap_or_else(|_| v.clone());
    let psi = |v: &Vector| reduced_derivatives(p, x, v.as_slice()).map(|(f, _)| f);

    let mut lambda = start.as_vector().clone();
    let (mut f, mut grad) = reduced_derivatives(p, x, lambda.as_slice())?;
    let mut iter = 0;
    while iter < opts.max_iter {
        if simplex_kkt(lambda.as_slice(), &grad) <= 1e-2 * opts.kkt_tol {
            break;
        }
        iter += 1;
        // free weights: the support plus zero weights the gradient pulls inward
        let support: Vec<usize> = (0..q).filter(|&j| lambda[j] > 0.0).collect();
        let nu = support.iter().map(|&j| grad[j]).sum::<f64>() / support.len() as f64;
        let free: Vec<usize> = (0..q).filter(|&j| lambda[j] > 0.0 || grad[j] < nu).collect();
        let pivot = *free
            .iter()
            .max_by(|&&a, &&b| lambda[a].total_cmp(&lambda[b]))
            .expect("simplex point has a positive weight");
        let others: Vec<usize> = free.iter().copied().filter(|&j| j != pivot).collect();
        let k = others.len();
        if k == 0 {
            break;
        }
        // tangent basis e_i - e_pivot
        let mut basis = Matrix::zeros(q, k);
        for (c, &i) in others.iter().enumerate() {
            basis[(i, c)] = 1.0;
            basis[(pivot, c)] = -1.0;
        }
        let gz = basis.transpose() * &grad;
        let mut hz = Matrix::zeros(k, k);
        let h = opts.fd_step.min(0.5 * lambda[pivot]);
        for c in 0..k {
            let shifted = &lambda + basis.column(c) * h;
            let (_, g2) = reduced_derivatives(p, x, shifted.as_slice())?;
            hz.set_column(c, &(basis.transpose() * (g2 - &grad) / h));
        }
        let hz = (&hz + hz.transpose()) * 0.5;
        let eig_min = hz.clone().symmetric_eigen().eigenvalues.min();
        let scale = 1.0 + hz.amax();
        let tau = if eig_min > 1e-10 * scale { 0.0 } else { -eig_min + 1e-6 * scale };
        let newton = Cholesky::new(&hz + Matrix::identity(k, k) * tau)
            .map(|c| &basis * -c.solve(&gz))
            .unwrap_or_else(|| &basis * -&gz);

        let mut moved = false;
        for d in [newton, &basis * -&gz] {
            let out = projected_armijo_search(psi, &lambda, Some(f), &d, &params, project)?;
            let (f_new, g_new) = reduced_derivatives(p, x, out.point.as_slice())?;
            let kkt_old = simplex_kkt(lambda.as_slice(), &grad);
            let kkt_new = simplex_kkt(out.point.as_slice(), &g_new);
            // near the floating-point floor of psi accept steps that shrink the KKT residual
            let acceptable = !out.flagged || (f_new <= f + 1e-12 * (1.0 + f.abs()) && kkt_new < kkt_old);
            if acceptable && out.point != lambda {
                lambda = out.point;
                f = f_new;
                grad = g_new;
                moved = true;
                break;
            }
        }
        if !moved {
            break;
        }
    }
    Ok((lambda, iter))
}

/// Re-solves `y` exactly at the projected weight and recovers multipliers
/// and the KKT residual.
fn finalize(p: &dyn BilevelProblem, x: &Vector, lambda: &Vector, iterations: usize, tol: f64) -> Result<InnerMaxSolution> {
    let lambda = project_simplex(lambda)?;
    let l = lambda.as_slice();
    let y = lower_solution(p, x, l).map_err(|_| Error::InnerMaxInfeasible {
        violation: f64::INFINITY,
    })?;
    let (m, q) = (y.len(), l.len());
    let c_norm = constraint(p, x, l, &y).amax();
    if c_norm > tol {
        return Err(Error::InnerMaxInfeasible { violation: c_norm });
    }
    let z_stat = stationarity_multiplier(p, x, l, &y)?;
    let grads: Vec<Vector> = (0..q).map(|j| p.ll_grad_y(j, x, &y)).collect();
    // reduced gradient of the value function in lambda
    let g: Vec<f64> = grads.iter().map(|gj| gj.dot(&z_stat)).collect();

    let support: Vec<usize> = (0..q).filter(|&j| l[j] > 0.0).collect();
    let z_sum = -support.iter().map(|&j| g[j]).sum::<f64>() / support.len() as f64;
    let z_i = Vector::from_fn(q, |j, _| (-(g[j] + z_sum)).max(0.0));
    let mut kkt = c_norm;
    for j in 0..q {
        kkt = kkt.max((g[j] + z_sum + z_i[j]).abs()).max((z_i[j] * l[j]).abs());
    }

    let mut z_e = Vector::zeros(m + 1);
    z_e.rows_mut(0, m).copy_from(&z_stat);
    z_e[m] = z_sum;

    let licq_sigma_min = active_jacobian_sigma_min(p, x, l, &y, &grads);
    let f_u_value = p.ul_value(x, &y);
    Ok(InnerMaxSolution {
        y,
        lambda,
        z_e,
        z_i,
        f_u_value,
        kkt_residual: kkt,
        converged: kkt <= tol,
        iterations,
        licq_sigma_min,
    })
}

fn active_jacobian_sigma_min(p: &dyn BilevelProblem, x: &Vector, l: &[f64], y: &Vector, grads: &[Vector]) -> f64 {
    let (m, q) = (y.len(), l.len());
    let active: Vec<usize> = (0..q).filter(|&j| l[j] == 0.0).collect();
    let rows = m + 1 + active.len();
    let mut jac = Matrix::zeros(rows, m + q);
    let mut h = Matrix::zeros(m, m);
    for (j, &w) in l.iter().enumerate() {
        if w != 0.0 {
            h += p.ll_hess_yy(j, x, y) * w;
        }
        jac.view_mut((0, m + j), (m, 1)).copy_from(&grads[j]);
        jac[(m, m + j)] = 1.0;
    }
    jac.view_mut((0, 0), (m, m)).copy_from(&h);
    for (r, &j) in active.iter().enumerate() {
        jac[(m + 1 + r, m + j)] = 1.0;
    }
    let sv = SVD::new(jac, false, false).singular_values;
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if rows > m + q {
        // more constraints than variables: gradients cannot be independent
        0.0
    } else {
        min
    }
}

fn cold_candidates(q: usize, opts: &InnerMaxOptions) -> Vec<SimplexWeight> {
    let mut out: Vec<SimplexWeight> = (0..q).map(|j| SimplexWeight::vertex(q, j)).collect();
    out.push(SimplexWeight::barycenter(q));
    if q == 2 {
        let k = opts.probe_points.max(2);
        for i in 1..k - 1 {
            let t = i as f64 / (k - 1) as f64;
            out.push(SimplexWeight::new(vec![t, 1.0 - t]).expect("valid weight"));
        }
    } else if q > 2 {
        let mut rng = RngStream::new(opts.seed, 1);
        out.extend((0..opts.probe_points).map(|_| sample_simplex_point(q, &mut rng)));
    }
    out
}

/// Solves the inner maximization at `x` with default options.
pub fn solve_inner_max(p: &dyn BilevelProblem, x: &Vector, init: Option<&InnerMaxSolution>) -> Result<InnerMaxSolution> {
    solve_inner_max_with(p, x, init, &InnerMaxOptions::default())
}

/// Starts from the best (by `f_u`) of the warm start, the simplex vertices
/// and barycenter; without a warm start, a probe scan of the simplex is added.
/// A result whose KKT residual misses the tolerance is returned with
/// `converged == false`.
pub fn solve_inner_max_with(
    p: &dyn BilevelProblem,
    x: &Vector,
    init: Option<&InnerMaxSolution>,
    opts: &InnerMaxOptions,
) -> Result<InnerMaxSolution> {
    check_dim("x", p.ul_dim(), x.len())?;
    let q = p.num_objectives();
    let candidates = match init {
        Some(sol) => {
            check_dim("warm-start lambda", q, sol.lambda.len())?;
            let mut c = vec![sol.lambda.clone()];
            c.extend((0..q).map(|j| SimplexWeight::vertex(q, j)));
            c.push(SimplexWeight::barycenter(q));
            c
        }
        None => cold_candidates(q, opts),
    };
    let mut best: Option<(f64, SimplexWeight)> = None;
    for cand in candidates {
        if let Ok((_, f)) = reduced_value(p, x, &cand) {
            if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
                best = Some((f, cand));
            }
        }
    }
    let (_, start) = best.ok_or(Error::InnerMaxInfeasible {
        violation: f64::INFINITY,
    })?;

    let mut starts = vec![start];
    let mut rng = RngStream::new(opts.seed, 2);
    starts.extend((0..opts.multistart).map(|_| sample_simplex_point(q, &mut rng)));

    let mut result: Option<InnerMaxSolution> = None;
    let mut last_err = None;
    for s in &starts {
        let sol = reduced_newton(p, x, s, opts).and_then(|(l, it)| finalize(p, x, &l, it, opts.kkt_tol));
        match sol {
            Ok(sol) => {
                let better = match &result {
                    None => true,
                    Some(r) => (sol.converged && !r.converged) || (sol.converged == r.converged && sol.f_u_value > r.f_u_value),
                };
                if better {
                    result = Some(sol);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match result {
        Some(r) => Ok(r),
        None => Err(last_err.unwrap_or(Error::InnerMaxInfeasible {
            violation: f64::INFINITY,
        })),
    }
}

/// `grad_x f_u + (sum_j lambda_j hess_xy f^j) z_stat` at the inner solution,
/// oracles routed through `noise`.
pub fn lagrangian_grad_x(p: &dyn BilevelProblem, sol: &InnerMaxSolution, x: &Vector, noise: &mut NoiseSpec) -> Result<Vector> {
    check_dim("x", p.ul_dim(), x.len())?;
    check_dim("inner solution y", p.ll_dim(), sol.y.len())?;
    check_dim("inner solution lambda", p.num_objectives(), sol.lambda.len())?;
    check_dim("equality multipliers", p.ll_dim() + 1, sol.z_e.len())?;
    let y = &sol.y;
    let mut g = noise.ul_grad_x(p, x, y);
    let z = sol.z_stationarity();
    for (j, &w) in sol.lambda.iter().enumerate() {
        if w != 0.0 {
            g += noise.ll_hess_xy(p, j, x, y) * &z * w;
        }
    }
    Ok(g)
}

/// Negative subgradient of the risk-averse value function at `x`, together
/// with the inner solution it was taken at.
pub fn ra_subgradient(
    p: &dyn BilevelProblem,
    x: &Vector,
    noise: &mut NoiseSpec,
    warm: Option<&InnerMaxSolution>,
    opts: &InnerMaxOptions,
) -> Result<(Vector, InnerMaxSolution)> {
    let sol = solve_inner_max_with(p, x, warm, opts)?;
    let d = -lagrangian_grad_x(p, &sol, x, noise)?;
    Ok((d, sol))
}

/// `max` of the reduced value over a sweep of weights, for cross-checks.
pub fn brute_force_max(p: &dyn BilevelProblem, x: &Vector, weights: &[SimplexWeight]) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for w in weights {
        best = best.max(reduced_value(p, x, w)?.1);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::bsg_opt_direction;
    use crate::numeric::{finite_diff_grad_rel, WeightGrid};
    use crate::problems::{initial_point, ProblemKey, SelectObjectives, SyntheticProblem};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn sweep(step: f64) -> Vec<SimplexWeight> {
        let k = (1.0 / step).round() as usize;
        (0..=k)
            .map(|i| {
                let t = i as f64 / k as f64;
                SimplexWeight::new(vec![t, 1.0 - t]).unwrap()
            })
            .collect()
    }

    fn check_invariants(sol: &InnerMaxSolution, p: &dyn BilevelProblem, x: &Vector) {
        assert!(sol.converged, "kkt {}", sol.kkt_residual);
        assert!(constraint(p, x, sol.lambda.as_slice(), &sol.y).amax() <= 1e-6);
        assert!(sol.z_i.iter().all(|&z| z >= -1e-10));
        for (z, l) in sol.z_i.iter().zip(sol.lambda.iter()) {
            assert!((z * l).abs() <= 1e-8);
        }
    }

    #[test]
    fn gkv1_identity_matches_grid() {
        let p = SyntheticProblem::gkv1_separable(1).unwrap();
        let grid = sweep(1e-3);
        for xv in [-3.0, -1.7, -0.4, 0.0] {
            let x = v(&[xv]);
            let sol = solve_inner_max(&p, &x, None).unwrap();
            check_invariants(&sol, &p, &x);
            let bf = brute_force_max(&p, &x, &grid).unwrap();
            assert!((sol.f_u_value - bf).abs() < 1e-4, "x={xv}: {} vs {bf}", sol.f_u_value);
        }
    }

    #[test]
    fn jos1_sweeps_zero_to_two() {
        let p = SyntheticProblem::jos1(1).unwrap();
        let x = v(&[1.0]);
        let sol = solve_inner_max(&p, &x, None).unwrap();
        check_invariants(&sol, &p, &x);
        let bf = (0..=20_000)
            .map(|i| p.ul_value(&x, &v(&[i as f64 * 1e-4])))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((sol.f_u_value - bf).abs() < 1e-4);
    }

    #[test]
    fn single_objective_is_the_lower_solution() {
        let mut rng = RngStream::new(8, 0);
        let inner = SyntheticProblem::gkv1_nonseparable(3, &mut rng).unwrap();
        let p = SelectObjectives::new(inner, vec![0]).unwrap();
        let x = initial_point(p.ul_box(), &mut rng);
        let sol = solve_inner_max(&p, &x, None).unwrap();
        let y = lower_solution(&p, &x, &[1.0]).unwrap();
        assert!((&sol.y - &y).amax() < 1e-9);

        let (d, _) = ra_subgradient(&p, &x, &mut NoiseSpec::none(), None, &InnerMaxOptions::default()).unwrap();
        let (dx, _) = bsg_opt_direction(&p, &x, &SimplexWeight::vertex(1, 0), &y, &mut NoiseSpec::none()).unwrap();
        assert!((d - dx).amax() < 1e-8);
    }

    #[test]
    fn lagrangian_gradient_special_cases() {
        let p = SyntheticProblem::gkv1_separable(1).unwrap();
        let x = v(&[-1.0]);
        let mut sol = solve_inner_max(&p, &x, None).unwrap();
        sol.lambda = SimplexWeight::barycenter(2);
        sol.y = v(&[0.0]);
        let g = lagrangian_grad_x(&p, &sol, &x, &mut NoiseSpec::none()).unwrap();
        assert_eq!(g, p.ul_grad_x(&x, &sol.y));
        sol.lambda = SimplexWeight::vertex(2, 0);
        sol.z_e.fill(0.0);
        let g = lagrangian_grad_x(&p, &sol, &x, &mut NoiseSpec::none()).unwrap();
        assert_eq!(g, p.ul_grad_x(&x, &sol.y));
    }

    fn f_ra(p: &dyn BilevelProblem, x: &Vector) -> f64 {
        solve_inner_max(p, x, None).unwrap().f_u_value
    }

    #[test]
    fn danskin_matches_finite_differences() {
        let mut rng = RngStream::new(17, 0);
        let mut checked = 0;
        for key in ProblemKey::ALL {
            let p = key.build(2, 5).unwrap();
            for _ in 0..3 {
                let x = initial_point(p.ul_box(), &mut rng);
                let opts = InnerMaxOptions {
                    multistart: 4,
                    ..Default::default()
                };
                let (d, sol) = ra_subgradient(&p, &x, &mut NoiseSpec::none(), None, &opts).unwrap();
                check_invariants(&sol, &p, &x);
                let fd = finite_diff_grad_rel(|xx| f_ra(&p, xx), &x).unwrap();
                let err = (&d + &fd).norm() / fd.norm().max(1.0);
                assert!(err < 1e-3, "{key}: fd {fd} vs {d}");
                checked += 1;
            }
        }
        assert_eq!(checked, 12);
    }

    #[test]
    fn warm_and_cold_agree() {
        let mut rng = RngStream::new(4, 0);
        let p = SyntheticProblem::sp1(3).unwrap();
        let x = initial_point(p.ul_box(), &mut rng);
        let cold = solve_inner_max(&p, &x, None).unwrap();
        let nearby = solve_inner_max(&p, &x.map(|e| e + 0.01), None).unwrap();
        let warm = solve_inner_max(&p, &x, Some(&nearby)).unwrap();
        assert!((cold.f_u_value - warm.f_u_value).abs() < 1e-9);
    }

    #[test]
    fn ordering_against_probe_grid() {
        let mut rng = RngStream::new(9, 0);
        let probe = WeightGrid::equispaced_biobjective(100).unwrap();
        for key in ProblemKey::ALL {
            let p = key.build(3, 1).unwrap();
            for _ in 0..5 {
                let x = initial_point(p.ul_box(), &mut rng);
                let values: Vec<f64> = probe.iter().map(|w| reduced_value(&p, &x, w).unwrap().1).collect();
                let min = values.iter().copied().fold(f64::INFINITY, f64::min);
                let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let ra = f_ra(&p, &x);
                assert!(min <= mean + 1e-8 && mean <= ra + 1e-8 && max <= ra + 1e-8, "{key}: {max} > {ra}");
            }
        }
    }
}

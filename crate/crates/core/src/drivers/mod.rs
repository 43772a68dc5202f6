//! Upper-level iteration loops for the optimistic (`opt`), risk-neutral
//! (`rn`) and risk-averse (`ra`) formulations.

pub mod evaluate;
pub mod pareto;
pub mod stepsize;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adjoint::{bsg_opt_direction, bsg_rn_direction};
use crate::error::{Error, Result};
use crate::lower::{solve_ll, update_accuracy, LLBudget};
use crate::noise::{NoiseLevel, NoiseSpec};
use crate::numeric::{
    all_finite, project_simplex, sample_minibatch_indices, sample_weight_grid, RngStream, SimplexWeight, Vector,
    WeightGrid,
};
use crate::problems::{initial_point, BilevelProblem};
use crate::riskaverse::{ra_subgradient, solve_inner_max_with, InnerMaxOptions, InnerMaxSolution};

pub use evaluate::{
    exact_gradient_opt, exact_gradient_rn, true_value, true_value_opt, true_value_ra, true_value_rn, Formulation,
    TruePoint,
};
pub use pareto::{pareto_front, FrontPoint, ParetoFrontSample};
pub use stepsize::{armijo_search, projected_armijo_search, ArmijoParams, LineSearchOutcome, StepsizeRule};

/// Random stream indices derived from a run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const NOISE: u64 = 1;
    pub const GRID: u64 = 2;
    pub const BATCH: u64 = 3;
}

/// Increasing-accuracy thresholds on the change of the upper-level value.
pub const OPT_LL_THRESHOLD: f64 = 0.1;
pub const RN_LL_THRESHOLD: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverConfig {
    pub iterations: usize,
    pub ul_stepsize: StepsizeRule,
    pub ll_stepsize: StepsizeRule,
    pub ll_max_iters: usize,
    /// Overrides the per-formulation accuracy threshold.
    pub ll_threshold: Option<f64>,
    pub noise: NoiseLevel,
    /// Risk-neutral grid size.
    pub n_grid: usize,
    /// Risk-neutral mini-batch size.
    pub batch: usize,
    /// Record the true value every this many iterations (and at the last one).
    pub eval_every: usize,
    /// Also record the risk-neutral value along risk-averse runs.
    pub ra_record_rn: bool,
    /// Solve each inner maximization from scratch instead of warm-starting.
    pub cold_start: bool,
    pub inner: InnerMaxOptions,
    pub seed: u64,
    /// Fixed initial point; drawn from the seed when absent.
    pub x0: Option<Vec<f64>>,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            ul_stepsize: StepsizeRule::armijo(),
            ll_stepsize: StepsizeRule::armijo(),
            ll_max_iters: 30,
            ll_threshold: None,
            noise: NoiseLevel::ZERO,
            n_grid: 500,
            batch: 20,
            eval_every: 1,
            ra_record_rn: true,
            cold_start: false,
            inner: InnerMaxOptions::default(),
            seed: 0,
            x0: None,
        }
    }
}

impl DriverConfig {
    pub fn validate(&self) -> Result<()> {
        self.ul_stepsize.validate()?;
        self.ll_stepsize.validate()?;
        NoiseLevel::new(self.noise.sigma_grad, self.noise.sigma_hess)?;
        if self.ll_max_iters == 0 {
            return Err(Error::InvalidArgument("ll_max_iters must be >= 1".into()));
        }
        if self.n_grid == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument("grid size and batch size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument("eval_every must be >= 1".into()));
        }
        Ok(())
    }

    fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec::from_level(self.noise, RngStream::new(self.seed, streams::NOISE))
    }

    fn budget(&self, default_threshold: f64) -> Result<LLBudget> {
        LLBudget::starting(
            self.ll_max_iters,
            self.ll_threshold.unwrap_or(default_threshold),
            self.ll_stepsize,
        )
    }

    /// Initial point: `x0` if given, else drawn from the seed.
    pub fn initial_x(&self, p: &dyn BilevelProblem) -> Result<Vector> {
        match &self.x0 {
            Some(x) => {
                let v = Vector::from_column_slice(x);
                crate::error::check_dim("x0", p.ul_dim(), v.len())?;
                p.ul_box().project(&v)
            }
            None => Ok(initial_point(p.ul_box(), &mut RngStream::new(self.seed, streams::INIT))),
        }
    }

    /// The risk-neutral weight grid of this run.
    pub fn weight_grid(&self, q: usize) -> Result<WeightGrid> {
        sample_weight_grid(q, self.n_grid, &mut RngStream::new(self.seed, streams::GRID))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub time_s: f64,
    /// Formulation-native true value; NaN on iterations that were not evaluated.
    pub f_true: f64,
    /// Risk-neutral value along risk-averse runs (NaN elsewhere).
    pub f_rn: f64,
    /// Stepsize taken to reach this iterate (0 for the initial record).
    pub stepsize: f64,
    /// Lower-level iterations (or inner-maximization iterations for `ra`).
    pub ll_iters: usize,
    pub dir_norm: f64,
    /// The line search found no acceptable step.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub formulation: Formulation,
    pub records: Vec<TraceRecord>,
    pub x_final: Vec<f64>,
    pub lambda_final: Option<Vec<f64>>,
    /// Noiseless projected-gradient step length `|P(v + d) - v|_inf` at the final iterate.
    pub final_stationarity: f64,
    /// Noiseless final search direction (x block).
    pub final_direction: Vec<f64>,
    /// Weight selected by the inner maximization at the final iterate (`ra`).
    pub inner_lambda_final: Option<Vec<f64>>,
    /// Smallest active-constraint singular value of that inner solution.
    pub inner_licq_sigma_min: Option<f64>,
}

impl RunTrace {
    pub fn final_value(&self) -> f64 {
        self.records
            .iter()
            .rev()
            .map(|r| r.f_true)
            .find(|v| !v.is_nan())
            .unwrap_or(f64::NAN)
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.f_true).collect()
    }

    pub fn flagged_steps(&self) -> usize {
        self.records.iter().filter(|r| r.flagged).count()
    }
}

fn split_joint(v: &Vector, n: usize) -> (Vector, Vector) {
    (v.rows(0, n).into_owned(), v.rows(n, v.len() - n).into_owned())
}

fn join(a: &Vector, b: &Vector) -> Vector {
    let mut v = Vector::zeros(a.len() + b.len());
    v.rows_mut(0, a.len()).copy_from(a);
    v.rows_mut(a.len(), b.len()).copy_from(b);
    v
}

/// Singular trial points count as rejected trials inside line searches.
fn trial_value(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::NotPositiveDefinite) => Ok(f64::INFINITY),
        other => other,
    }
}

struct Step {
    point: Vector,
    stepsize: f64,
    flagged: bool,
    value: Option<f64>,
}

/// One projected update `P(v + a d)` under `rule`. Armijo steps test the true
/// function; a flagged step that would increase it is rejected.
fn take_step<F, P>(rule: &StepsizeRule, v: &Vector, f_v: Option<f64>, d: &Vector, mut f: F, project: P) -> Result<Step>
where
    F: FnMut(&Vector) -> Result<f64>,
    P: Fn(&Vector) -> Vector,
{
    match rule {
        StepsizeRule::Fixed { value } => Ok(Step {
            point: project(&(v + d * *value)),
            stepsize: *value,
            flagged: false,
            value: None,
        }),
        StepsizeRule::Armijo(params) => {
            let f0 = match f_v {
                Some(x) => x,
                None => f(v)?,
            };
            let out = projected_armijo_search(|t: &Vector| trial_value(f(t)), v, Some(f0), d, params, &project)?;
            if out.flagged && !(out.value <= f0) {
                Ok(Step {
                    point: v.clone(),
                    stepsize: 0.0,
                    flagged: true,
                    value: Some(f0),
                })
            } else {
                Ok(Step {
                    point: out.point,
                    stepsize: out.step,
                    flagged: out.flagged,
                    value: Some(out.value),
                })
            }
        }
    }
}

fn check_iterate(v: &Vector, k: usize) -> Result<()> {
    if all_finite(v) {
        Ok(())
    } else {
        Err(Error::NonFinite("upper-level iterate".into()).at_iteration(k))
    }
}

fn should_eval(cfg: &DriverConfig, k: usize) -> bool {
    k.is_multiple_of(cfg.eval_every) || k == cfg.iterations
}

/// Optimistic driver: joint projected (stochastic) gradient steps in `(x, lambda)`.
pub fn run_bsg_opt(p: &dyn BilevelProblem, cfg: &DriverConfig) -> Result<RunTrace> {
    cfg.validate()?;
    let start = Instant::now();
    let (n, q) = (p.ul_dim(), p.num_objectives());
    let mut noise = cfg.noise_spec();
    let mut budget = cfg.budget(OPT_LL_THRESHOLD)?;
    let bounds = p.ul_box().clone();
    let project = |v: &Vector| {
        let (x, l) = split_joint(v, n);
        let x = bounds.project(&x).unwrap_or(x);
        let l = project_simplex(&l).map(|w| w.as_vector().clone()).unwrap_or(l);
        join(&x, &l)
    };
    let f_joint = |v: &Vector| -> Result<f64> {
        let (x, l) = split_joint(v, n);
        true_value_opt(p, &x, &SimplexWeight::from_vector(l)?)
    };

    let mut v = join(&cfg.initial_x(p)?, SimplexWeight::barycenter(q).as_vector());
    let mut y = Vector::zeros(p.ll_dim());
    let mut f_cur = f_joint(&v)?;
    let mut records = vec![TraceRecord {
        iter: 0,
        time_s: start.elapsed().as_secs_f64(),
        f_true: f_cur,
        f_rn: f64::NAN,
        stepsize: 0.0,
        ll_iters: 0,
        dir_norm: 0.0,
        flagged: false,
    }];
    let mut f_ul_prev: Option<f64> = None;

    for k in 1..=cfg.iterations {
        let mut run = || -> Result<(Step, usize, f64)> {
            let (x, l) = split_joint(&v, n);
            let lambda = SimplexWeight::from_vector(l)?;
            let ll_iters = budget.current_iters;
            y = solve_ll(p, &x, &lambda, &y, &budget, &mut noise)?;
            let (dx, dl) = bsg_opt_direction(p, &x, &lambda, &y, &mut noise)?;
            let d = join(&dx, &dl);
            let f_known = if cfg.ul_stepsize.is_armijo() { Some(f_cur) } else { None };
            let step = take_step(&cfg.ul_stepsize, &v, f_known, &d, f_joint, project)?;
            Ok((step, ll_iters, d.norm()))
        };
        let (step, ll_iters, dir_norm) = run().map_err(|e| e.at_iteration(k))?;
        check_iterate(&step.point, k)?;
        v = step.point;

        let (x, _) = split_joint(&v, n);
        let f_ul = p.ul_value(&x, &y);
        if let Some(prev) = f_ul_prev {
            budget = update_accuracy(budget, prev, f_ul);
        }
        f_ul_prev = Some(f_ul);

        let f_true = match step.value {
            Some(val) => val,
            None if should_eval(cfg, k) => f_joint(&v).map_err(|e| e.at_iteration(k))?,
            None => f64::NAN,
        };
        if !f_true.is_nan() {
            f_cur = f_true;
        }
        records.push(TraceRecord {
            iter: k,
            time_s: start.elapsed().as_secs_f64(),
            f_true: if should_eval(cfg, k) { f_true } else { f64::NAN },
            f_rn: f64::NAN,
            stepsize: step.stepsize,
            ll_iters,
            dir_norm,
            flagged: step.flagged,
        });
    }

    let (x, l) = split_joint(&v, n);
    let lambda = SimplexWeight::from_vector(l.clone())?;
    let (gx, gl) = exact_gradient_opt(p, &x, &lambda)?;
    let d = -join(&gx, &gl);
    let final_stationarity = (project(&(&v + &d)) - &v).amax();
    Ok(RunTrace {
        formulation: Formulation::Opt,
        records,
        x_final: x.as_slice().to_vec(),
        lambda_final: Some(l.as_slice().to_vec()),
        final_stationarity,
        final_direction: (-gx).as_slice().to_vec(),
        inner_lambda_final: None,
        inner_licq_sigma_min: None,
    })
}

/// Risk-neutral driver: mini-batch projected (stochastic) gradient steps in `x`.
pub fn run_bsg_rn(p: &dyn BilevelProblem, cfg: &DriverConfig) -> Result<RunTrace> {
    cfg.validate()?;
    let start = Instant::now();
    let q = p.num_objectives();
    let grid = cfg.weight_grid(q)?;
    let mut noise = cfg.noise_spec();
    let mut batch_rng = RngStream::new(cfg.seed, streams::BATCH);
    let mut budget = cfg.budget(RN_LL_THRESHOLD)?;
    let bounds = p.ul_box().clone();
    let project = |x: &Vector| bounds.project(x).unwrap_or_else(|_| x.clone());
    let f_rn = |x: &Vector| true_value_rn(p, x, &grid);

    let mut x = cfg.initial_x(p)?;
    let mut warm: Vec<Vector> = vec![Vector::zeros(p.ll_dim()); grid.len()];
    let mut f_cur = f_rn(&x)?;
    let mut records = vec![TraceRecord {
        iter: 0,
        time_s: start.elapsed().as_secs_f64(),
        f_true: f_cur,
        f_rn: f64::NAN,
        stepsize: 0.0,
        ll_iters: 0,
        dir_norm: 0.0,
        flagged: false,
    }];
    let mut f_ul_prev: Option<f64> = None;

    for k in 1..=cfg.iterations {
        let mut run = || -> Result<(Step, usize, f64, f64)> {
            let idx: Vec<usize> = if cfg.batch >= grid.len() {
                (0..grid.len()).collect()
            } else {
                sample_minibatch_indices(grid.len(), cfg.batch, &mut batch_rng)?
            };
            let batch = WeightGrid::new(idx.iter().map(|&i| grid.points()[i].clone()).collect())?;
            let ll_iters = budget.current_iters;
            let mut ys = Vec::with_capacity(idx.len());
            for (b, &i) in idx.iter().enumerate() {
                let yi = solve_ll(p, &x, &batch.points()[b], &warm[i], &budget, &mut noise).map_err(|e| e.in_batch(b))?;
                warm[i] = yi.clone();
                ys.push(yi);
            }
            let d = bsg_rn_direction(p, &x, &batch, &ys, &mut noise)?;
            let f_known = if cfg.ul_stepsize.is_armijo() { Some(f_cur) } else { None };
            let step = take_step(&cfg.ul_stepsize, &x, f_known, &d, f_rn, project)?;
            let f_ul = ys.iter().map(|yi| p.ul_value(&step.point, yi)).sum::<f64>() / ys.len() as f64;
            Ok((step, ll_iters, d.norm(), f_ul))
        };
        let (step, ll_iters, dir_norm, f_ul) = run().map_err(|e| e.at_iteration(k))?;
        check_iterate(&step.point, k)?;
        x = step.point;
        if let Some(prev) = f_ul_prev {
            budget = update_accuracy(budget, prev, f_ul);
        }
        f_ul_prev = Some(f_ul);

        let f_true = match step.value {
            Some(val) => val,
            None if should_eval(cfg, k) => f_rn(&x).map_err(|e| e.at_iteration(k))?,
            None => f64::NAN,
        };
        if !f_true.is_nan() {
            f_cur = f_true;
        }
        records.push(TraceRecord {
            iter: k,
            time_s: start.elapsed().as_secs_f64(),
            f_true: if should_eval(cfg, k) { f_true } else { f64::NAN },
            f_rn: f64::NAN,
            stepsize: step.stepsize,
            ll_iters,
            dir_norm,
            flagged: step.flagged,
        });
    }

    let d = -exact_gradient_rn(p, &x, &grid)?;
    let final_stationarity = (project(&(&x + &d)) - &x).amax();
    Ok(RunTrace {
        formulation: Formulation::Rn,
        records,
        x_final: x.as_slice().to_vec(),
        lambda_final: None,
        final_stationarity,
        final_direction: d.as_slice().to_vec(),
        inner_lambda_final: None,
        inner_licq_sigma_min: None,
    })
}

/// Risk-averse driver: projected (stochastic) subgradient steps in `x` with
/// warm-started inner maximizations.
pub fn run_bsg_ra(p: &dyn BilevelProblem, cfg: &DriverConfig) -> Result<RunTrace> {
    cfg.validate()?;
    let start = Instant::now();
    let q = p.num_objectives();
    let grid = if cfg.ra_record_rn { Some(cfg.weight_grid(q)?) } else { None };
    let mut noise = cfg.noise_spec();
    let bounds = p.ul_box().clone();
    let project = |x: &Vector| bounds.project(x).unwrap_or_else(|_| x.clone());
    let f_ra = |x: &Vector| true_value_ra(p, x, &cfg.inner);
    let f_rn = |x: &Vector| -> Result<f64> {
        match &grid {
            Some(g) => true_value_rn(p, x, g),
            None => Ok(f64::NAN),
        }
    };

    let mut x = cfg.initial_x(p)?;
    let mut warm: Option<InnerMaxSolution> = None;
    let mut f_cur = f_ra(&x)?;
    let mut records = vec![TraceRecord {
        iter: 0,
        time_s: start.elapsed().as_secs_f64(),
        f_true: f_cur,
        f_rn: f_rn(&x)?,
        stepsize: 0.0,
        ll_iters: 0,
        dir_norm: 0.0,
        flagged: false,
    }];

    for k in 1..=cfg.iterations {
        let mut run = || -> Result<(Step, usize, f64)> {
            let w = if cfg.cold_start { None } else { warm.as_ref() };
            let (d, sol) = ra_subgradient(p, &x, &mut noise, w, &cfg.inner)?;
            if !sol.converged {
                log::warn!("iteration {k}: inner maximization KKT residual {:e}", sol.kkt_residual);
            }
            let iters = sol.iterations;
            warm = Some(sol);
            let f_known = if cfg.ul_stepsize.is_armijo() { Some(f_cur) } else { None };
            let step = take_step(&cfg.ul_stepsize, &x, f_known, &d, f_ra, project)?;
            Ok((step, iters, d.norm()))
        };
        let (step, inner_iters, dir_norm) = run().map_err(|e| e.at_iteration(k))?;
        check_iterate(&step.point, k)?;
        x = step.point;

        let eval = should_eval(cfg, k);
        let f_true = match step.value {
            Some(val) => val,
            None if eval => f_ra(&x).map_err(|e| e.at_iteration(k))?,
            None => f64::NAN,
        };
        if !f_true.is_nan() {
            f_cur = f_true;
        }
        let rn = if eval { f_rn(&x).map_err(|e| e.at_iteration(k))? } else { f64::NAN };
        records.push(TraceRecord {
            iter: k,
            time_s: start.elapsed().as_secs_f64(),
            f_true: if eval { f_true } else { f64::NAN },
            f_rn: rn,
            stepsize: step.stepsize,
            ll_iters: inner_iters,
            dir_norm,
            flagged: step.flagged,
        });
    }

    let (d, sol) = ra_subgradient(p, &x, &mut NoiseSpec::none(), None, &cfg.inner)?;
    let final_stationarity = (project(&(&x + &d)) - &x).amax();
    Ok(RunTrace {
        formulation: Formulation::Ra,
        records,
        x_final: x.as_slice().to_vec(),
        lambda_final: None,
        final_stationarity,
        final_direction: d.as_slice().to_vec(),
        inner_lambda_final: Some(sol.lambda.as_slice().to_vec()),
        inner_licq_sigma_min: Some(sol.licq_sigma_min),
    })
}

pub fn run(p: &dyn BilevelProblem, formulation: Formulation, cfg: &DriverConfig) -> Result<RunTrace> {
    match formulation {
        Formulation::Opt => run_bsg_opt(p, cfg),
        Formulation::Rn => run_bsg_rn(p, cfg),
        Formulation::Ra => run_bsg_ra(p, cfg),
    }
}

/// One-sided difference `(f(P(x + h u)) - f(x)) / h` along the unit vector of
/// the projected step `P(x + d) - x`; `None` when that step vanishes.
pub fn directional_derivative_probe<F>(mut f: F, x: &Vector, d: &Vector, project: impl Fn(&Vector) -> Vector, h: f64) -> Result<Option<f64>>
where
    F: FnMut(&Vector) -> Result<f64>,
{
    let s = project(&(x + d)) - x;
    let norm = s.norm();
    if norm == 0.0 {
        return Ok(None);
    }
    let u = s / norm;
    let f0 = f(x)?;
    let f1 = f(&project(&(x + u * h)))?;
    Ok(Some((f1 - f0) / h))
}

/// Inner maximization at the final iterate of a risk-averse run.
pub fn final_inner_solution(p: &dyn BilevelProblem, trace: &RunTrace, opts: &InnerMaxOptions) -> Result<InnerMaxSolution> {
    solve_inner_max_with(p, &Vector::from_column_slice(&trace.x_final), None, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{SelectObjectives, SyntheticProblem};

    fn det_cfg(iterations: usize) -> DriverConfig {
        DriverConfig {
            iterations,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_hold_initial_record() {
        let p = SyntheticProblem::sp1(1).unwrap();
        for f in Formulation::ALL {
            let mut cfg = det_cfg(0);
            cfg.n_grid = 20;
            let t = run(&p, f, &cfg).unwrap();
            assert_eq!(t.records.len(), 1);
            assert_eq!(t.records[0].iter, 0);
        }
    }

    #[test]
    fn opt_gkv1_separable_monotone_and_stationary() {
        let p = SyntheticProblem::gkv1_separable(1).unwrap();
        let t = run_bsg_opt(&p, &det_cfg(100)).unwrap();
        let vals = t.values();
        for w in vals.windows(2) {
            assert!(w[1] <= w[0], "{w:?}");
        }
        assert_eq!(t.lambda_final.as_ref().unwrap().len(), 2);
        let x = Vector::from_column_slice(&t.x_final);
        let lambda = SimplexWeight::new(t.lambda_final.clone().unwrap()).unwrap();
        let y = evaluate::ll_solution(&p, &x, &lambda).unwrap();
        assert!(crate::lower::ll_residual(&p, &x, lambda.as_slice(), &y) <= 1e-5);
    }

    #[test]
    fn iterates_stay_feasible_under_noise() {
        let p = SyntheticProblem::sp1(2).unwrap();
        let cfg = DriverConfig {
            iterations: 20,
            ul_stepsize: StepsizeRule::fixed(0.1),
            ll_stepsize: StepsizeRule::fixed(0.01),
            noise: NoiseLevel::new(1.0, 0.1).unwrap(),
            n_grid: 30,
            batch: 5,
            seed: 3,
            ..Default::default()
        };
        for f in Formulation::ALL {
            let t = run(&p, f, &cfg).unwrap();
            let x = Vector::from_column_slice(&t.x_final);
            assert!(p.ul_box().contains(&x));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let p = SyntheticProblem::jos1(2).unwrap();
        let cfg = DriverConfig {
            iterations: 15,
            ul_stepsize: StepsizeRule::fixed(0.1),
            ll_stepsize: StepsizeRule::fixed(0.01),
            noise: NoiseLevel::new(1.0, 0.1).unwrap(),
            n_grid: 25,
            batch: 5,
            seed: 9,
            ..Default::default()
        };
        for f in Formulation::ALL {
            let a = run(&p, f, &cfg).unwrap();
            let b = run(&p, f, &cfg).unwrap();
            assert_eq!(a.x_final, b.x_final);
            let strip = |t: &RunTrace| t.records.iter().map(|r| (r.f_true.to_bits(), r.stepsize.to_bits())).collect::<Vec<_>>();
            assert_eq!(strip(&a), strip(&b));
        }
    }

    #[test]
    fn full_batch_is_deterministic_gradient_descent() {
        let p = SyntheticProblem::gkv1_separable(1).unwrap();
        let cfg = DriverConfig {
            iterations: 5,
            n_grid: 10,
            batch: 10,
            ..Default::default()
        };
        let a = run_bsg_rn(&p, &cfg).unwrap();
        let b = run_bsg_rn(&p, &DriverConfig { seed: cfg.seed, ..cfg.clone() }).unwrap();
        assert_eq!(a.x_final, b.x_final);
    }

    #[test]
    fn ra_single_objective_matches_plain_descent() {
        let inner = SyntheticProblem::gkv1_separable(2).unwrap();
        let p = SelectObjectives::new(inner, vec![0]).unwrap();
        let cfg = DriverConfig {
            iterations: 10,
            ul_stepsize: StepsizeRule::fixed(0.1),
            ra_record_rn: false,
            ..Default::default()
        };
        let t = run_bsg_ra(&p, &cfg).unwrap();
        let mut x = cfg.initial_x(&p).unwrap();
        let one = SimplexWeight::vertex(1, 0);
        for rec in &t.records[1..] {
            let (g, _) = exact_gradient_opt(&p, &x, &one).unwrap();
            x = p.ul_box().project(&(&x - g * 0.1)).unwrap();
            let f = true_value_opt(&p, &x, &one).unwrap();
            assert!((rec.f_true - f).abs() < 1e-8);
        }
    }

    #[test]
    fn eval_every_skips_records() {
        let p = SyntheticProblem::sp1(1).unwrap();
        let cfg = DriverConfig {
            iterations: 5,
            ul_stepsize: StepsizeRule::fixed(0.1),
            eval_every: 2,
            ..Default::default()
        };
        let t = run_bsg_opt(&p, &cfg).unwrap();
        let evaluated: Vec<bool> = t.records.iter().map(|r| !r.f_true.is_nan()).collect();
        assert_eq!(evaluated, vec![true, false, true, false, true, true]);
    }
}

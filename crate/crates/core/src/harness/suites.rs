//! Named experiment suites.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::drivers::pareto::front_weakly_dominates;
use crate::drivers::{pareto_front, true_value_opt, true_value_ra, true_value_rn, Formulation, RunTrace, StepsizeRule};
use crate::error::{Error, Result};
use crate::numeric::{project_simplex, SimplexWeight, Vector};
use crate::problems::{BilevelProblem, ProblemKey};
use crate::riskaverse::InnerMaxOptions;

use super::config::RunConfig;
use super::experiment::{run_experiment, ExperimentResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    DetSep,
    DetNonsep,
    StochNonsep,
    QSweep,
    GridSearch,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::DetSep,
        Suite::DetNonsep,
        Suite::StochNonsep,
        Suite::QSweep,
        Suite::GridSearch,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Suite::DetSep => "det-sep",
            Suite::DetNonsep => "det-nonsep",
            Suite::StochNonsep => "stoch-nonsep",
            Suite::QSweep => "q-sweep",
            Suite::GridSearch => "grid-search",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite '{s}'")))
    }
}

pub const SEPARABLE: [ProblemKey; 3] = [ProblemKey::Jos1, ProblemKey::Sp1, ProblemKey::Gkv1Sep];
pub const NOISE_LEVELS: [(f64, f64); 3] = [(0.0, 0.0), (1.0, 0.1), (2.0, 0.2)];
pub const Q_VALUES: [usize; 4] = [10, 20, 40, 500];
pub const UL_GRID: [f64; 4] = [1.0, 0.1, 0.01, 0.001];
pub const LL_GRID: [f64; 3] = [0.01, 0.001, 0.0001];

/// Tuned fixed stepsizes of the stochastic runs.
pub fn stochastic_stepsizes(algo: Formulation) -> (StepsizeRule, StepsizeRule) {
    let ul = if algo == Formulation::Rn { 1.0 } else { 0.1 };
    (StepsizeRule::fixed(ul), StepsizeRule::fixed(0.001))
}

/// Overrides shared by every run of a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteOptions {
    pub nbar: Option<usize>,
    pub iterations: Option<usize>,
    pub trials: Option<usize>,
    pub base_seed: u64,
    pub problem_seed: u64,
    pub eval_every: usize,
    pub parallelism: Option<usize>,
    /// Noise level of the grid search.
    pub grid_noise: (f64, f64),
    pub front_points: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            nbar: None,
            iterations: None,
            trials: None,
            base_seed: 0,
            problem_seed: 0,
            eval_every: 1,
            parallelism: None,
            grid_noise: NOISE_LEVELS[1],
            front_points: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRun {
    /// Relative output directory, e.g. `jos1/opt`.
    pub name: String,
    pub config: RunConfig,
}

fn fmt_step(r: &StepsizeRule) -> String {
    r.to_string()
}

/// The runs making up `suite`, with outputs under `out`.
pub fn plan(suite: Suite, out: &Path, opts: &SuiteOptions) -> Vec<SuiteRun> {
    let base = RunConfig {
        base_seed: opts.base_seed,
        problem_seed: opts.problem_seed,
        eval_every: opts.eval_every,
        parallelism: opts.parallelism,
        iterations: opts.iterations,
        front_points: opts.front_points,
        ..Default::default()
    };
    let nonsep = |trials_default: usize| RunConfig {
        problem: ProblemKey::Gkv1Nonsep,
        nbar: opts.nbar.unwrap_or(50),
        n_grid: 500,
        batch: Some(20),
        trials: opts.trials.unwrap_or(trials_default),
        ..base.clone()
    };
    let mut runs = Vec::new();
    let mut push = |name: String, mut config: RunConfig| {
        config.out = out.join(&name);
        runs.push(SuiteRun { name, config });
    };
    match suite {
        Suite::DetSep => {
            for key in SEPARABLE {
                for algo in Formulation::ALL {
                    let cfg = RunConfig {
                        problem: key,
                        nbar: opts.nbar.unwrap_or(1),
                        algo,
                        trials: opts.trials.unwrap_or(1),
                        ..base.clone()
                    };
                    push(format!("{key}/{algo}"), cfg);
                }
            }
        }
        Suite::DetNonsep => {
            for algo in Formulation::ALL {
                push(format!("{algo}"), RunConfig { algo, ..nonsep(1) });
            }
        }
        Suite::StochNonsep => {
            for (sg, sh) in NOISE_LEVELS {
                for algo in Formulation::ALL {
                    let (ul, ll) = stochastic_stepsizes(algo);
                    let cfg = RunConfig {
                        algo,
                        ul_stepsize: ul,
                        ll_stepsize: ll,
                        sigma_grad: sg,
                        sigma_hess: sh,
                        ..nonsep(10)
                    };
                    push(format!("sg{sg}_sh{sh}/{algo}"), cfg);
                }
            }
        }
        Suite::QSweep => {
            for q in Q_VALUES {
                let cfg = RunConfig {
                    algo: Formulation::Rn,
                    batch: Some(q),
                    ..nonsep(10)
                };
                push(format!("Q{q}"), cfg);
            }
        }
        Suite::GridSearch => {
            let (sg, sh) = opts.grid_noise;
            for algo in Formulation::ALL {
                // the risk-averse inner problem is solved exactly, so its LL stepsize is unused
                let lls: &[f64] = if algo == Formulation::Ra { &LL_GRID[..1] } else { &LL_GRID };
                for ul in UL_GRID {
                    for &ll in lls {
                        let cfg = RunConfig {
                            algo,
                            ul_stepsize: StepsizeRule::fixed(ul),
                            ll_stepsize: StepsizeRule::fixed(ll),
                            sigma_grad: sg,
                            sigma_hess: sh,
                            ..nonsep(10)
                        };
                        push(format!("{algo}/ul{ul}_ll{ll}"), cfg);
                    }
                }
            }
        }
    }
    runs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub problem: ProblemKey,
    pub nbar: usize,
    pub algo: Formulation,
    pub ul_stepsize: String,
    pub ll_stepsize: String,
    pub batch: usize,
    pub sigma_grad: f64,
    pub sigma_hess: f64,
    pub final_mean: f64,
    pub final_half_width: f64,
    /// Final risk-neutral value along risk-averse runs.
    pub final_mean_rn: f64,
    pub completed: usize,
    pub failed: usize,
}

/// Stationarity of a deterministic run's final iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityRow {
    pub run: String,
    /// `|P(v + d) - v|_inf` with the exact direction.
    pub projected_step: f64,
    /// Largest one-sided descent rate over the probed feasible directions.
    pub fd_descent: f64,
    pub measure: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceRow {
    pub problem: ProblemKey,
    pub other: Formulation,
    pub dominated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub options: SuiteOptions,
    pub rows: Vec<SummaryRow>,
    pub stationarity: Vec<StationarityRow>,
    pub dominance: Vec<DominanceRow>,
    /// Grid search: best `(ul, ll)` row per algorithm.
    pub best: Vec<SummaryRow>,
}

impl SuiteReport {
    pub fn row(&self, run: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.run == run)
    }

    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.failed > 0)
    }
}

fn summary_row(name: &str, r: &ExperimentResult) -> SummaryRow {
    let c = &r.config;
    SummaryRow {
        run: name.to_string(),
        problem: c.problem,
        nbar: c.nbar,
        algo: c.algo,
        ul_stepsize: fmt_step(&c.ul_stepsize),
        ll_stepsize: fmt_step(&c.ll_stepsize),
        batch: c.batch_size(),
        sigma_grad: c.sigma_grad,
        sigma_hess: c.sigma_hess,
        final_mean: r.aggregate.final_mean(),
        final_half_width: r.aggregate.final_half_width(),
        final_mean_rn: r.aggregate_rn.as_ref().map_or(f64::NAN, |a| a.final_mean()),
        completed: r.completed().count(),
        failed: r.failures().count(),
    }
}

/// Largest one-sided descent rate `max(0, -(f(P(v + h u)) - f(v)) / |P(v + h u) - v|)`
/// over `dirs`; directions the projection blocks are skipped.
pub fn fd_descent<F, P>(mut f: F, v: &Vector, dirs: &[Vector], project: P, h: f64) -> Result<f64>
where
    F: FnMut(&Vector) -> Result<f64>,
    P: Fn(&Vector) -> Vector,
{
    let f0 = f(v)?;
    let mut worst = 0.0_f64;
    for u in dirs {
        let n = u.norm();
        if n == 0.0 {
            continue;
        }
        let trial = project(&(v + u * (h / n)));
        let s = (&trial - v).norm();
        if s < 0.5 * h {
            continue;
        }
        worst = worst.max(-(f(&trial)? - f0) / s);
    }
    Ok(worst)
}

fn coordinate_dirs(n: usize, offset: usize, total: usize) -> Vec<Vector> {
    let mut out = Vec::new();
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut u = Vector::zeros(total);
            u[offset + i] = s;
            out.push(u);
        }
    }
    out
}

/// Stationarity of a deterministic run: the projected step with the exact
/// direction, or a finite-difference test over coordinate directions, simplex
/// edges (`opt`) and the final direction, whichever is smaller.
pub fn stationarity(p: &dyn BilevelProblem, cfg: &RunConfig, trial: usize, trace: &RunTrace) -> Result<StationarityRow> {
    let n = p.ul_dim();
    let x = Vector::from_column_slice(&trace.x_final);
    let bounds = p.ul_box().clone();
    let h = 1e-6;
    let fd = match trace.formulation {
        Formulation::Opt => {
            let q = p.num_objectives();
            let l = Vector::from_column_slice(trace.lambda_final.as_deref().unwrap_or_default());
            let mut v = Vector::zeros(n + q);
            v.rows_mut(0, n).copy_from(&x);
            v.rows_mut(n, q).copy_from(&l);
            let mut dirs = coordinate_dirs(n, 0, n + q);
            for i in 0..q {
                for j in 0..q {
                    if i != j {
                        let mut u = Vector::zeros(n + q);
                        u[n + i] = 1.0;
                        u[n + j] = -1.0;
                        dirs.push(u);
                    }
                }
            }
            let project = |w: &Vector| {
                let mut out = w.clone();
                let xs = bounds.project(&w.rows(0, n).into_owned()).unwrap_or_else(|_| w.rows(0, n).into_owned());
                out.rows_mut(0, n).copy_from(&xs);
                if let Ok(s) = project_simplex(&w.rows(n, q).into_owned()) {
                    out.rows_mut(n, q).copy_from(s.as_vector());
                }
                out
            };
            let f = |w: &Vector| {
                true_value_opt(p, &w.rows(0, n).into_owned(), &SimplexWeight::from_vector(w.rows(n, q).into_owned())?)
            };
            fd_descent(f, &v, &dirs, project, h)?
        }
        Formulation::Rn | Formulation::Ra => {
            let mut dirs = coordinate_dirs(n, 0, n);
            dirs.push(Vector::from_column_slice(&trace.final_direction));
            let project = |w: &Vector| bounds.project(w).unwrap_or_else(|_| w.clone());
            if trace.formulation == Formulation::Rn {
                let grid = cfg.driver_config(trial).weight_grid(p.num_objectives())?;
                fd_descent(|w| true_value_rn(p, w, &grid), &x, &dirs, project, h)?
            } else {
                let opts = InnerMaxOptions::default();
                fd_descent(|w| true_value_ra(p, w, &opts), &x, &dirs, project, h)?
            }
        }
    };
    Ok(StationarityRow {
        run: String::new(),
        projected_step: trace.final_stationarity,
        fd_descent: fd,
        measure: trace.final_stationarity.min(fd),
    })
}

/// Whether the front at `x_opt` weakly dominates the front at `x_other`.
pub fn front_dominance(p: &dyn BilevelProblem, x_opt: &Vector, x_other: &Vector, m: usize, tol: f64) -> Result<bool> {
    let a = pareto_front(p, x_opt, m)?.values();
    let b = pareto_front(p, x_other, m)?.values();
    Ok(front_weakly_dominates(&a, &b, tol))
}

/// Tolerance of the front-dominance comparison.
pub const FRONT_TOL: f64 = 1e-6;

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every planned experiment, writes per-run artifacts and a suite summary.
pub fn run_suite(suite: Suite, out: &Path, opts: &SuiteOptions) -> Result<SuiteReport> {
    fs::create_dir_all(out)?;
    let runs = plan(suite, out, opts);
    let mut results: Vec<(String, ExperimentResult)> = Vec::new();
    for run in &runs {
        log::info!("{suite}: {}", run.name);
        results.push((run.name.clone(), run_experiment(&run.config)?));
    }
    let rows: Vec<SummaryRow> = results.iter().map(|(n, r)| summary_row(n, r)).collect();

    let mut stationarity_rows = Vec::new();
    let mut dominance = Vec::new();
    if matches!(suite, Suite::DetSep | Suite::DetNonsep) {
        for (name, r) in &results {
            let p = r.config.build_problem()?;
            if let Some((t, trace)) = r.completed().next() {
                let mut row = stationarity(&p, &r.config, t.trial, trace)?;
                row.run = name.clone();
                stationarity_rows.push(row);
            }
        }
        let keys: Vec<ProblemKey> = if suite == Suite::DetSep {
            SEPARABLE.to_vec()
        } else {
            vec![ProblemKey::Gkv1Nonsep]
        };
        for key in keys {
            let final_x = |algo: Formulation| -> Option<(Vector, RunConfig)> {
                results
                    .iter()
                    .find(|(_, r)| r.config.problem == key && r.config.algo == algo)
                    .and_then(|(_, r)| {
                        r.completed()
                            .next()
                            .map(|(_, t)| (Vector::from_column_slice(&t.x_final), r.config.clone()))
                    })
            };
            let Some((x_opt, cfg)) = final_x(Formulation::Opt) else { continue };
            let p = cfg.build_problem()?;
            for other in [Formulation::Rn, Formulation::Ra] {
                if let Some((x_other, _)) = final_x(other) {
                    dominance.push(DominanceRow {
                        problem: key,
                        other,
                        dominated: front_dominance(&p, &x_opt, &x_other, cfg.front_points, FRONT_TOL)?,
                    });
                }
            }
        }
    }

    let mut best = Vec::new();
    if suite == Suite::GridSearch {
        for algo in Formulation::ALL {
            if let Some(b) = rows
                .iter()
                .filter(|r| r.algo == algo && r.final_mean.is_finite() && r.failed == 0)
                .min_by(|a, b| a.final_mean.total_cmp(&b.final_mean))
            {
                best.push(b.clone());
            }
        }
    }

    let report = SuiteReport {
        suite,
        options: opts.clone(),
        rows,
        stationarity: stationarity_rows,
        dominance,
        best,
    };
    write_csv(&out.join("summary.csv"), &report.rows)?;
    if !report.stationarity.is_empty() {
        write_csv(&out.join("stationarity.csv"), &report.stationarity)?;
    }
    if !report.dominance.is_empty() {
        write_csv(&out.join("dominance.csv"), &report.dominance)?;
    }
    if !report.best.is_empty() {
        write_csv(&out.join("best.csv"), &report.best)?;
    }
    fs::write(out.join("suite.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drivers::{self, pareto_front, Formulation, RunTrace, TraceRecord};
use crate::error::{Error, Result};
use crate::numeric::{SimplexWeight, Vector};
use crate::problems::{BilevelProblem, SyntheticProblem};

use super::config::RunConfig;

/// Normal-approximation 95% quantile.
pub const Z95: f64 = 1.96;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub trace: Option<RunTrace>,
    pub error: Option<String>,
    /// The failure came from the numerics rather than the configuration.
    pub numerical_failure: bool,
}

/// Per-iteration statistics over completed trials.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateTrace {
    pub iters: Vec<usize>,
    pub mean: Vec<f64>,
    /// `1.96 s / sqrt(T)`; zero for a single trial.
    pub half_width: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Trials contributing a value at each iteration.
    pub count: Vec<usize>,
    /// Last recorded value of each completed trial, in trial order.
    pub final_values: Vec<f64>,
}

impl AggregateTrace {
    /// Aggregates `value` over traces; NaN entries (skipped evaluations) are ignored.
    pub fn from_traces(traces: &[&RunTrace], value: impl Fn(&TraceRecord) -> f64) -> Self {
        let len = traces.iter().map(|t| t.records.len()).max().unwrap_or(0);
        let mut agg = AggregateTrace::default();
        for k in 0..len {
            let vals: Vec<f64> = traces
                .iter()
                .filter_map(|t| t.records.get(k))
                .map(&value)
                .filter(|v| !v.is_nan())
                .collect();
            let iter = traces.iter().find_map(|t| t.records.get(k)).map_or(k, |r| r.iter);
            let (mean, hw) = mean_half_width(&vals);
            agg.iters.push(iter);
            agg.mean.push(mean);
            agg.half_width.push(hw);
            agg.min.push(vals.iter().copied().fold(f64::NAN, f64::min));
            agg.max.push(vals.iter().copied().fold(f64::NAN, f64::max));
            agg.count.push(vals.len());
        }
        agg.final_values = traces
            .iter()
            .map(|t| t.records.iter().rev().map(&value).find(|v| !v.is_nan()).unwrap_or(f64::NAN))
            .collect();
        agg
    }

    pub fn final_mean(&self) -> f64 {
        mean_half_width(&self.final_values).0
    }

    pub fn final_half_width(&self) -> f64 {
        mean_half_width(&self.final_values).1
    }
}

/// Sample mean and `1.96 s / sqrt(n)` (NaN mean for an empty slice).
pub fn mean_half_width(vals: &[f64]) -> (f64, f64) {
    let n = vals.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Z95 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    /// Config with every default made explicit.
    pub config: RunConfig,
    pub trials: Vec<TrialOutcome>,
    /// Formulation-native true values.
    pub aggregate: AggregateTrace,
    /// Risk-neutral values along risk-averse runs.
    pub aggregate_rn: Option<AggregateTrace>,
}

impl ExperimentResult {
    pub fn completed(&self) -> impl Iterator<Item = (&TrialOutcome, &RunTrace)> {
        self.trials.iter().filter_map(|t| t.trace.as_ref().map(|tr| (t, tr)))
    }

    pub fn failures(&self) -> impl Iterator<Item = &TrialOutcome> {
        self.trials.iter().filter(|t| t.error.is_some())
    }

    pub fn has_failures(&self) -> bool {
        self.failures().next().is_some()
    }
}

fn with_pool<T: Send>(parallelism: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match parallelism {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs every trial of `cfg` without writing files.
pub fn run_trials(cfg: &RunConfig) -> Result<ExperimentResult> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let problem = cfg.build_problem()?;
    let x0 = if cfg.fix_init {
        let mut base = cfg.driver_config(0);
        base.seed = cfg.base_seed;
        Some(base.initial_x(&problem)?.as_slice().to_vec())
    } else {
        None
    };

    let trials: Vec<TrialOutcome> = with_pool(cfg.parallelism, || {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                let mut dc = cfg.driver_config(t);
                dc.x0 = x0.clone();
                match drivers::run(&problem, cfg.algo, &dc) {
                    Ok(trace) => TrialOutcome {
                        trial: t,
                        seed: dc.seed,
                        trace: Some(trace),
                        error: None,
                        numerical_failure: false,
                    },
                    Err(e) => {
                        log::warn!("trial {t} failed: {e}");
                        TrialOutcome {
                            trial: t,
                            seed: dc.seed,
                            trace: None,
                            numerical_failure: !e.is_config_error(),
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    })?;

    let traces: Vec<&RunTrace> = trials.iter().filter_map(|t| t.trace.as_ref()).collect();
    let aggregate = AggregateTrace::from_traces(&traces, |r| r.f_true);
    let aggregate_rn = (cfg.algo == Formulation::Ra).then(|| AggregateTrace::from_traces(&traces, |r| r.f_rn));
    Ok(ExperimentResult {
        config: cfg,
        trials,
        aggregate,
        aggregate_rn,
    })
}

/// Runs every trial and writes the artifact set under `cfg.out`.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentResult> {
    let result = run_trials(cfg)?;
    write_outputs(&result, &result.config.out)?;
    Ok(result)
}

#[derive(Serialize)]
struct TraceRow {
    iter: usize,
    time_s: f64,
    f_true: f64,
    trial: usize,
}

#[derive(Serialize)]
struct DetailRow {
    iter: usize,
    f_rn: f64,
    stepsize: f64,
    ll_iters: usize,
    dir_norm: f64,
    flagged: bool,
}

#[derive(Serialize)]
struct AggregateRow {
    iter: usize,
    mean: f64,
    half_width: f64,
    min: f64,
    max: f64,
    trials: usize,
}

#[derive(Serialize)]
struct FrontRow {
    lambda1: f64,
    f1: f64,
    f2: f64,
}

#[derive(Serialize)]
struct MarkRow {
    kind: &'static str,
    lambda1: f64,
    f1: f64,
    f2: f64,
}

#[derive(Serialize)]
struct Failure<'a> {
    trial: usize,
    seed: u64,
    error: &'a str,
}

#[derive(Serialize)]
struct TrialSummary<'a> {
    trial: usize,
    seed: u64,
    final_value: f64,
    final_stationarity: f64,
    flagged_steps: usize,
    x_final: &'a [f64],
    lambda_final: &'a Option<Vec<f64>>,
    inner_lambda_final: &'a Option<Vec<f64>>,
    inner_licq_sigma_min: Option<f64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    trial_seeds: Vec<u64>,
    completed: Vec<TrialSummary<'a>>,
    failures: Vec<Failure<'a>>,
    final_mean: f64,
    final_half_width: f64,
    files: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn trace_file(trial: usize) -> String {
    format!("trace_trial{trial}.csv")
}

pub fn details_file(trial: usize) -> String {
    format!("details_trial{trial}.csv")
}

pub fn front_file(trial: usize) -> String {
    format!("front_trial{trial}.csv")
}

pub fn marks_file(trial: usize) -> String {
    format!("marks_trial{trial}.csv")
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_aggregate(path: &Path, agg: &AggregateTrace) -> Result<()> {
    write_rows(
        path,
        (0..agg.iters.len()).map(|k| AggregateRow {
            iter: agg.iters[k],
            mean: agg.mean[k],
            half_width: agg.half_width[k],
            min: agg.min[k],
            max: agg.max[k],
            trials: agg.count[k],
        }),
    )
}

/// Front sweep at the final iterate, and the marked optimistic or pessimistic point.
fn write_front(p: &SyntheticProblem, trace: &RunTrace, m: usize, front: &Path, marks: &Path) -> Result<()> {
    let x = Vector::from_column_slice(&trace.x_final);
    let mut sample = pareto_front(p, &x, m)?;
    for (t, e) in &sample.skipped {
        log::warn!("front sweep skipped lambda1 = {t}: {e}");
    }
    match trace.formulation {
        Formulation::Opt => {
            if let Some(l) = &trace.lambda_final {
                sample.mark_optimistic(p, &x, &SimplexWeight::new(l.clone())?)?;
            }
        }
        Formulation::Ra => {
            if let Some(l) = &trace.inner_lambda_final {
                sample.mark_pessimistic(p, &x, &SimplexWeight::new(l.clone())?)?;
            }
        }
        Formulation::Rn => {}
    }
    write_rows(
        front,
        sample.points.iter().map(|pt| FrontRow {
            lambda1: pt.lambda[0],
            f1: pt.f1,
            f2: pt.f2,
        }),
    )?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(marks)?;
    w.write_record(["kind", "lambda1", "f1", "f2"])?;
    for (kind, pt) in [("optimistic", &sample.optimistic), ("pessimistic", &sample.pessimistic)] {
        if let Some(pt) = pt {
            w.serialize(MarkRow {
                kind,
                lambda1: pt.lambda[0],
                f1: pt.f1,
                f2: pt.f2,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes per-trial traces, aggregates, fronts (two-objective problems) and the manifest.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let cfg = &result.config;
    let problem = cfg.build_problem()?;
    let mut files: Vec<String> = Vec::new();

    for (t, trace) in result.completed() {
        let name = trace_file(t.trial);
        write_rows(
            &dir.join(&name),
            trace.records.iter().map(|r| TraceRow {
                iter: r.iter,
                time_s: r.time_s,
                f_true: r.f_true,
                trial: t.trial,
            }),
        )?;
        files.push(name);
        let name = details_file(t.trial);
        write_rows(
            &dir.join(&name),
            trace.records.iter().map(|r| DetailRow {
                iter: r.iter,
                f_rn: r.f_rn,
                stepsize: r.stepsize,
                ll_iters: r.ll_iters,
                dir_norm: r.dir_norm,
                flagged: r.flagged,
            }),
        )?;
        files.push(name);
        if problem.num_objectives() == 2 {
            let (f, m) = (front_file(t.trial), marks_file(t.trial));
            write_front(&problem, trace, cfg.front_points, &dir.join(&f), &dir.join(&m))?;
            files.push(f);
            files.push(m);
        }
    }

    write_aggregate(&dir.join("aggregate.csv"), &result.aggregate)?;
    files.push("aggregate.csv".into());
    if let Some(rn) = &result.aggregate_rn {
        write_aggregate(&dir.join("aggregate_rn.csv"), rn)?;
        files.push("aggregate_rn.csv".into());
    }

    let manifest = Manifest {
        tool: "bmoll",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        trial_seeds: cfg.trial_seeds(),
        completed: result
            .completed()
            .map(|(t, tr)| TrialSummary {
                trial: t.trial,
                seed: t.seed,
                final_value: tr.final_value(),
                final_stationarity: tr.final_stationarity,
                flagged_steps: tr.flagged_steps(),
                x_final: &tr.x_final,
                lambda_final: &tr.lambda_final,
                inner_lambda_final: &tr.inner_lambda_final,
                inner_licq_sigma_min: tr.inner_licq_sigma_min,
            })
            .collect(),
        failures: result
            .failures()
            .map(|t| Failure {
                trial: t.trial,
                seed: t.seed,
                error: t.error.as_deref().unwrap_or(""),
            })
            .collect(),
        final_mean: result.aggregate.final_mean(),
        final_half_width: result.aggregate.final_half_width(),
        files: files.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    files.push(MANIFEST_FILE.into());
    Ok(files.into_iter().map(|f| dir.join(f)).collect())
}

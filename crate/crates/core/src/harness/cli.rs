use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::drivers::{pareto_front, Formulation, StepsizeRule};
use crate::error::{Error, Result};
use crate::numeric::{SimplexWeight, Vector};
use crate::problems::{BilevelProblem, ProblemKey};
use crate::riskaverse::solve_inner_max;

use super::config::{seed_from_env, RunConfig};
use super::experiment::run_experiment;
use super::suites::{run_suite, Suite, SuiteOptions};
use super::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "bmoll", version, about = "Bilevel optimization with a multi-objective lower level")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one configuration over several trials.
    Run(RunArgs),
    /// Run a named experiment suite.
    Suite(SuiteArgs),
    /// Sweep the lower-level Pareto front at a fixed upper-level point.
    Pareto(ParetoArgs),
    /// Run the finite-difference and closed-form oracle checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON config or a previous run's manifest; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<ProblemKey>,
    #[arg(long)]
    nbar: Option<usize>,
    #[arg(long)]
    problem_seed: Option<u64>,
    /// opt, rn or ra.
    #[arg(long)]
    algo: Option<Formulation>,
    /// `armijo` or a fixed stepsize.
    #[arg(long)]
    ul_step: Option<StepsizeRule>,
    #[arg(long)]
    ll_step: Option<StepsizeRule>,
    #[arg(long)]
    ll_max_iters: Option<usize>,
    /// Risk-neutral grid size.
    #[arg(long = "N")]
    n_grid: Option<usize>,
    /// Mini-batch size.
    #[arg(long = "Q")]
    batch: Option<usize>,
    #[arg(long)]
    sigma_grad: Option<f64>,
    #[arg(long)]
    sigma_hess: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Base seed; trial t uses seed + t. Falls back to BMOLL_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Same initial point in every trial.
    #[arg(long)]
    fix_init: bool,
    /// Solve each inner maximization from scratch.
    #[arg(long)]
    cold_start: bool,
    /// Extra random starts of the inner maximization.
    #[arg(long)]
    multistart: Option<usize>,
    #[arg(long)]
    front_points: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    /// det-sep, det-nonsep, stoch-nonsep, q-sweep or grid-search.
    name: Suite,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    nbar: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    problem_seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    front_points: Option<usize>,
}

#[derive(Args, Debug)]
struct ParetoArgs {
    #[arg(long)]
    problem: ProblemKey,
    #[arg(long, default_value_t = 1)]
    nbar: usize,
    #[arg(long, default_value_t = 0)]
    problem_seed: u64,
    /// Upper-level point, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Vec<f64>,
    #[arg(long = "M", default_value_t = 200)]
    m: usize,
    /// Weight of an optimistic point to mark, comma separated.
    #[arg(long, value_delimiter = ',')]
    optimistic: Option<Vec<f64>>,
    /// Weight of a pessimistic point to mark, comma separated; without a
    /// value the risk-averse maximizer at `x` is marked.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pessimistic: Option<Vec<f64>>,
    /// Output CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Smaller sample counts.
    #[arg(long)]
    quick: bool,
    #[arg(long)]
    seed: Option<u64>,
}

fn exit_code(e: &Error) -> i32 {
    if e.is_config_error() || matches!(e, Error::Io(_) | Error::Json(_) | Error::Csv(_)) {
        EXIT_CONFIG
    } else {
        EXIT_NUMERICAL
    }
}

/// Parses `argv` (program name first) and runs the subcommand; returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Run(a) => cmd_run(a),
        Command::Suite(a) => cmd_suite(a),
        Command::Pareto(a) => cmd_pareto(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

fn base_seed(flag: Option<u64>, fallback: Option<u64>) -> Result<u64> {
    Ok(match (flag, fallback) {
        (Some(s), _) => s,
        (None, Some(s)) => s,
        (None, None) => seed_from_env()?.unwrap_or(0),
    })
}

fn build_run_config(a: RunArgs) -> Result<RunConfig> {
    let (mut c, file_seed) = match &a.config {
        Some(path) => {
            let c = RunConfig::from_json_file(path)?;
            let s = c.base_seed;
            (c, Some(s))
        }
        None => (RunConfig::default(), None),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = a.$flag { c.$field = v; })*
        };
    }
    set!(problem => problem, nbar => nbar, problem_seed => problem_seed, algo => algo,
         ul_step => ul_stepsize, ll_step => ll_stepsize, ll_max_iters => ll_max_iters,
         n_grid => n_grid, sigma_grad => sigma_grad, sigma_hess => sigma_hess, trials => trials,
         eval_every => eval_every, multistart => multistart, front_points => front_points, out => out);
    if a.batch.is_some() {
        c.batch = a.batch;
    }
    if a.iterations.is_some() {
        c.iterations = a.iterations;
    }
    if a.parallelism.is_some() {
        c.parallelism = a.parallelism;
    }
    c.fix_init |= a.fix_init;
    c.cold_start |= a.cold_start;
    c.base_seed = base_seed(a.seed, file_seed)?;
    c.validate()?;
    Ok(c)
}

fn cmd_run(a: RunArgs) -> Result<i32> {
    let cfg = build_run_config(a)?;
    let r = run_experiment(&cfg)?;
    println!(
        "{} {} nbar={} trials={}: final mean {:.6e} +/- {:.2e} -> {}",
        cfg.algo,
        cfg.problem,
        cfg.nbar,
        cfg.trials,
        r.aggregate.final_mean(),
        r.aggregate.final_half_width(),
        cfg.out.display()
    );
    for t in r.failures() {
        eprintln!("trial {} (seed {}) failed: {}", t.trial, t.seed, t.error.as_deref().unwrap_or(""));
    }
    Ok(if r.has_failures() { EXIT_NUMERICAL } else { EXIT_OK })
}

fn cmd_suite(a: SuiteArgs) -> Result<i32> {
    let defaults = SuiteOptions::default();
    let opts = SuiteOptions {
        nbar: a.nbar,
        iterations: a.iterations,
        trials: a.trials,
        base_seed: base_seed(a.seed, None)?,
        problem_seed: a.problem_seed.unwrap_or(0),
        eval_every: a.eval_every.unwrap_or(1),
        parallelism: a.parallelism,
        front_points: a.front_points.unwrap_or(defaults.front_points),
        ..defaults
    };
    let report = run_suite(a.name, &a.out, &opts)?;
    for r in &report.rows {
        println!(
            "{:<28} final {:>14.6e} +/- {:.2e}{}",
            r.run,
            r.final_mean,
            r.final_half_width,
            if r.failed > 0 { format!("  ({} failed)", r.failed) } else { String::new() }
        );
    }
    for s in &report.stationarity {
        println!("{:<28} stationarity {:.3e}", s.run, s.measure);
    }
    for d in &report.dominance {
        println!("{} optimistic front dominates {}: {}", d.problem, d.other, d.dominated);
    }
    for b in &report.best {
        println!("best {}: ul {} ll {} -> {:.6e}", b.algo, b.ul_stepsize, b.ll_stepsize, b.final_mean);
    }
    Ok(if report.any_failed() { EXIT_NUMERICAL } else { EXIT_OK })
}

fn cmd_pareto(a: ParetoArgs) -> Result<i32> {
    let p = a.problem.build(a.nbar, a.problem_seed)?;
    if a.x.len() != p.ul_dim() {
        return Err(Error::Config(format!("--x needs {} values, got {}", p.ul_dim(), a.x.len())));
    }
    let x = Vector::from_column_slice(&a.x);
    let mut front = pareto_front(&p, &x, a.m)?;
    if let Some(l) = a.optimistic {
        front.mark_optimistic(&p, &x, &SimplexWeight::new(l)?)?;
    }
    match a.pessimistic {
        Some(l) if l.is_empty() => {
            let inner = solve_inner_max(&p, &x, None)?;
            front.mark_pessimistic(&p, &x, &inner.lambda)?;
        }
        Some(l) => front.mark_pessimistic(&p, &x, &SimplexWeight::new(l)?)?,
        None => {}
    }
    let sink: Box<dyn Write> = match &a.out {
        Some(path) => Box::new(std::fs::File::create(path)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["lambda1", "f1", "f2", "kind"])?;
    let marks = [("optimistic", &front.optimistic), ("pessimistic", &front.pessimistic)];
    let rows = front
        .points
        .iter()
        .map(|pt| ("front", pt))
        .chain(marks.iter().filter_map(|(k, pt)| pt.as_ref().map(|pt| (*k, pt))));
    for (kind, pt) in rows {
        w.write_record(&[pt.lambda[0].to_string(), pt.f1.to_string(), pt.f2.to_string(), kind.to_string()])?;
    }
    w.flush()?;
    for (t, e) in &front.skipped {
        eprintln!("skipped lambda1 = {t}: {e}");
    }
    Ok(EXIT_OK)
}

fn cmd_verify(a: VerifyArgs) -> Result<i32> {
    let seed = base_seed(a.seed, None)?;
    let checks = verify::run_all(a.quick, seed)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_NUMERICAL })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        std::iter::once("bmoll".to_string())
            .chain(s.split_whitespace().map(String::from))
            .collect()
    }

    #[test]
    fn unknown_flag_is_config_error() {
        assert_eq!(cli_main(args("run --bogus 3")), EXIT_CONFIG);
        assert_eq!(cli_main(args("frobnicate")), EXIT_CONFIG);
        assert_eq!(cli_main(args("run --algo pessimistic")), EXIT_CONFIG);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(cli_main(args("--help")), EXIT_OK);
    }

    #[test]
    fn run_flags_override() {
        let cli = Cli::try_parse_from(args(
            "run --problem gkv1-nonsep --algo rn --Q 20 --N 500 --trials 10 --seed 7 --ul-step 0.1 --out o",
        ))
        .unwrap();
        let Command::Run(a) = cli.command else { panic!() };
        let c = build_run_config(a).unwrap();
        assert_eq!(c.problem, ProblemKey::Gkv1Nonsep);
        assert_eq!(c.algo, Formulation::Rn);
        assert_eq!((c.n_grid, c.batch, c.trials, c.base_seed), (500, Some(20), 10, 7));
        assert_eq!(c.ul_stepsize, StepsizeRule::fixed(0.1));
        assert!(c.ll_stepsize.is_armijo());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let cli = Cli::try_parse_from(args("run --trials 0")).unwrap();
        let Command::Run(a) = cli.command else { panic!() };
        assert!(build_run_config(a).unwrap_err().is_config_error());
    }

    #[test]
    fn pareto_rejects_wrong_dimension() {
        assert_eq!(cli_main(args("pareto --problem jos1 --nbar 2 --x 1.0")), EXIT_CONFIG);
    }
}

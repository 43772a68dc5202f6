use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::drivers::{DriverConfig, Formulation, StepsizeRule};
use crate::error::{Error, Result};
use crate::noise::NoiseLevel;
use crate::problems::{ProblemKey, SyntheticProblem};
use crate::riskaverse::InnerMaxOptions;

/// Environment variable consulted for the base seed when none is given.
pub const SEED_ENV: &str = "BMOLL_SEED";

/// One experiment: a problem instance, an algorithm and a trial count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemKey,
    pub nbar: usize,
    /// Seed of the random instance data (`gkv1-nonsep` only); shared by all trials.
    pub problem_seed: u64,
    pub algo: Formulation,
    pub ul_stepsize: StepsizeRule,
    pub ll_stepsize: StepsizeRule,
    pub ll_max_iters: usize,
    /// Risk-neutral grid size `N`.
    pub n_grid: usize,
    /// Mini-batch size `Q`; `None` means `N` for `nbar == 1` and 20 otherwise.
    pub batch: Option<usize>,
    pub sigma_grad: f64,
    pub sigma_hess: f64,
    pub trials: usize,
    pub base_seed: u64,
    /// `None` means 200 for `nbar == 1` and 500 otherwise.
    pub iterations: Option<usize>,
    pub eval_every: usize,
    /// Use the same initial point (drawn from `base_seed`) in every trial.
    pub fix_init: bool,
    pub cold_start: bool,
    pub multistart: usize,
    /// Weights in each front sweep written at the final iterates.
    pub front_points: usize,
    /// Worker threads; `None` uses all logical cores.
    pub parallelism: Option<usize>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemKey::Jos1,
            nbar: 1,
            problem_seed: 0,
            algo: Formulation::Opt,
            ul_stepsize: StepsizeRule::armijo(),
            ll_stepsize: StepsizeRule::armijo(),
            ll_max_iters: 30,
            n_grid: 500,
            batch: None,
            sigma_grad: 0.0,
            sigma_hess: 0.0,
            trials: 1,
            base_seed: 0,
            iterations: None,
            eval_every: 1,
            fix_init: false,
            cold_start: false,
            multistart: 0,
            front_points: 200,
            parallelism: None,
            out: PathBuf::from("results"),
        }
    }
}

impl RunConfig {
    /// Copy with every defaulted field made explicit.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.batch = Some(self.batch_size());
        c.iterations = Some(self.iteration_budget());
        c
    }

    pub fn batch_size(&self) -> usize {
        self.batch.unwrap_or(if self.nbar == 1 { self.n_grid } else { 20 })
    }

    pub fn iteration_budget(&self) -> usize {
        self.iterations.unwrap_or(if self.nbar == 1 { 200 } else { 500 })
    }

    pub fn noise(&self) -> Result<NoiseLevel> {
        NoiseLevel::new(self.sigma_grad, self.sigma_hess).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.base_seed.wrapping_add(trial as u64)
    }

    pub fn trial_seeds(&self) -> Vec<u64> {
        (0..self.trials).map(|t| self.trial_seed(t)).collect()
    }

    pub fn build_problem(&self) -> Result<SyntheticProblem> {
        self.problem.build(self.nbar, self.problem_seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.nbar == 0 {
            return bad("nbar must be at least 1".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.n_grid == 0 || self.batch_size() == 0 {
            return bad("N and Q must be at least 1".into());
        }
        if self.front_points < 2 {
            return bad("front_points must be at least 2".into());
        }
        if self.parallelism == Some(0) {
            return bad("parallelism must be at least 1".into());
        }
        self.noise()?;
        self.driver_config(0)
            .validate()
            .map_err(|e| if e.is_config_error() { Error::Config(e.to_string()) } else { e })
    }

    /// Driver settings of trial `trial`.
    pub fn driver_config(&self, trial: usize) -> DriverConfig {
        let seed = self.trial_seed(trial);
        DriverConfig {
            iterations: self.iteration_budget(),
            ul_stepsize: self.ul_stepsize,
            ll_stepsize: self.ll_stepsize,
            ll_max_iters: self.ll_max_iters,
            ll_threshold: None,
            noise: NoiseLevel {
                sigma_grad: self.sigma_grad,
                sigma_hess: self.sigma_hess,
            },
            n_grid: self.n_grid,
            batch: self.batch_size(),
            eval_every: self.eval_every,
            ra_record_rn: true,
            cold_start: self.cold_start,
            inner: InnerMaxOptions {
                multistart: self.multistart,
                seed,
                ..Default::default()
            },
            seed,
            x0: None,
        }
    }

    /// Reads a config file; a run manifest is accepted too (its `config` entry is used).
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let inner = match value.get("config") {
            Some(c) if value.get("trial_seeds").is_some() => c.clone(),
            _ => value,
        };
        serde_json::from_value(inner).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Seed from `BMOLL_SEED`, if set. A malformed value is a config error.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be a non-negative integer, got '{s}'"))),
        Err(_) => Ok(None),
    }
}

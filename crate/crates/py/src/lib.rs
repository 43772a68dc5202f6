//! Python bindings for `bmoll_core`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use bmoll_core::drivers::{self, DriverConfig, Formulation, StepsizeRule};
use bmoll_core::harness::{self, RunConfig};
use bmoll_core::noise::{NoiseLevel, NoiseSpec};
use bmoll_core::numeric::{project_simplex as project_simplex_core, SimplexWeight, Vector, WeightGrid};
use bmoll_core::problems::{BilevelProblem, ProblemKey, SyntheticProblem};
use bmoll_core::riskaverse::{ra_subgradient as ra_subgradient_core, solve_inner_max_with, InnerMaxOptions};
use bmoll_core::Error;

fn to_py(e: Error) -> PyErr {
    if e.is_config_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn vec(xs: Vec<f64>) -> Vector {
    Vector::from_vec(xs)
}

fn weight(xs: Vec<f64>) -> PyResult<SimplexWeight> {
    SimplexWeight::new(xs).map_err(to_py)
}

/// A shipped test instance: `jos1`, `sp1`, `gkv1-sep` or `gkv1-nonsep`.
#[pyclass(name = "Problem", frozen)]
struct PyProblem {
    key: ProblemKey,
    inner: SyntheticProblem,
}

#[pymethods]
impl PyProblem {
    #[new]
    #[pyo3(signature = (key, nbar = 1, problem_seed = 0))]
    fn new(key: &str, nbar: usize, problem_seed: u64) -> PyResult<Self> {
        let key: ProblemKey = key.parse().map_err(to_py)?;
        let inner = key.build(nbar, problem_seed).map_err(to_py)?;
        Ok(Self { key, inner })
    }

    #[getter]
    fn key(&self) -> &'static str {
        self.key.as_str()
    }

    #[getter]
    fn ul_dim(&self) -> usize {
        self.inner.ul_dim()
    }

    #[getter]
    fn ll_dim(&self) -> usize {
        self.inner.ll_dim()
    }

    #[getter]
    fn num_objectives(&self) -> usize {
        self.inner.num_objectives()
    }

    /// Lower and upper bounds of the upper-level box.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let b = self.inner.ul_box();
        (b.lower().to_vec(), b.upper().to_vec())
    }

    fn ul_value(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        let (x, y) = (vec(x), vec(y));
        bmoll_core::problems::check_point(&self.inner, &x, &y).map_err(to_py)?;
        Ok(self.inner.ul_value(&x, &y))
    }

    /// Values of every lower-level objective at `(x, y)`.
    fn ll_values(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<f64>> {
        let (x, y) = (vec(x), vec(y));
        bmoll_core::problems::check_point(&self.inner, &x, &y).map_err(to_py)?;
        Ok((0..self.inner.num_objectives()).map(|j| self.inner.ll_value(j, &x, &y)).collect())
    }

    /// Exact minimizer of `lambda' F(x, .)`.
    fn ll_solution(&self, x: Vec<f64>, lam: Vec<f64>) -> PyResult<Vec<f64>> {
        let y = drivers::evaluate::ll_solution(&self.inner, &vec(x), &weight(lam)?).map_err(to_py)?;
        Ok(y.as_slice().to_vec())
    }

    /// Closed-form lower-level solution, when the instance has one.
    fn closed_form(&self, x: Vec<f64>, lam: Vec<f64>) -> PyResult<Option<Vec<f64>>> {
        Ok(self
            .inner
            .closed_form_ll_solution(&vec(x), &weight(lam)?)
            .map(|y| y.as_slice().to_vec()))
    }

    fn f_opt(&self, x: Vec<f64>, lam: Vec<f64>) -> PyResult<f64> {
        drivers::true_value_opt(&self.inner, &vec(x), &weight(lam)?).map_err(to_py)
    }

    /// Risk-neutral value over the given weights.
    fn f_rn(&self, x: Vec<f64>, weights: Vec<Vec<f64>>) -> PyResult<f64> {
        let grid = WeightGrid::new(weights.into_iter().map(weight).collect::<PyResult<_>>()?).map_err(to_py)?;
        drivers::true_value_rn(&self.inner, &vec(x), &grid).map_err(to_py)
    }

    fn f_ra(&self, x: Vec<f64>) -> PyResult<f64> {
        drivers::true_value_ra(&self.inner, &vec(x), &InnerMaxOptions::default()).map_err(to_py)
    }

    /// Exact gradient of `f_OPT` as `(grad_x, grad_lambda)`.
    fn gradient_opt(&self, x: Vec<f64>, lam: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (gx, gl) = drivers::exact_gradient_opt(&self.inner, &vec(x), &weight(lam)?).map_err(to_py)?;
        Ok((gx.as_slice().to_vec(), gl.as_slice().to_vec()))
    }

    /// Inner maximization at `x`: `(lambda, y, f_u, kkt_residual)`.
    fn inner_max(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>, f64, f64)> {
        let s = solve_inner_max_with(&self.inner, &vec(x), None, &InnerMaxOptions::default()).map_err(to_py)?;
        Ok((s.lambda.as_slice().to_vec(), s.y.as_slice().to_vec(), s.f_u_value, s.kkt_residual))
    }

    /// Negative risk-averse subgradient at `x` (noiseless).
    fn ra_direction(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let (d, _) = ra_subgradient_core(&self.inner, &vec(x), &mut NoiseSpec::none(), None, &InnerMaxOptions::default())
            .map_err(to_py)?;
        Ok(d.as_slice().to_vec())
    }

    /// Front sweep `[(lambda1, f1, f2)]` over `m` equispaced weights.
    #[pyo3(signature = (x, m = 200))]
    fn pareto_front(&self, x: Vec<f64>, m: usize) -> PyResult<Vec<(f64, f64, f64)>> {
        let front = drivers::pareto_front(&self.inner, &vec(x), m).map_err(to_py)?;
        Ok(front.points.iter().map(|p| (p.lambda[0], p.f1, p.f2)).collect())
    }

    /// Runs one trial; returns `(true values per iteration, x_final)`.
    #[pyo3(signature = (algo, iterations = 200, ul_step = "armijo", ll_step = "armijo",
                        sigma_grad = 0.0, sigma_hess = 0.0, n_grid = 500, batch = 20, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        py: Python<'_>,
        algo: &str,
        iterations: usize,
        ul_step: &str,
        ll_step: &str,
        sigma_grad: f64,
        sigma_hess: f64,
        n_grid: usize,
        batch: usize,
        seed: u64,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let algo: Formulation = algo.parse().map_err(to_py)?;
        let cfg = DriverConfig {
            iterations,
            ul_stepsize: ul_step.parse::<StepsizeRule>().map_err(to_py)?,
            ll_stepsize: ll_step.parse::<StepsizeRule>().map_err(to_py)?,
            noise: NoiseLevel::new(sigma_grad, sigma_hess).map_err(to_py)?,
            n_grid,
            batch,
            seed,
            ..Default::default()
        };
        let trace = py.detach(|| drivers::run(&self.inner, algo, &cfg)).map_err(to_py)?;
        Ok((trace.values(), trace.x_final))
    }

    fn __repr__(&self) -> String {
        format!("Problem('{}', nbar={})", self.key, self.inner.nbar())
    }
}

/// Euclidean projection onto the probability simplex.
#[pyfunction]
fn project_simplex(v: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(project_simplex_core(&vec(v)).map_err(to_py)?.as_slice().to_vec())
}

/// Runs a JSON experiment config, writing its artifacts; returns the final
/// mean and 95% half-width.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<(f64, f64)> {
    let cfg: RunConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let r = py.detach(|| harness::run_experiment(&cfg)).map_err(to_py)?;
    Ok((r.aggregate.final_mean(), r.aggregate.final_half_width()))
}

#[pymodule]
pub fn bmoll(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_function(wrap_pyfunction!(project_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

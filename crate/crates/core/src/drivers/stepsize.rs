use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Vector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmijoParams {
    pub initial: f64,
    pub contraction: f64,
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoParams {
    fn default() -> Self {
        Self {
            initial: 1.0,
            contraction: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 30,
        }
    }
}

impl ArmijoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(Error::InvalidArgument(format!("Armijo initial step must be positive, got {}", self.initial)));
        }
        if !(self.contraction > 0.0 && self.contraction < 1.0) {
            return Err(Error::InvalidArgument(format!("Armijo contraction must lie in (0,1), got {}", self.contraction)));
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "Armijo sufficient-decrease constant must lie in (0,1), got {}",
                self.sufficient_decrease
            )));
        }
        Ok(())
    }

    /// `initial * contraction^max_backtracks`.
    pub fn smallest_trial(&self) -> f64 {
        self.initial * self.contraction.powi(self.max_backtracks as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StepsizeRule {
    Fixed { value: f64 },
    Armijo(ArmijoParams),
}

impl StepsizeRule {
    pub fn fixed(value: f64) -> Self {
        StepsizeRule::Fixed { value }
    }

    pub fn armijo() -> Self {
        StepsizeRule::Armijo(ArmijoParams::default())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StepsizeRule::Fixed { value } if !(*value > 0.0 && value.is_finite()) => {
                Err(Error::InvalidArgument(format!("fixed stepsize must be positive, got {value}")))
            }
            StepsizeRule::Fixed { .. } => Ok(()),
            StepsizeRule::Armijo(p) => p.validate(),
        }
    }

    pub fn is_armijo(&self) -> bool {
        matches!(self, StepsizeRule::Armijo(_))
    }
}

impl std::fmt::Display for StepsizeRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepsizeRule::Fixed { value } => write!(f, "{value}"),
            StepsizeRule::Armijo(_) => f.write_str("armijo"),
        }
    }
}

impl std::str::FromStr for StepsizeRule {
    type Err = Error;

    /// `armijo` or a positive number for a fixed step.
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("armijo") || s.eq_ignore_ascii_case("ls") {
            return Ok(StepsizeRule::armijo());
        }
        let value: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("stepsize must be 'armijo' or a number, got '{s}'")))?;
        let rule = StepsizeRule::fixed(value);
        rule.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(rule)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineSearchOutcome {
    pub step: f64,
    pub point: Vector,
    pub value: f64,
    /// No trial met the sufficient-decrease test, or the direction was degenerate.
    pub flagged: bool,
}

/// Backtracking search along `direction` without constraints: the largest
/// `initial * contraction^k` with `f(x + a d) <= f(x) - c a |d|^2`.
pub fn armijo_search<F>(f: F, point: &Vector, direction: &Vector, params: &ArmijoParams) -> Result<LineSearchOutcome>
where
    F: FnMut(&Vector) -> Result<f64>,
{
    projected_armijo_search(f, point, None, direction, params, |v| v.clone())
}

/// Backtracking along the projection arc `x(a) = P(x + a d)`, accepting
/// `f(x(a)) <= f(x) - c |x(a) - x|^2 / a`. With the identity projection this
/// is the plain Armijo test. `f_point` may pass a cached `f(x)`.
///
/// Non-finite trial values count as rejected trials; a non-finite `f(x)` is
/// an error. When no trial qualifies, the smallest one is returned flagged.
pub fn projected_armijo_search<F, P>(
    mut f: F,
    point: &Vector,
    f_point: Option<f64>,
    direction: &Vector,
    params: &ArmijoParams,
    project: P,
) -> Result<LineSearchOutcome>
where
    F: FnMut(&Vector) -> Result<f64>,
    P: Fn(&Vector) -> Vector,
{
    params.validate()?;
    let f0 = match f_point {
        Some(v) => v,
        None => f(point)?,
    };
    if !f0.is_finite() {
        return Err(Error::NonFinite("line search start value".into()));
    }
    if direction.iter().all(|&d| d == 0.0) {
        return Ok(LineSearchOutcome {
            step: params.initial,
            point: point.clone(),
            value: f0,
            flagged: true,
        });
    }

    let mut step = params.initial;
    let mut last = None;
    for k in 0..=params.max_backtracks {
        if k > 0 {
            step *= params.contraction;
        }
        let trial = project(&(point + direction * step));
        let moved = (&trial - point).norm_squared();
        if moved == 0.0 {
            // the whole arc is clamped onto the current point
            return Ok(LineSearchOutcome {
                step,
                point: trial,
                value: f0,
                flagged: true,
            });
        }
        let value = f(&trial)?;
        if value.is_finite() && value <= f0 - params.sufficient_decrease * moved / step {
            return Ok(LineSearchOutcome {
                step,
                point: trial,
                value,
                flagged: false,
            });
        }
        last = Some((trial, value));
    }
    let (trial, value) = last.expect("at least one trial");
    Ok(LineSearchOutcome {
        step,
        point: trial,
        value,
        flagged: true,
    })
}

//! Gaussian-perturbed oracle estimates.
//!
//! Every call draws fresh noise. With both magnitudes at zero the layer
//! returns the deterministic oracle outputs bit for bit and consumes no
//! random numbers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{asymmetry, Matrix, RngStream, Vector};
use crate::problems::BilevelProblem;

/// Eigenvalue floor applied to Hessian estimates that must stay positive definite.
pub const PD_FLOOR: f64 = 1e-6;

/// Noise standard deviations, without the random stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub sigma_grad: f64,
    pub sigma_hess: f64,
}

impl NoiseLevel {
    pub const ZERO: NoiseLevel = NoiseLevel {
        sigma_grad: 0.0,
        sigma_hess: 0.0,
    };

    pub fn new(sigma_grad: f64, sigma_hess: f64) -> Result<Self> {
        for (name, s) in [("sigma_grad", sigma_grad), ("sigma_hess", sigma_hess)] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {s}")));
            }
        }
        Ok(Self { sigma_grad, sigma_hess })
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_grad == 0.0 && self.sigma_hess == 0.0
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSpec {
    level: NoiseLevel,
    rng: RngStream,
}

impl NoiseSpec {
    pub fn new(sigma_grad: f64, sigma_hess: f64, rng: RngStream) -> Result<Self> {
        Ok(Self {
            level: NoiseLevel::new(sigma_grad, sigma_hess)?,
            rng,
        })
    }

    pub fn from_level(level: NoiseLevel, rng: RngStream) -> Self {
        Self { level, rng }
    }

    /// Zero-magnitude noise; every estimate equals the exact oracle.
    pub fn none() -> Self {
        Self {
            level: NoiseLevel::ZERO,
            rng: RngStream::new(0, 0),
        }
    }

    pub fn level(&self) -> NoiseLevel {
        self.level
    }

    pub fn sigma_grad(&self) -> f64 {
        self.level.sigma_grad
    }

    pub fn sigma_hess(&self) -> f64 {
        self.level.sigma_hess
    }

    pub fn is_deterministic(&self) -> bool {
        self.level.is_zero()
    }

    pub fn rng_mut(&mut self) -> &mut RngStream {
        &mut self.rng
    }

    pub fn ul_grad_x(&mut self, p: &dyn BilevelProblem, x: &Vector, y: &Vector) -> Vector {
        perturb_gradient(p.ul_grad_x(x, y), self)
    }

    pub fn ul_grad_y(&mut self, p: &dyn BilevelProblem, x: &Vector, y: &Vector) -> Vector {
        perturb_gradient(p.ul_grad_y(x, y), self)
    }

    pub fn ll_grad_y(&mut self, p: &dyn BilevelProblem, j: usize, x: &Vector, y: &Vector) -> Vector {
        perturb_gradient(p.ll_grad_y(j, x, y), self)
    }

    pub fn ll_hess_xy(&mut self, p: &dyn BilevelProblem, j: usize, x: &Vector, y: &Vector) -> Matrix {
        perturb_matrix(p.ll_hess_xy(j, x, y), self)
    }

    /// Noisy `hess_yy f^j`. The positive-definite repair is only applied
    /// when noise is actually injected, so singular exact Hessians still
    /// surface as factorization failures downstream.
    pub fn ll_hess_yy(&mut self, p: &dyn BilevelProblem, j: usize, x: &Vector, y: &Vector) -> Result<Matrix> {
        let require_pd = self.level.sigma_hess > 0.0;
        perturb_hessian(p.ll_hess_yy(j, x, y), self, require_pd)
    }
}

/// `g + eps`, `eps ~ N(0, sigma_grad^2 I)`.
pub fn perturb_gradient(g: Vector, spec: &mut NoiseSpec) -> Vector {
    let s = spec.level.sigma_grad;
    if s == 0.0 {
        return g;
    }
    let eps = spec.rng.normal_vector(g.len(), s);
    g + eps
}

/// Adds i.i.d. `N(0, sigma_hess^2)` noise to every entry of a general matrix.
pub fn perturb_matrix(a: Matrix, spec: &mut NoiseSpec) -> Matrix {
    let s = spec.level.sigma_hess;
    if s == 0.0 {
        return a;
    }
    let e = spec.rng.normal_matrix(a.nrows(), a.ncols(), s);
    a + e
}

/// `H + E` with `E` symmetric, each entry `N(0, sigma_hess^2)` (upper
/// triangle drawn, lower mirrored). With `require_pd`, eigenvalues below
/// [`PD_FLOOR`] are raised to it.
pub fn perturb_hessian(h: Matrix, spec: &mut NoiseSpec, require_pd: bool) -> Result<Matrix> {
    let asym = asymmetry(&h);
    if asym > 1e-10 * h.amax().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let s = spec.level.sigma_hess;
    let mut out = h;
    if s != 0.0 {
        let n = out.nrows();
        for j in 0..n {
            for i in 0..=j {
                let e = s * spec.rng.standard_normal();
                out[(i, j)] += e;
                if i != j {
                    out[(j, i)] += e;
                }
            }
        }
    }
    if require_pd {
        out = clip_eigenvalues(out, PD_FLOOR);
    }
    Ok(out)
}

/// Raises eigenvalues below `floor` to `floor`; returns the input untouched
/// when it is already above the floor.
pub fn clip_eigenvalues(h: Matrix, floor: f64) -> Matrix {
    let eig = h.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return h;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let q = &eig.eigenvectors;
    let rebuilt = q * Matrix::from_diagonal(&clipped) * q.transpose();
    (&rebuilt + rebuilt.transpose()) * 0.5
}

//! Dense primitives shared by every solver: feasible-set projections,
//! simplex weights and weight grids, seeded random streams, and central
//! finite differences used as test oracles.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Tolerance on `sum(weights) - 1` for a valid simplex point.
pub const SIMPLEX_SUM_TOL: f64 = 1e-12;

/// Default relative finite-difference step.
pub const FD_REL_STEP: f64 = 1e-6;

pub fn all_finite(v: &Vector) -> bool {
    v.iter().all(|e| e.is_finite())
}

/// Axis-aligned box `lower <= x <= upper`; either side may be infinite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("BoxSet bounds", lower.len(), upper.len())?;
        for (i, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY
            {
                return Err(Error::InvalidArgument(format!(
                    "box coordinate {i}: invalid bounds [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The same interval `[lo, hi]` on every one of `n` coordinates.
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; n], vec![hi; n])
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, v: &Vector) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&lo, &hi))| lo <= x && x <= hi)
    }

    pub fn project(&self, v: &Vector) -> Result<Vector> {
        project_box(v, self)
    }
}

/// Componentwise clamp of `v` onto `bounds`.
pub fn project_box(v: &Vector, bounds: &BoxSet) -> Result<Vector> {
    check_dim("project_box", bounds.dim(), v.len())?;
    Ok(Vector::from_iterator(
        v.len(),
        v.iter()
            .zip(bounds.lower.iter().zip(&bounds.upper))
            .map(|(&x, (&lo, &hi))| x.max(lo).min(hi)),
    ))
}

/// A point of the unit simplex `{w >= 0, sum w = 1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexWeight(Vector);

impl SimplexWeight {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        Self::from_vector(Vector::from_vec(weights))
    }

    pub fn from_vector(weights: Vector) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("empty simplex weight".into()));
        }
        if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "simplex weight has negative or non-finite entries: {:?}",
                weights.as_slice()
            )));
        }
        if (weights.sum() - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "simplex weight sums to {}, not 1",
                weights.sum()
            )));
        }
        Ok(Self(weights))
    }

    /// `(1/q, ..., 1/q)`.
    pub fn barycenter(q: usize) -> Self {
        Self(Vector::from_element(q, 1.0 / q as f64))
    }

    /// The `j`-th vertex `e_j` (0-based).
    pub fn vertex(q: usize, j: usize) -> Self {
        let mut w = Vector::zeros(q);
        w[j] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &Vector {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.0.iter()
    }
}

impl std::ops::Index<usize> for SimplexWeight {
    type Output = f64;

    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

impl TryFrom<Vec<f64>> for SimplexWeight {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SimplexWeight> for Vec<f64> {
    fn from(w: SimplexWeight) -> Self {
        w.0.as_slice().to_vec()
    }
}

/// Euclidean projection onto the unit simplex by sort-and-threshold.
///
/// Inputs that already are valid simplex points are returned unchanged, so
/// the projection is exactly idempotent.
pub fn project_simplex(v: &Vector) -> Result<SimplexWeight> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("cannot project an empty vector onto the simplex".into()));
    }
    if !all_finite(v) {
        return Err(Error::NonFinite("project_simplex input".into()));
    }
    if v.iter().all(|&w| w >= 0.0) && (v.sum() - 1.0).abs() <= SIMPLEX_SUM_TOL {
        return Ok(SimplexWeight(v.clone()));
    }

    // shifting by the max keeps the threshold exact for huge inputs
    let top = v.max();
    let v = v.map(|x| x - top);
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));

    // largest k with sorted[k] - (cumsum_k - 1)/(k+1) > 0; k = 0 always qualifies
    let mut cumsum = 0.0;
    let mut tau = sorted[0] - 1.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            tau = t;
        }
    }
    Ok(SimplexWeight(v.map(|x| (x - tau).max(0.0))))
}

/// Ordered, non-empty list of simplex weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightGrid {
    points: Vec<SimplexWeight>,
}

impl WeightGrid {
    pub fn new(points: Vec<SimplexWeight>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::InvalidArgument("weight grid must contain at least one point".into()));
        };
        let q = first.len();
        for p in &points {
            check_dim("WeightGrid point", q, p.len())?;
        }
        Ok(Self { points })
    }

    /// `m` equispaced weights `(t, 1 - t)` with `t` running from 0 to 1.
    pub fn equispaced_biobjective(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidArgument(format!("equispaced sweep needs at least 2 points, got {m}")));
        }
        let points = (0..m)
            .map(|i| {
                let t = i as f64 / (m - 1) as f64;
                SimplexWeight(Vector::from_vec(vec![t, 1.0 - t]))
            })
            .collect();
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_objectives(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[SimplexWeight] {
        &self.points
    }

    pub fn get(&self, i: usize) -> Option<&SimplexWeight> {
        self.points.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SimplexWeight> {
        self.points.iter()
    }
}

/// Seeded random stream. Identical `(seed, stream)` pairs reproduce
/// identical draws; independent tasks should use distinct stream ids.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh stream with the same seed and a different stream id.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vector(&mut self, n: usize, sigma: f64) -> Vector {
        Vector::from_fn(n, |_, _| sigma * self.standard_normal())
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, sigma: f64) -> Matrix {
        // column-major fill order is part of the reproducibility contract
        Matrix::from_fn(rows, cols, |_, _| sigma * self.standard_normal())
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Draws one weight uniformly from the `q`-simplex via sorted-uniform spacings.
pub fn sample_simplex_point(q: usize, rng: &mut RngStream) -> SimplexWeight {
    let mut cuts: Vec<f64> = (0..q - 1).map(|_| rng.uniform()).collect();
    cuts.sort_by(f64::total_cmp);
    let mut w = Vec::with_capacity(q);
    let mut prev = 0.0;
    for c in cuts {
        w.push(c - prev);
        prev = c;
    }
    w.push(1.0 - prev);
    SimplexWeight(Vector::from_vec(w))
}

/// `n` weights drawn uniformly from the `q`-simplex.
pub fn sample_weight_grid(q: usize, n: usize, rng: &mut RngStream) -> Result<WeightGrid> {
    if q < 2 {
        return Err(Error::InvalidArgument(format!("weight grid needs q >= 2, got {q}")));
    }
    if n < 1 {
        return Err(Error::InvalidArgument("weight grid needs N >= 1".into()));
    }
    let points = (0..n).map(|_| sample_simplex_point(q, rng)).collect();
    Ok(WeightGrid { points })
}

/// Indices of `batch` grid members drawn uniformly without replacement.
pub fn sample_minibatch_indices(grid_len: usize, batch: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if batch < 1 || batch > grid_len {
        return Err(Error::InvalidArgument(format!(
            "mini-batch size {batch} must lie in [1, {grid_len}]"
        )));
    }
    Ok(rand::seq::index::sample(rng, grid_len, batch).into_vec())
}

pub fn sample_minibatch(grid: &WeightGrid, batch: usize, rng: &mut RngStream) -> Result<WeightGrid> {
    let idx = sample_minibatch_indices(grid.len(), batch, rng)?;
    Ok(WeightGrid {
        points: idx.into_iter().map(|i| grid.points[i].clone()).collect(),
    })
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` with a fixed step.
pub fn finite_diff_grad<F>(mut f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: FnMut(&Vector) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    fd_grad_with(&mut f, x, |_| h)
}

/// Central differences with per-coordinate step `1e-6 * max(1, |x_i|)`.
pub fn finite_diff_grad_rel<F>(mut f: F, x: &Vector) -> Result<Vector>
where
    F: FnMut(&Vector) -> f64,
{
    fd_grad_with(&mut f, x, |xi| FD_REL_STEP * xi.abs().max(1.0))
}

fn fd_grad_with<F, H>(f: &mut F, x: &Vector, step: H) -> Result<Vector>
where
    F: FnMut(&Vector) -> f64,
    H: Fn(f64) -> f64,
{
    let mut g = Vector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let h = step(x[i]);
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective at finite-difference probe {i}")));
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Central-difference Jacobian of a vector map; column `i` is `d f / d x_i`.
pub fn finite_diff_jacobian<F>(mut f: F, x: &Vector, h: f64) -> Result<Matrix>
where
    F: FnMut(&Vector) -> Vector,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut cols = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !all_finite(&fp) || !all_finite(&fm) {
            return Err(Error::NonFinite(format!("map at finite-difference probe {i}")));
        }
        cols.push((fp - fm) / (2.0 * h));
    }
    if cols.is_empty() {
        return Ok(Matrix::zeros(0, 0));
    }
    Ok(Matrix::from_columns(&cols))
}

/// `max |A - A^T|` over all entries.
pub fn asymmetry(a: &Matrix) -> f64 {
    if a.nrows() != a.ncols() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Relative error `|a - b| / max(1, |b|)` in the infinity norm.
pub fn rel_err(a: &Vector, b: &Vector) -> f64 {
    let scale = b.amax().max(1.0);
    (a - b).amax() / scale
}

//! Local smooth costs, the shared nonsmooth regularizer, and their oracles.

use ndarray::{Array1, Array2, ArrayView1};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("quadratic cost requires a symmetric positive definite matrix")]
    NotPositiveDefinite,
    #[error("matrix/vector dimensions disagree: {0}")]
    DimensionMismatch(String),
}

/// Smooth local cost with value/gradient oracles.
///
/// `curvature_bounds` returns `(m_f, M_f)` when known; the bounds feed the
/// analysis monitors only, never the iteration itself.
pub trait LocalCost: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, w: ArrayView1<'_, f64>) -> f64;
    fn gradient(&self, w: ArrayView1<'_, f64>) -> Array1<f64>;
    fn curvature_bounds(&self) -> Option<(f64, f64)>;
}

/// Nonsmooth regularizer with a proximal oracle.
///
/// `prox(v, mu)` evaluates `argmin_x g(x) + (mu/2) |x - v|^2`.
pub trait Regularizer: Send + Sync {
    fn value(&self, theta: ArrayView1<'_, f64>) -> f64;
    fn prox(&self, v: ArrayView1<'_, f64>, mu: f64) -> Array1<f64>;
}

/// Numerically stable `ln(1 + e^z)`.
fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sparse feature row with a binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    /// (feature index, value) pairs, indices strictly increasing.
    pub features: Vec<(usize, f64)>,
    pub label: u8,
}

impl DataPoint {
    pub fn dot(&self, w: ArrayView1<'_, f64>) -> f64 {
        self.features.iter().map(|&(k, v)| v * w[k]).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.features.iter().map(|&(_, v)| v * v).sum()
    }
}

/// Logistic negative log-likelihood over a local shard of data:
/// `(1/m_i) sum_j [ln(1 + e^{-w.x_j}) + (1 - y_j) w.x_j] + (nu/2)|w|^2`,
/// the standard model with labels in {0, 1}.
#[derive(Debug, Clone)]
pub struct LogisticCost {
    points: Vec<DataPoint>,
    dim: usize,
    ridge: f64,
}

impl LogisticCost {
    pub fn new(points: Vec<DataPoint>, dim: usize, ridge: f64) -> Self {
        assert!(!points.is_empty(), "logistic cost needs at least one point");
        assert!(ridge >= 0.0);
        LogisticCost { points, dim, ridge }
    }

    pub fn point_count(&self) -> usize {
        self.points.len()
    }
}

impl LocalCost for LogisticCost {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, w: ArrayView1<'_, f64>) -> f64 {
        let inv = 1.0 / self.points.len() as f64;
        let mut total = 0.0;
        for p in &self.points {
            let z = p.dot(w);
            total += log1p_exp(-z) + (1.0 - p.label as f64) * z;
        }
        inv * total + 0.5 * self.ridge * w.dot(&w)
    }

    fn gradient(&self, w: ArrayView1<'_, f64>) -> Array1<f64> {
        let inv = 1.0 / self.points.len() as f64;
        let mut grad = Array1::<f64>::zeros(self.dim);
        for p in &self.points {
            let coeff = inv * (sigmoid(p.dot(w)) - p.label as f64);
            for &(k, v) in &p.features {
                grad[k] += coeff * v;
            }
        }
        if self.ridge > 0.0 {
            grad.scaled_add(self.ridge, &w);
        }
        grad
    }

    fn curvature_bounds(&self) -> Option<(f64, f64)> {
        // sigmoid curvature is at most 1/4
        let max_norm_sq = self
            .points
            .iter()
            .map(DataPoint::norm_sq)
            .fold(0.0f64, f64::max);
        Some((self.ridge, self.ridge + 0.25 * max_norm_sq))
    }
}

/// Quadratic cost `0.5 w^T Q w - b^T w` with exact curvature bounds.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    q: Array2<f64>,
    b: Array1<f64>,
    m_f: f64,
    big_m_f: f64,
}

impl QuadraticCost {
    /// Rejects non-symmetric or non-positive-definite `q`.
    pub fn new(q: Array2<f64>, b: Array1<f64>) -> Result<Self, ObjectiveError> {
        if q.nrows() != q.ncols() || q.nrows() != b.len() {
            return Err(ObjectiveError::DimensionMismatch(format!(
                "Q is {}x{}, b has length {}",
                q.nrows(),
                q.ncols(),
                b.len()
            )));
        }
        for i in 0..q.nrows() {
            for j in 0..i {
                if (q[[i, j]] - q[[j, i]]).abs() > 1e-12 * (1.0 + q[[i, j]].abs()) {
                    return Err(ObjectiveError::NotPositiveDefinite);
                }
            }
        }
        let eigs = linalg::sym_eigenvalues(&q);
        let m_f = eigs[0];
        if m_f <= 0.0 {
            return Err(ObjectiveError::NotPositiveDefinite);
        }
        let big_m_f = eigs[eigs.len() - 1];
        Ok(QuadraticCost { q, b, m_f, big_m_f })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn rhs(&self) -> &Array1<f64> {
        &self.b
    }
}

impl LocalCost for QuadraticCost {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value(&self, w: ArrayView1<'_, f64>) -> f64 {
        0.5 * w.dot(&self.q.dot(&w)) - self.b.dot(&w)
    }

    fn gradient(&self, w: ArrayView1<'_, f64>) -> Array1<f64> {
        self.q.dot(&w) - &self.b
    }

    fn curvature_bounds(&self) -> Option<(f64, f64)> {
        Some((self.m_f, self.big_m_f))
    }
}

/// `factor * inner`; used to fold a 1/m normalization into local costs.
pub struct ScaledCost {
    inner: Box<dyn LocalCost>,
    factor: f64,
}

impl ScaledCost {
    pub fn new(inner: Box<dyn LocalCost>, factor: f64) -> Self {
        assert!(factor > 0.0);
        ScaledCost { inner, factor }
    }
}

impl LocalCost for ScaledCost {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, w: ArrayView1<'_, f64>) -> f64 {
        self.factor * self.inner.value(w)
    }

    fn gradient(&self, w: ArrayView1<'_, f64>) -> Array1<f64> {
        self.inner.gradient(w) * self.factor
    }

    fn curvature_bounds(&self) -> Option<(f64, f64)> {
        self.inner
            .curvature_bounds()
            .map(|(lo, hi)| (self.factor * lo, self.factor * hi))
    }
}

/// Identically-zero cost; handy for degenerate fixed-point checks.
pub struct ZeroCost {
    dim: usize,
}

impl ZeroCost {
    pub fn new(dim: usize) -> Self {
        ZeroCost { dim }
    }
}

impl LocalCost for ZeroCost {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, _w: ArrayView1<'_, f64>) -> f64 {
        0.0
    }

    fn gradient(&self, _w: ArrayView1<'_, f64>) -> Array1<f64> {
        Array1::zeros(self.dim)
    }

    fn curvature_bounds(&self) -> Option<(f64, f64)> {
        Some((0.0, 0.0))
    }
}

/// Componentwise soft threshold `sign(v) max(|v| - threshold, 0)`.
pub fn prox_l1(v: ArrayView1<'_, f64>, threshold: f64) -> Array1<f64> {
    assert!(threshold > 0.0, "threshold must be positive");
    v.mapv(|x| x.signum() * (x.abs() - threshold).max(0.0))
}

/// Weighted l1 norm `weight * |theta|_1`.
#[derive(Debug, Clone, Copy)]
pub struct L1Reg {
    pub weight: f64,
}

impl L1Reg {
    pub fn new(weight: f64) -> Self {
        assert!(weight > 0.0);
        L1Reg { weight }
    }
}

impl Regularizer for L1Reg {
    fn value(&self, theta: ArrayView1<'_, f64>) -> f64 {
        self.weight * theta.iter().map(|v| v.abs()).sum::<f64>()
    }

    fn prox(&self, v: ArrayView1<'_, f64>, mu: f64) -> Array1<f64> {
        prox_l1(v, self.weight / mu)
    }
}

/// No regularization; prox is the identity.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroReg;

impl Regularizer for ZeroReg {
    fn value(&self, _theta: ArrayView1<'_, f64>) -> f64 {
        0.0
    }

    fn prox(&self, v: ArrayView1<'_, f64>, _mu: f64) -> Array1<f64> {
        v.to_owned()
    }
}

/// One agent's share of the network objective plus the shared regularizer.
///
/// The global objective is `J(w) = sum_i f_i(w) + g(w)`; dataset loaders fold
/// any 1/m normalization into the local costs via [`ScaledCost`].
pub struct CompositeProblem {
    pub costs: Vec<Box<dyn LocalCost>>,
    pub regularizer: Box<dyn Regularizer>,
    dim: usize,
}

impl CompositeProblem {
    pub fn new(costs: Vec<Box<dyn LocalCost>>, regularizer: Box<dyn Regularizer>) -> Self {
        assert!(!costs.is_empty());
        let dim = costs[0].dim();
        assert!(costs.iter().all(|c| c.dim() == dim), "mixed dimensions");
        CompositeProblem { costs, regularizer, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn agent_count(&self) -> usize {
        self.costs.len()
    }

    /// Full composite objective at a single point.
    pub fn objective(&self, w: ArrayView1<'_, f64>) -> f64 {
        let smooth: f64 = self.costs.iter().map(|c| c.value(w)).sum();
        smooth + self.regularizer.value(w)
    }

    /// Total smooth gradient `sum_i grad f_i(w)`.
    pub fn total_gradient(&self, w: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut g = Array1::<f64>::zeros(self.dim);
        for c in &self.costs {
            g += &c.gradient(w);
        }
        g
    }

    /// Tightest known global curvature interval: (min m_f, max M_f) over
    /// agents, None if any agent lacks declared bounds.
    pub fn agent_curvature_range(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for c in &self.costs {
            let (a, b) = c.curvature_bounds()?;
            lo = lo.min(a);
            hi = hi.max(b);
        }
        Some((lo, hi))
    }

    /// Lipschitz constant of the total smooth gradient (sum of per-agent
    /// upper bounds), None if unknown.
    pub fn total_smooth_lipschitz(&self) -> Option<f64> {
        let mut total = 0.0;
        for c in &self.costs {
            total += c.curvature_bounds()?.1;
        }
        Some(total)
    }
}

//! Reference solutions, error metrics, and numerical verification of the
//! convergence analysis along trajectories.
//!
//! Everything here is an oracle or a monitor: nothing feeds back into the
//! iteration. Dense matrices (including Kronecker factors) are materialized
//! only in this module and capped at small dimensions.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::engine::{Engine, EngineObserver, HyperParams};
use crate::graph::{IncidenceSet, NetworkGraph, SpectralData, EIGEN_ZERO_TOL};
use crate::lbfgs::{dense_inverse_oracle, InitMode, LbfgsMemory};
use crate::linalg;
use crate::objective::CompositeProblem;

/// Dense per-agent curvature estimates are materialized only up to this
/// dimension, keeping cubic work out of the engine.
pub const DENSE_MONITOR_DIM_CAP: usize = 64;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("reference solve did not reach tolerance; gradient-map norm {residual:e}")]
    NoConvergence { residual: f64 },
    #[error("problem lacks declared curvature bounds")]
    MissingCurvatureBounds,
    #[error("dense monitors require dim <= {cap}, got {dim}")]
    DimensionTooLarge { dim: usize, cap: usize },
}

// ---------------------------------------------------------------------------
// Reference solutions
// ---------------------------------------------------------------------------

/// Centralized optimum and the KKT-recovered dual pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub w_star: Array1<f64>,
    pub theta_star: Array1<f64>,
    /// Edge-dual stack, one d-row per edge; lies in the column space of the
    /// signed incidence matrix per coordinate.
    pub alpha_star: Array2<f64>,
    pub lambda_star: Array1<f64>,
    pub objective_star: f64,
    /// Norm of the stationarity residual over all agent blocks.
    pub kkt_residual: f64,
}

/// Solves the centralized composite problem by accelerated proximal gradient
/// with function restarts, then recovers the duals from the KKT system.
///
/// `tol` bounds the gradient-map norm at the returned point. `lambda_star`
/// is the exact prox subgradient of the final step; `alpha_star` is the
/// minimum-norm least-squares solution of the stationarity equation, which
/// keeps the dual recovery independent of the algorithm under test.
pub fn reference_solve(
    problem: &CompositeProblem,
    inc: &IncidenceSet,
    tol: f64,
    max_iter: usize,
) -> Result<ReferenceSolution, AnalysisError> {
    let d = problem.dim();
    let lipschitz = problem
        .total_smooth_lipschitz()
        .ok_or(AnalysisError::MissingCurvatureBounds)?
        .max(1e-12);
    let eta = 1.0 / lipschitz;
    let reg = problem.regularizer.as_ref();

    let grad_map_norm = |x: &Array1<f64>| -> f64 {
        let v = x - &(problem.total_gradient(x.view()) * eta);
        let px = reg.prox(v.view(), lipschitz);
        let gm = (x - &px) / eta;
        gm.dot(&gm).sqrt()
    };

    let mut x = Array1::<f64>::zeros(d);
    let mut y = x.clone();
    let mut momentum = 1.0_f64;
    let mut converged = false;

    for iter in 0..max_iter {
        let grad = problem.total_gradient(y.view());
        let v = &y - &(grad * eta);
        let x_new = reg.prox(v.view(), lipschitz);
        // gradient-based adaptive restart; function-value restarts lose
        // resolution below sqrt(machine eps)
        if (&y - &x_new).dot(&(&x_new - &x)) > 0.0 {
            momentum = 1.0;
            y = x.clone();
            continue;
        }
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        y = &x_new + &((&x_new - &x) * ((momentum - 1.0) / next_momentum));
        x = x_new;
        momentum = next_momentum;

        if iter % 8 == 0 && grad_map_norm(&x) <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        let residual = grad_map_norm(&x);
        if residual > tol {
            return Err(AnalysisError::NoConvergence { residual });
        }
    }

    // One plain proximal-gradient step pins lambda* as an exact prox
    // subgradient at the returned point.
    let v = &x - &(problem.total_gradient(x.view()) * eta);
    let w_star = reg.prox(v.view(), lipschitz);
    let lambda_star = (&v - &w_star) / eta;

    let (m, n) = (inc.agent_count(), inc.edge_count());
    // target per agent block: -(grad f_i(w*) + [i=l] lambda*)
    let mut target = Array2::<f64>::zeros((m, d));
    for (i, cost) in problem.costs.iter().enumerate() {
        let g = cost.gradient(w_star.view());
        for k in 0..d {
            target[[i, k]] = -g[k];
        }
    }
    for k in 0..d {
        target[[inc.l_index, k]] -= lambda_star[k];
    }
    let alpha_star = if n > 0 {
        let pinv = linalg::sym_pseudoinverse(&inc.l_s_f64(), EIGEN_ZERO_TOL);
        inc.e_s_f64().dot(&pinv.dot(&target))
    } else {
        Array2::zeros((0, d))
    };
    // stationarity residual: grad F + E_s^T alpha + S lambda  (= P target - target)
    let achieved = inc.e_s_f64().t().dot(&alpha_star);
    let residual_mat = &achieved - &target;
    let kkt_residual = residual_mat.iter().map(|v| v * v).sum::<f64>().sqrt();

    Ok(ReferenceSolution {
        theta_star: w_star.clone(),
        objective_star: problem.objective(w_star.view()),
        w_star,
        alpha_star,
        lambda_star,
        kkt_residual,
    })
}

/// Averaged relative cost error
/// `(mean_t J - J*) / (mean_0 J - J*)`; NaN when the initial gap is not
/// positive (started at the optimum).
pub fn relative_error(mean_cost: f64, initial_mean_cost: f64, objective_star: f64) -> f64 {
    let denom = initial_mean_cost - objective_star;
    if denom > 0.0 {
        (mean_cost - objective_star) / denom
    } else {
        f64::NAN
    }
}

// ---------------------------------------------------------------------------
// Dense whole-network recursion (oracle for the engine)
// ---------------------------------------------------------------------------

fn kron_with_identity(a: &Array2<f64>, d: usize) -> Array2<f64> {
    let (r, c) = (a.nrows(), a.ncols());
    let mut out = Array2::<f64>::zeros((r * d, c * d));
    for i in 0..r {
        for j in 0..c {
            let v = a[[i, j]];
            if v != 0.0 {
                for k in 0..d {
                    out[[i * d + k, j * d + k]] = v;
                }
            }
        }
    }
    out
}

/// Explicit vectorized form of the update: stacked primal over all agents,
/// materialized incidence matrices, dense curvature estimates applied
/// blockwise. Independent route used to validate the buffered per-agent
/// engine on synchronous runs.
pub struct DenseRecursion<'a> {
    problem: &'a CompositeProblem,
    params: HyperParams,
    degrees: Vec<usize>,
    e_s: Array2<f64>,
    l_s: Array2<f64>,
    s_mat: Array2<f64>,
    pub w: Array1<f64>,
    pub theta: Array1<f64>,
    pub alpha: Array1<f64>,
    pub lambda: Array1<f64>,
    memories: Vec<LbfgsMemory>,
    m: usize,
    d: usize,
}

impl<'a> DenseRecursion<'a> {
    pub fn new(
        problem: &'a CompositeProblem,
        graph: &NetworkGraph,
        inc: &IncidenceSet,
        params: HyperParams,
    ) -> Self {
        let (m, n, d) = (graph.agent_count(), graph.edge_count(), problem.dim());
        let e_s = kron_with_identity(&inc.e_s_f64(), d);
        let l_s = e_s.t().dot(&e_s);
        let mut s_hat = Array2::<f64>::zeros((m, 1));
        s_hat[[params.l_index, 0]] = 1.0;
        let s_mat = kron_with_identity(&s_hat, d);
        let memories = (0..m).map(|_| LbfgsMemory::new(params.memory)).collect();
        DenseRecursion {
            problem,
            params,
            degrees: (0..m).map(|i| graph.degree(i)).collect(),
            e_s,
            l_s,
            s_mat,
            w: Array1::zeros(m * d),
            theta: Array1::zeros(d),
            alpha: Array1::zeros(n * d),
            lambda: Array1::zeros(d),
            memories,
            m,
            d,
        }
    }

    pub fn phi(&self) -> Array1<f64> {
        self.e_s.t().dot(&self.alpha)
    }

    fn block(&self, v: &Array1<f64>, i: usize) -> Array1<f64> {
        v.slice(ndarray::s![i * self.d..(i + 1) * self.d]).to_owned()
    }

    fn stacked_gradient(&self) -> Array1<f64> {
        let mut out = Array1::<f64>::zeros(self.m * self.d);
        for i in 0..self.m {
            let g = self.problem.costs[i].gradient(self.block(&self.w, i).view());
            for k in 0..self.d {
                out[i * self.d + k] = g[k];
            }
        }
        out
    }

    fn init_scale(&self, i: usize) -> f64 {
        match self.params.init_mode {
            InitMode::Constant => 1.0 / self.params.gamma,
            InitMode::Adaptive => self.memories[i]
                .adaptive_scale()
                .unwrap_or(1.0 / self.params.gamma),
        }
    }

    /// One synchronous step of the vectorized recursion: quasi-Newton primal
    /// update, prox step, then the dual ascent on `alpha` and `lambda`.
    pub fn step(&mut self) {
        let grads = self.stacked_gradient();
        // grad_w L = grad F + phi + S lambda + (mu_z/2) L_s w
        //           + mu_theta S (S^T w - theta)
        let mut grad_l = &grads + &self.phi();
        grad_l += &self.s_mat.dot(&self.lambda);
        grad_l.scaled_add(0.5 * self.params.mu_z, &self.l_s.dot(&self.w));
        let gap = self.s_mat.t().dot(&self.w) - &self.theta;
        grad_l.scaled_add(self.params.mu_theta, &self.s_mat.dot(&gap));

        let mut w_new = Array1::<f64>::zeros(self.m * self.d);
        for i in 0..self.m {
            let inv = dense_inverse_oracle(&self.memories[i], self.init_scale(i), self.d);
            let step = inv.dot(&self.block(&grad_l, i));
            for k in 0..self.d {
                w_new[i * self.d + k] = self.w[i * self.d + k] - step[k];
            }
        }

        let prox_arg = self.s_mat.t().dot(&w_new) + &(&self.lambda / self.params.mu_theta);
        let theta_new = self
            .problem
            .regularizer
            .prox(prox_arg.view(), self.params.mu_theta);
        self.alpha.scaled_add(0.5 * self.params.mu_z, &self.e_s.dot(&w_new));
        let residual = self.s_mat.t().dot(&w_new) - &theta_new;
        self.lambda.scaled_add(self.params.mu_theta, &residual);

        for i in 0..self.m {
            let w_old_i = self.block(&self.w, i);
            let w_new_i = self.block(&w_new, i);
            let s = &w_new_i - &w_old_i;
            let delta = if i == self.params.l_index { self.params.mu_theta } else { 0.0 };
            let coeff = self.params.mu_z * self.degrees[i] as f64 + delta + self.params.epsilon;
            let mut q = self.problem.costs[i].gradient(w_new_i.view())
                - &self.problem.costs[i].gradient(w_old_i.view());
            q.scaled_add(coeff, &s);
            self.memories[i].push_pair(s, q);
        }

        self.w = w_new;
        self.theta = theta_new;
    }

    /// Gradient of the augmented Lagrangian at the current state (the
    /// variable-elimination form).
    pub fn lagrangian_gradient(&self) -> Array1<f64> {
        let mut grad_l = &self.stacked_gradient() + &self.phi();
        grad_l += &self.s_mat.dot(&self.lambda);
        grad_l.scaled_add(0.5 * self.params.mu_z, &self.l_s.dot(&self.w));
        let gap = self.s_mat.t().dot(&self.w) - &self.theta;
        grad_l.scaled_add(self.params.mu_theta, &self.s_mat.dot(&gap));
        grad_l
    }

    /// Copies engine state in (for cross-checks from arbitrary states).
    pub fn load_state(&mut self, engine: &Engine<'_>, alpha: &Array2<f64>) {
        for (i, agent) in engine.agents().iter().enumerate() {
            for k in 0..self.d {
                self.w[i * self.d + k] = agent.w[k];
            }
        }
        self.theta = engine.theta().clone();
        self.lambda = engine.lambda().clone();
        for (k, row) in alpha.outer_iter().enumerate() {
            for j in 0..self.d {
                self.alpha[k * self.d + j] = row[j];
            }
        }
    }
}

/// The five-variable form with no variable elimination: explicit consensus
/// block `z`, the full stacked dual `y` on `Aw = Bz`, and the exact
/// `z`-minimization. The decomposition `y = [alpha; -alpha]` and the
/// manifold `z = E_u w / 2` are not assumed anywhere; they must emerge from
/// zero initialization, which is what [`Self::dual_split_gap`] and
/// [`Self::manifold_gap`] measure.
pub struct RawAdmmRecursion<'a> {
    problem: &'a CompositeProblem,
    params: HyperParams,
    degrees: Vec<usize>,
    a_mat: Array2<f64>,
    b_mat: Array2<f64>,
    e_u: Array2<f64>,
    s_mat: Array2<f64>,
    pub w: Array1<f64>,
    pub theta: Array1<f64>,
    pub z: Array1<f64>,
    pub y: Array1<f64>,
    pub lambda: Array1<f64>,
    memories: Vec<LbfgsMemory>,
    m: usize,
    n: usize,
    d: usize,
}

impl<'a> RawAdmmRecursion<'a> {
    pub fn new(
        problem: &'a CompositeProblem,
        graph: &NetworkGraph,
        inc: &IncidenceSet,
        params: HyperParams,
    ) -> Self {
        let (m, n, d) = (graph.agent_count(), graph.edge_count(), problem.dim());
        let mut stacked = Array2::<f64>::zeros((2 * n, m));
        for k in 0..n {
            for i in 0..m {
                stacked[[k, i]] = inc.a_s[[k, i]] as f64;
                stacked[[n + k, i]] = inc.a_d[[k, i]] as f64;
            }
        }
        let a_mat = kron_with_identity(&stacked, d);
        let mut b_hat = Array2::<f64>::zeros((2 * n, n));
        for k in 0..n {
            b_hat[[k, k]] = 1.0;
            b_hat[[n + k, k]] = 1.0;
        }
        let b_mat = kron_with_identity(&b_hat, d);
        let e_u = kron_with_identity(&inc.e_u_f64(), d);
        let mut s_hat = Array2::<f64>::zeros((m, 1));
        s_hat[[params.l_index, 0]] = 1.0;
        let s_mat = kron_with_identity(&s_hat, d);
        let memories = (0..m).map(|_| LbfgsMemory::new(params.memory)).collect();
        RawAdmmRecursion {
            problem,
            degrees: (0..m).map(|i| graph.degree(i)).collect(),
            params,
            a_mat,
            b_mat,
            e_u,
            s_mat,
            w: Array1::zeros(m * d),
            theta: Array1::zeros(d),
            z: Array1::zeros(n * d),
            y: Array1::zeros(2 * n * d),
            lambda: Array1::zeros(d),
            memories,
            m,
            n,
            d,
        }
    }

    fn block(&self, v: &Array1<f64>, i: usize) -> Array1<f64> {
        v.slice(ndarray::s![i * self.d..(i + 1) * self.d]).to_owned()
    }

    fn init_scale(&self, i: usize) -> f64 {
        match self.params.init_mode {
            InitMode::Constant => 1.0 / self.params.gamma,
            InitMode::Adaptive => self.memories[i]
                .adaptive_scale()
                .unwrap_or(1.0 / self.params.gamma),
        }
    }

    /// One step of the sequential primal minimizations (the `w` block
    /// replaced by a single quasi-Newton step) followed by dual ascent.
    pub fn step(&mut self) {
        // grad_w of the raw augmented Lagrangian, no eliminations
        let mut grad_l = Array1::<f64>::zeros(self.m * self.d);
        for i in 0..self.m {
            let g = self.problem.costs[i].gradient(self.block(&self.w, i).view());
            for k in 0..self.d {
                grad_l[i * self.d + k] = g[k];
            }
        }
        grad_l += &self.a_mat.t().dot(&self.y);
        grad_l += &self.s_mat.dot(&self.lambda);
        let constraint = self.a_mat.dot(&self.w) - &self.b_mat.dot(&self.z);
        grad_l += &(self.a_mat.t().dot(&constraint) * self.params.mu_z);
        let gap = self.s_mat.t().dot(&self.w) - &self.theta;
        grad_l.scaled_add(self.params.mu_theta, &self.s_mat.dot(&gap));

        let w_old = self.w.clone();
        for i in 0..self.m {
            let inv = dense_inverse_oracle(&self.memories[i], self.init_scale(i), self.d);
            let step = inv.dot(&self.block(&grad_l, i));
            for k in 0..self.d {
                self.w[i * self.d + k] -= step[k];
            }
        }

        let prox_arg = self.s_mat.t().dot(&self.w) + &(&self.lambda / self.params.mu_theta);
        self.theta = self
            .problem
            .regularizer
            .prox(prox_arg.view(), self.params.mu_theta);

        // exact z minimization: B^T y + mu_z B^T (A w - B z) = 0 with
        // B^T B = 2 I
        self.z = (self.b_mat.t().dot(&self.y) / self.params.mu_z
            + &self.e_u.dot(&self.w))
            / 2.0;

        let residual = self.a_mat.dot(&self.w) - &self.b_mat.dot(&self.z);
        self.y.scaled_add(self.params.mu_z, &residual);
        let s_gap = self.s_mat.t().dot(&self.w) - &self.theta;
        self.lambda.scaled_add(self.params.mu_theta, &s_gap);

        for i in 0..self.m {
            let w_old_i = self.block(&w_old, i);
            let w_new_i = self.block(&self.w, i);
            let s = &w_new_i - &w_old_i;
            let delta = if i == self.params.l_index { self.params.mu_theta } else { 0.0 };
            let coeff = self.params.mu_z * self.degrees[i] as f64 + delta + self.params.epsilon;
            let mut q = self.problem.costs[i].gradient(w_new_i.view())
                - &self.problem.costs[i].gradient(w_old_i.view());
            q.scaled_add(coeff, &s);
            self.memories[i].push_pair(s, q);
        }
    }

    /// Per-agent dual slice `A^T y` (equals the engine's `phi` stack when
    /// the dual split holds).
    pub fn phi(&self) -> Array1<f64> {
        self.a_mat.t().dot(&self.y)
    }

    /// `max |y_upper + y_lower|`: zero iff `y` decomposes as `[alpha; -alpha]`.
    pub fn dual_split_gap(&self) -> f64 {
        let nd = self.n * self.d;
        (0..nd).fold(0.0f64, |acc, k| acc.max((self.y[k] + self.y[nd + k]).abs()))
    }

    /// `max |z - E_u w / 2|`: zero iff the consensus block stays on the
    /// manifold implied by zero initialization.
    pub fn manifold_gap(&self) -> f64 {
        let implied = self.e_u.dot(&self.w) / 2.0;
        (&self.z - &implied)
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

// ---------------------------------------------------------------------------
// Dual bookkeeping
// ---------------------------------------------------------------------------

/// Shadow edge dual maintained alongside synchronous runs:
/// `alpha += (mu_z/2) E_s w` after every iteration, so `phi = E_s^T alpha`
/// must hold along the trajectory.
#[derive(Debug, Clone)]
pub struct ShadowDual {
    pub alpha: Array2<f64>,
    e_s: Array2<f64>,
    half_mu_z: f64,
}

impl ShadowDual {
    pub fn new(inc: &IncidenceSet, dim: usize, mu_z: f64) -> Self {
        ShadowDual {
            alpha: Array2::zeros((inc.edge_count(), dim)),
            e_s: inc.e_s_f64(),
            half_mu_z: 0.5 * mu_z,
        }
    }

    pub fn update(&mut self, w_stack: &Array2<f64>) {
        self.alpha.scaled_add(self.half_mu_z, &self.e_s.dot(w_stack));
    }

    /// `max |phi - E_s^T alpha|` over all entries.
    pub fn identity_gap(&self, phi_stack: &Array2<f64>) -> f64 {
        let implied = self.e_s.t().dot(&self.alpha);
        (&implied - phi_stack)
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// Minimum-norm edge dual consistent with an observed `phi` stack:
/// `alpha = E_s L_s^+ phi` per coordinate. On synchronous trajectories this
/// coincides with [`ShadowDual`]; on asynchronous ones it projects.
pub struct DualReconstructor {
    e_s: Array2<f64>,
    pinv_ls: Array2<f64>,
}

impl DualReconstructor {
    pub fn new(inc: &IncidenceSet) -> Self {
        DualReconstructor {
            e_s: inc.e_s_f64(),
            pinv_ls: linalg::sym_pseudoinverse(&inc.l_s_f64(), EIGEN_ZERO_TOL),
        }
    }

    pub fn reconstruct(&self, phi_stack: &Array2<f64>) -> Array2<f64> {
        self.e_s.dot(&self.pinv_ls.dot(phi_stack))
    }
}

/// Stacks the per-agent primal rows of an engine.
pub fn w_stack(engine: &Engine<'_>) -> Array2<f64> {
    let d = engine.dim();
    let mut out = Array2::zeros((engine.agents().len(), d));
    for (i, a) in engine.agents().iter().enumerate() {
        for k in 0..d {
            out[[i, k]] = a.w[k];
        }
    }
    out
}

/// Stacks the per-agent dual accumulator rows of an engine.
pub fn phi_stack(engine: &Engine<'_>) -> Array2<f64> {
    let d = engine.dim();
    let mut out = Array2::zeros((engine.agents().len(), d));
    for (i, a) in engine.agents().iter().enumerate() {
        for k in 0..d {
            out[[i, k]] = a.phi[k];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Joint-state distance
// ---------------------------------------------------------------------------

/// A full primal-dual state `(w, theta, alpha, lambda)`; the consensus
/// variable `z` is reconstructed as `(w_i + w_j)/2` per edge.
#[derive(Debug, Clone)]
pub struct NetworkPoint {
    pub w: Array2<f64>,
    pub theta: Array1<f64>,
    pub alpha: Array2<f64>,
    pub lambda: Array1<f64>,
}

pub fn engine_point(engine: &Engine<'_>, alpha: Array2<f64>) -> NetworkPoint {
    NetworkPoint {
        w: w_stack(engine),
        theta: engine.theta().clone(),
        alpha,
        lambda: engine.lambda().clone(),
    }
}

/// The optimum as a network point: every agent at `w*`, consensus duals.
pub fn reference_point(reference: &ReferenceSolution, agent_count: usize) -> NetworkPoint {
    let d = reference.w_star.len();
    let mut w = Array2::zeros((agent_count, d));
    for i in 0..agent_count {
        for k in 0..d {
            w[[i, k]] = reference.w_star[k];
        }
    }
    NetworkPoint {
        w,
        theta: reference.theta_star.clone(),
        alpha: reference.alpha_star.clone(),
        lambda: reference.lambda_star.clone(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HNormWeights {
    pub mu_z: f64,
    pub mu_theta: f64,
    pub epsilon: f64,
}

impl HNormWeights {
    pub fn from_params(p: &HyperParams) -> Self {
        HNormWeights { mu_z: p.mu_z, mu_theta: p.mu_theta, epsilon: p.epsilon }
    }
}

fn sq_norm_rows_weighted(a: &Array2<f64>, b: &Array2<f64>, row_weight: impl Fn(usize) -> f64) -> f64 {
    let mut total = 0.0;
    for (k, (ra, rb)) in a.outer_iter().zip(b.outer_iter()).enumerate() {
        let mut s = 0.0;
        for (x, y) in ra.iter().zip(rb.iter()) {
            s += (x - y) * (x - y);
        }
        total += row_weight(k) * s;
    }
    total
}

fn sq_norm_vec(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += (x - y) * (x - y);
    }
    s
}

fn edge_z(w: &Array2<f64>, edges: &[(usize, usize)]) -> Array2<f64> {
    let d = w.ncols();
    let mut z = Array2::zeros((edges.len(), d));
    for (k, &(i, j)) in edges.iter().enumerate() {
        for c in 0..d {
            z[[k, c]] = 0.5 * (w[[i, c]] + w[[j, c]]);
        }
    }
    z
}

/// `|u - u_ref|^2_H` with
/// `H = Blkdiag[eps I, 2 mu_z I, mu_theta I, (2/mu_z) I, (1/mu_theta) I]`
/// over `u = [w; z; theta; alpha; lambda]`.
pub fn h_norm_distance(
    point: &NetworkPoint,
    reference: &NetworkPoint,
    edges: &[(usize, usize)],
    weights: &HNormWeights,
) -> f64 {
    h_weighted_distance(point, reference, edges, weights, |_| 1.0, |_| 1.0, 1.0)
}

/// `|u - u_ref|^2_{H Omega^{-1}}` for agent-level activation: agent blocks
/// weighted by `1/p_i`, edge blocks (`z` and `alpha`) by
/// `1/(1 - (1-p_i)(1-p_j))` (an edge is touched when either endpoint
/// activates), regularizer blocks by `1/p_l`.
pub fn h_omega_norm_distance(
    point: &NetworkPoint,
    reference: &NetworkPoint,
    edges: &[(usize, usize)],
    weights: &HNormWeights,
    activation: &[f64],
    l_index: usize,
) -> f64 {
    let agent_w = |i: usize| 1.0 / activation[i];
    let edge_w = |k: usize| {
        let (i, j) = edges[k];
        1.0 / (1.0 - (1.0 - activation[i]) * (1.0 - activation[j]))
    };
    h_weighted_distance(point, reference, edges, weights, agent_w, edge_w, 1.0 / activation[l_index])
}

fn h_weighted_distance(
    point: &NetworkPoint,
    reference: &NetworkPoint,
    edges: &[(usize, usize)],
    weights: &HNormWeights,
    agent_weight: impl Fn(usize) -> f64,
    edge_weight: impl Fn(usize) -> f64 + Copy,
    l_weight: f64,
) -> f64 {
    let z = edge_z(&point.w, edges);
    let z_ref = edge_z(&reference.w, edges);
    weights.epsilon * sq_norm_rows_weighted(&point.w, &reference.w, agent_weight)
        + 2.0 * weights.mu_z * sq_norm_rows_weighted(&z, &z_ref, edge_weight)
        + weights.mu_theta * l_weight * sq_norm_vec(&point.theta, &reference.theta)
        + (2.0 / weights.mu_z) * sq_norm_rows_weighted(&point.alpha, &reference.alpha, edge_weight)
        + (1.0 / weights.mu_theta) * l_weight * sq_norm_vec(&point.lambda, &reference.lambda)
}

// ---------------------------------------------------------------------------
// Bound constants, standalone checks, and trajectory monitors
// ---------------------------------------------------------------------------

/// Declared problem and penalty constants feeding every bound.
#[derive(Debug, Clone, Copy)]
pub struct BoundConstants {
    pub m_f: f64,
    pub big_m_f: f64,
    pub mu_z: f64,
    pub mu_theta: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub memory_c: usize,
    pub d_max: usize,
}

impl BoundConstants {
    pub fn from_setup(
        problem: &CompositeProblem,
        graph: &NetworkGraph,
        params: &HyperParams,
    ) -> Result<Self, AnalysisError> {
        let (m_f, big_m_f) = problem
            .agent_curvature_range()
            .ok_or(AnalysisError::MissingCurvatureBounds)?;
        Ok(BoundConstants {
            m_f,
            big_m_f,
            mu_z: params.mu_z,
            mu_theta: params.mu_theta,
            epsilon: params.epsilon,
            gamma: params.gamma,
            memory_c: params.memory,
            d_max: graph.max_degree(),
        })
    }

    /// Lower pair-ratio bound `m_f + mu_z + epsilon`.
    pub fn pair_lower_bound(&self) -> f64 {
        self.m_f + self.mu_z + self.epsilon
    }

    /// Upper pair-ratio bound with the degree-tight constant
    /// `M_f + d_max mu_z + epsilon + mu_theta`.
    pub fn pair_upper_bound(&self) -> f64 {
        self.big_m_f + self.d_max as f64 * self.mu_z + self.epsilon + self.mu_theta
    }

    /// Trace bound on the curvature estimate seeded at `gamma_hessian`.
    pub fn trace_bound(&self, gamma_hessian: f64) -> f64 {
        gamma_hessian + self.memory_c as f64 * self.pair_upper_bound()
    }

    /// Uniform bound on `|H^t - H^{t+1}|` for the constant seed.
    pub fn tau_uniform_bound(&self) -> f64 {
        2.0 * self.trace_bound(self.gamma)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvariantRow {
    pub check: String,
    pub iteration: usize,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InvariantReport {
    pub rows: Vec<InvariantRow>,
}

impl InvariantReport {
    pub fn push(&mut self, row: InvariantRow) {
        self.rows.push(row);
    }

    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn first_failure(&self) -> Option<&InvariantRow> {
        self.rows.iter().find(|r| !r.pass)
    }

    /// (pass, total) per check name.
    pub fn pass_counts(&self) -> BTreeMap<String, (usize, usize)> {
        let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for r in &self.rows {
            let entry = out.entry(r.check.clone()).or_insert((0, 0));
            entry.1 += 1;
            if r.pass {
                entry.0 += 1;
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,iteration,measured,bound,pass\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.check, r.iteration, r.measured, r.bound, r.pass
            ));
        }
        out
    }
}

/// Relative slack for floating-point comparisons of analytically tight
/// inequalities.
const CHECK_SLACK: f64 = 1e-9;

fn bounded_above(check: &str, iteration: usize, measured: f64, bound: f64) -> InvariantRow {
    InvariantRow {
        check: check.to_string(),
        iteration,
        measured,
        bound,
        pass: measured <= bound * (1.0 + CHECK_SLACK) + 1e-12,
    }
}

fn bounded_below(check: &str, iteration: usize, measured: f64, bound: f64) -> InvariantRow {
    InvariantRow {
        check: check.to_string(),
        iteration,
        measured,
        bound,
        pass: measured >= bound * (1.0 - CHECK_SLACK) - 1e-12,
    }
}

/// Pair-ratio sandwich `m_f + mu_z + eps <= |q|^2/<q,s> <= M_f + d_max mu_z
/// + eps + mu_theta` for a stored pair.
///
/// `noise` widens both bounds; trajectory monitors pass the cancellation
/// error of the gradient difference (tiny steps lose significance), direct
/// checks pass 0.
pub fn check_pair_bounds(
    s: ArrayView1<'_, f64>,
    q: ArrayView1<'_, f64>,
    constants: &BoundConstants,
    iteration: usize,
    noise: f64,
) -> Vec<InvariantRow> {
    let ratio = q.dot(&q) / q.dot(&s);
    vec![
        bounded_below("pair_ratio_lower", iteration, ratio, constants.pair_lower_bound() - noise),
        bounded_above("pair_ratio_upper", iteration, ratio, constants.pair_upper_bound() + noise),
    ]
}

/// Spectral-norm bound on a dense curvature estimate seeded at
/// `gamma_hessian`.
pub fn check_trace_bound(
    h_dense: &Array2<f64>,
    gamma_hessian: f64,
    constants: &BoundConstants,
    iteration: usize,
) -> InvariantRow {
    let norm = linalg::sym_spectral_norm(h_dense);
    bounded_above("estimate_norm", iteration, norm, constants.trace_bound(gamma_hessian))
}

/// Quasi-Newton substitution error bound: `|e^t| <= tau^t |w^{t+1} - w^t|`
/// with `tau^t = |H^t - H^{t+1}|`, plus the uniform tau bound.
///
/// `noise` absorbs the cancellation error in the measured `|e^t|`.
pub fn check_error_bound(
    error_norm: f64,
    step_norm: f64,
    tau: f64,
    tau_uniform_bound: f64,
    iteration: usize,
    noise: f64,
) -> Vec<InvariantRow> {
    vec![
        InvariantRow {
            check: "substitution_error".to_string(),
            iteration,
            measured: error_norm,
            bound: tau * step_norm,
            pass: error_norm <= tau * step_norm * (1.0 + CHECK_SLACK) + noise + 1e-12,
        },
        bounded_above("estimate_drift_uniform", iteration, tau, tau_uniform_bound),
    ]
}

/// Which invariant monitors run during a trajectory sweep.
#[derive(Debug, Clone, Copy)]
pub struct MonitorConfig {
    /// Incremental shadow-dual identity; meaningful on synchronous
    /// schedules only.
    pub dual_identity: bool,
    /// `sum_i phi_i = 0`; holds on every schedule.
    pub phi_sum: bool,
    pub error_bound: bool,
    pub pair_bounds: bool,
    pub trace_bound: bool,
    pub dual_monotonicity: bool,
}

impl MonitorConfig {
    pub fn all() -> Self {
        MonitorConfig {
            dual_identity: true,
            phi_sum: true,
            error_bound: true,
            pair_bounds: true,
            trace_bound: true,
            dual_monotonicity: true,
        }
    }

    /// Everything except the sync-only dual identity.
    pub fn async_safe() -> Self {
        MonitorConfig { dual_identity: false, ..Self::all() }
    }
}

struct IterationSnapshot {
    w: Array2<f64>,
    grads: Array2<f64>,
    h_dense: Vec<Array2<f64>>,
    gamma_hessian: Vec<f64>,
    theta: Array1<f64>,
    lambda: Array1<f64>,
}

/// Trajectory monitor verifying the analysis bounds along an engine run.
///
/// Requires `dim <= 64` (dense estimates are materialized per agent per
/// iteration). Attach via [`Engine::run`] and collect the report afterwards.
///
/// The exact-arithmetic bounds of the analysis do not survive cancellation
/// in the gradient differences once steps shrink toward machine precision;
/// the stored pairs themselves carry that error. The monitor therefore
/// mirrors each agent's pair ring and widens the curvature-norm bounds by
/// the accumulated measurement noise of the stored pairs.
pub struct InvariantMonitors {
    constants: BoundConstants,
    config: MonitorConfig,
    shadow: ShadowDual,
    pre: Option<IterationSnapshot>,
    /// Per-agent cancellation noise of the currently stored pairs.
    noise_rings: Vec<std::collections::VecDeque<f64>>,
    pub report: InvariantReport,
}

impl InvariantMonitors {
    pub fn new(
        problem: &CompositeProblem,
        graph: &NetworkGraph,
        inc: &IncidenceSet,
        params: &HyperParams,
        config: MonitorConfig,
    ) -> Result<Self, AnalysisError> {
        if problem.dim() > DENSE_MONITOR_DIM_CAP {
            return Err(AnalysisError::DimensionTooLarge {
                dim: problem.dim(),
                cap: DENSE_MONITOR_DIM_CAP,
            });
        }
        Ok(InvariantMonitors {
            constants: BoundConstants::from_setup(problem, graph, params)?,
            config,
            shadow: ShadowDual::new(inc, problem.dim(), params.mu_z),
            pre: None,
            noise_rings: vec![std::collections::VecDeque::new(); graph.agent_count()],
            report: InvariantReport::default(),
        })
    }

    /// Curvature-norm bound for one agent: seed plus per-pair ratio bounds,
    /// each widened by that pair's recorded measurement noise.
    fn ring_norm_bound(&self, agent: usize, gamma_hessian: f64) -> f64 {
        let per_pair = self.constants.pair_upper_bound();
        gamma_hessian
            + self.noise_rings[agent]
                .iter()
                .map(|noise| per_pair + noise)
                .sum::<f64>()
    }

    pub fn into_report(self) -> InvariantReport {
        self.report
    }

    fn snapshot(&self, engine: &Engine<'_>) -> IterationSnapshot {
        let d = engine.dim();
        let m = engine.agents().len();
        let mut grads = Array2::zeros((m, d));
        let mut h_dense = Vec::with_capacity(m);
        let mut gamma_hessian = Vec::with_capacity(m);
        for (i, agent) in engine.agents().iter().enumerate() {
            let g = engine.problem().costs[i].gradient(agent.w.view());
            for k in 0..d {
                grads[[i, k]] = g[k];
            }
            let scale = engine.init_scale(i);
            let inv = dense_inverse_oracle(&agent.memory, scale, d);
            let h = linalg::invert_spd(&inv)
                .expect("guarded curvature memory yields an SPD inverse estimate");
            h_dense.push(h);
            gamma_hessian.push(1.0 / scale);
        }
        IterationSnapshot {
            w: w_stack(engine),
            grads,
            h_dense,
            gamma_hessian,
            theta: engine.theta().clone(),
            lambda: engine.lambda().clone(),
        }
    }
}

impl EngineObserver for InvariantMonitors {
    fn before_iteration(&mut self, engine: &Engine<'_>, _iter: usize) {
        self.pre = Some(self.snapshot(engine));
    }

    fn after_iteration(&mut self, engine: &Engine<'_>, iter: usize) {
        let pre = self.pre.take().expect("before_iteration ran");
        let post = self.snapshot(engine);
        let d = engine.dim();
        let m = engine.agents().len();
        let cst = self.constants;

        // Per-agent step, recomputed pair, and the cancellation noise the
        // gradient difference carries relative to the step length.
        struct StepInfo {
            s: Array1<f64>,
            q: Array1<f64>,
            s_norm: f64,
            noise: f64,
            stored: bool,
        }
        let steps: Vec<StepInfo> = (0..m)
            .map(|i| {
                let coeff = engine.pair_coefficient(i);
                let mut s = Array1::<f64>::zeros(d);
                let mut q = Array1::<f64>::zeros(d);
                let mut grad_scale = 0.0;
                for k in 0..d {
                    s[k] = post.w[[i, k]] - pre.w[[i, k]];
                    q[k] = post.grads[[i, k]] - pre.grads[[i, k]] + coeff * s[k];
                    grad_scale += pre.grads[[i, k]].abs() + post.grads[[i, k]].abs();
                }
                let s_norm = s.dot(&s).sqrt();
                let noise = if s_norm > 0.0 {
                    1e-13 * (1.0 + grad_scale) / s_norm
                } else {
                    0.0
                };
                // mirror the engine's curvature guard decision
                let sq = s.dot(&q);
                let q_norm = q.dot(&q).sqrt();
                let stored = s_norm > 0.0 && sq > crate::lbfgs::CURVATURE_GUARD * s_norm * q_norm;
                StepInfo { s, q, s_norm, noise, stored }
            })
            .collect();

        if self.config.dual_identity {
            self.shadow.update(&post.w);
            let gap = self.shadow.identity_gap(&phi_stack(engine));
            self.report.push(bounded_above("dual_identity", iter, gap, 1e-10));
        }

        if self.config.phi_sum {
            let phi = phi_stack(engine);
            let mut sum_norm = 0.0f64;
            for k in 0..d {
                sum_norm = sum_norm.max(phi.column(k).sum().abs());
            }
            self.report.push(bounded_above("dual_sum_zero", iter, sum_norm, 1e-10));
        }

        if self.config.pair_bounds {
            for info in steps.iter().filter(|s| s.s_norm > 0.0) {
                for row in check_pair_bounds(info.s.view(), info.q.view(), &cst, iter, info.noise)
                {
                    self.report.push(row);
                }
            }
        }

        // The estimate-norm bound applies to the estimate used at iteration t,
        // i.e. the pre snapshot against the pre-tick ring contents.
        if self.config.trace_bound {
            let mut worst_norm = 0.0f64;
            let mut worst_bound = 0.0f64;
            let mut pass = true;
            for i in 0..m {
                let norm = linalg::sym_spectral_norm(&pre.h_dense[i]);
                let bound = self.ring_norm_bound(i, pre.gamma_hessian[i]);
                if norm > bound * (1.0 + CHECK_SLACK) + 1e-12 {
                    pass = false;
                }
                if norm > worst_norm {
                    worst_norm = norm;
                    worst_bound = bound;
                }
            }
            self.report.push(InvariantRow {
                check: "estimate_norm".to_string(),
                iteration: iter,
                measured: worst_norm,
                bound: worst_bound,
                pass,
            });
        }

        let bound_pre = (0..m)
            .map(|i| self.ring_norm_bound(i, pre.gamma_hessian[i]))
            .fold(0.0f64, f64::max);
        if cst.memory_c > 0 {
            for (i, info) in steps.iter().enumerate() {
                if info.stored {
                    if self.noise_rings[i].len() == cst.memory_c {
                        self.noise_rings[i].pop_front();
                    }
                    self.noise_rings[i].push_back(info.noise);
                }
            }
        }
        let bound_post = (0..m)
            .map(|i| self.ring_norm_bound(i, post.gamma_hessian[i]))
            .fold(0.0f64, f64::max);

        if self.config.error_bound {
            if cst.memory_c == 0 {
                // pure scaled gradient: estimates identical between steps
                let mut tau = 0.0f64;
                for i in 0..m {
                    let diff = &pre.h_dense[i] - &post.h_dense[i];
                    tau = tau.max(linalg::sym_spectral_norm(&diff));
                }
                self.report.push(bounded_above("estimate_drift_zero", iter, tau, 0.0));
            } else {
                let mut err_sq = 0.0;
                let mut step_sq = 0.0;
                let mut tau = 0.0f64;
                let mut grad_scale = 0.0;
                for (i, info) in steps.iter().enumerate() {
                    let coeff = engine.pair_coefficient(i);
                    let mut e = pre.h_dense[i].dot(&info.s);
                    for k in 0..d {
                        e[k] += pre.grads[[i, k]] - post.grads[[i, k]] - coeff * info.s[k];
                        grad_scale += pre.grads[[i, k]].abs() + post.grads[[i, k]].abs();
                    }
                    err_sq += e.dot(&e);
                    step_sq += info.s_norm * info.s_norm;
                    let diff = &pre.h_dense[i] - &post.h_dense[i];
                    tau = tau.max(linalg::sym_spectral_norm(&diff));
                }
                // |H^t - H^{t+1}| <= |H^t| + |H^{t+1}| with the
                // noise-propagated per-ring norm bounds
                let uniform = bound_pre + bound_post;
                let noise = 1e-13 * (1.0 + grad_scale);
                for row in
                    check_error_bound(err_sq.sqrt(), step_sq.sqrt(), tau, uniform, iter, noise)
                {
                    self.report.push(row);
                }
            }
        }

        if self.config.dual_monotonicity {
            let dl = &post.lambda - &pre.lambda;
            let dt = &post.theta - &pre.theta;
            self.report.push(bounded_below("dual_prox_monotonicity", iter, dl.dot(&dt), -1e-12));
        }
    }
}

// ---------------------------------------------------------------------------
// Lyapunov tracking
// ---------------------------------------------------------------------------

/// How the edge dual is obtained for joint-state distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    /// Incremental shadow (exact on synchronous runs).
    SyncShadow,
    /// Least-squares reconstruction from `phi` (works on any schedule).
    LeastSquares,
}

/// Records `|u^t - u*|^2_H` (and optionally the activation-weighted variant)
/// along a run.
pub struct LyapunovTracker {
    reference_point: NetworkPoint,
    edges: Vec<(usize, usize)>,
    weights: HNormWeights,
    mode: AlphaMode,
    shadow: ShadowDual,
    reconstructor: DualReconstructor,
    track_omega: bool,
    pub h_history: Vec<f64>,
    pub h_omega_history: Vec<f64>,
}

impl LyapunovTracker {
    pub fn new(
        reference: &ReferenceSolution,
        graph: &NetworkGraph,
        inc: &IncidenceSet,
        params: &HyperParams,
        mode: AlphaMode,
        track_omega: bool,
    ) -> Self {
        LyapunovTracker {
            reference_point: reference_point(reference, graph.agent_count()),
            edges: graph.edges().to_vec(),
            weights: HNormWeights::from_params(params),
            mode,
            shadow: ShadowDual::new(inc, reference.w_star.len(), params.mu_z),
            reconstructor: DualReconstructor::new(inc),
            track_omega,
            h_history: Vec::new(),
            h_omega_history: Vec::new(),
        }
    }

    fn alpha(&self, engine: &Engine<'_>) -> Array2<f64> {
        match self.mode {
            AlphaMode::SyncShadow => self.shadow.alpha.clone(),
            AlphaMode::LeastSquares => self.reconstructor.reconstruct(&phi_stack(engine)),
        }
    }

    fn record(&mut self, engine: &Engine<'_>) {
        let point = engine_point(engine, self.alpha(engine));
        self.h_history.push(h_norm_distance(
            &point,
            &self.reference_point,
            &self.edges,
            &self.weights,
        ));
        if self.track_omega {
            self.h_omega_history.push(h_omega_norm_distance(
                &point,
                &self.reference_point,
                &self.edges,
                &self.weights,
                &engine.params().activation,
                engine.params().l_index,
            ));
        }
    }
}

impl EngineObserver for LyapunovTracker {
    fn before_iteration(&mut self, engine: &Engine<'_>, iter: usize) {
        if iter == 0 {
            self.record(engine);
        }
    }

    fn after_iteration(&mut self, engine: &Engine<'_>, _iter: usize) {
        if self.mode == AlphaMode::SyncShadow {
            self.shadow.update(&w_stack(engine));
        }
        self.record(engine);
    }
}

// ---------------------------------------------------------------------------
// Theoretical contraction factor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct DeltaInputs {
    pub constants: BoundConstants,
    pub spectral: SpectralData,
    /// Free parameter of the bound; defaults to twice the positivity
    /// threshold of the first term, `(m_f + M_f)/(m_f M_f)`.
    pub zeta: Option<f64>,
    pub p_min: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DeltaReport {
    pub delta: f64,
    /// Implied per-step factor `1 - delta p_min / (1 + delta)`; 1.0 when the
    /// bound is vacuous.
    pub rate: f64,
    pub vacuous: bool,
    pub terms: [f64; 5],
    pub tau_bound: f64,
    pub zeta: f64,
}

/// Evaluates the five-term contraction factor from the declared constants
/// and graph spectrum, using the uniform (looser) bound on `tau^t`.
pub fn theoretical_delta(inputs: &DeltaInputs) -> DeltaReport {
    let c = &inputs.constants;
    let s = &inputs.spectral;
    let zeta = inputs
        .zeta
        .unwrap_or((c.m_f + c.big_m_f) / (c.m_f * c.big_m_f));
    let tau = c.tau_uniform_bound();
    let sum = c.m_f + c.big_m_f;
    let harmonic = 2.0 * c.m_f * c.big_m_f / sum;
    let terms = [
        (harmonic - 1.0 / zeta) / (c.epsilon + c.mu_theta * (s.sigma_max_lu + 2.0)),
        0.5,
        0.4 * c.mu_theta * s.sigma_min_plus / sum,
        c.mu_theta * s.sigma_min_plus * (c.epsilon - zeta * tau * tau)
            / (5.0 * (tau * tau + c.epsilon * c.epsilon)),
        s.sigma_min_plus / (5.0 * s.sigma_max_lu.max(1.0)),
    ];
    let delta = terms.iter().copied().fold(f64::INFINITY, f64::min);
    let vacuous = !(delta > 0.0);
    let rate = if vacuous {
        1.0
    } else {
        1.0 - delta * inputs.p_min / (1.0 + delta)
    };
    DeltaReport { delta, rate, vacuous, terms, tau_bound: tau, zeta }
}

//! The L-BFGS-ADMM iteration: per-agent state, the update loop, and
//! synchronous / asynchronous execution over a communication graph.
//!
//! An active agent assembles the augmented-Lagrangian gradient block
//!
//! ```text
//! h_i = grad f_i(w_i) + phi_i + (mu_z/2) sum_{j in N_i} (w_i - w_j)
//!       + [i = l] (mu_theta (w_i - theta) + lambda)
//! ```
//!
//! applies the inverse curvature estimate through the two-loop recursion,
//! steps `w_i -= r_i`, accumulates the dual `phi_i` with the new `w_i`
//! (conservative per-edge half-increments, see [`Engine::sync_iteration`]),
//! broadcasts, runs the prox/dual update if it holds the regularizer, and
//! stores the curvature pair
//! `q_i = grad f_i(w_i^+) - grad f_i(w_i) + (mu_z |N_i| + [i=l] mu_theta + eps) s_i`.
//!
//! Synchronous mode uses Jacobi semantics: every agent reads iteration-t
//! values, then updates and broadcasts behind a barrier, which matches the
//! vectorized form of the recursion used by the analysis module. The
//! asynchronous mode runs active agents sequentially against live buffers.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::NetworkGraph;
use crate::lbfgs::{InitMode, LbfgsMemory};
use crate::objective::CompositeProblem;

/// States blow past this norm abort the run; there is no line search, so bad
/// hyperparameters can diverge.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid hyperparameters: {0}")]
    Params(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("run diverged at iteration {at}: {reason}")]
    Diverged {
        at: usize,
        reason: String,
        /// Trace rows recorded before the abort.
        partial: RunTrace,
    },
}

/// Penalties, memory size, and activation probabilities for one experiment.
#[derive(Debug, Clone)]
pub struct HyperParams {
    pub mu_z: f64,
    /// Defaults to `mu_z / 2` in the config layer.
    pub mu_theta: f64,
    /// Regularization added to the curvature-pair coefficient.
    pub epsilon: f64,
    /// Number of stored curvature pairs `c`.
    pub memory: usize,
    /// Constant curvature seed: the estimate starts from `gamma * I`, so the
    /// inverse seed passed to the two-loop recursion is `1/gamma`.
    pub gamma: f64,
    pub init_mode: InitMode,
    /// Agent holding the regularizer.
    pub l_index: usize,
    /// Per-agent activation probabilities for asynchronous runs.
    pub activation: Vec<f64>,
}

impl HyperParams {
    pub fn validate(&self, agent_count: usize) -> Result<(), EngineError> {
        let fail = |msg: String| Err(EngineError::Params(msg));
        if !(self.mu_z > 0.0) {
            return fail(format!("mu_z must be positive, got {}", self.mu_z));
        }
        if !(self.mu_theta > 0.0) {
            return fail(format!("mu_theta must be positive, got {}", self.mu_theta));
        }
        if !(self.epsilon > 0.0) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.gamma > 0.0) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.l_index >= agent_count {
            return fail(format!(
                "l_index {} out of range for {} agents",
                self.l_index, agent_count
            ));
        }
        if self.activation.len() != agent_count {
            return fail(format!(
                "activation has {} entries for {} agents",
                self.activation.len(),
                agent_count
            ));
        }
        for (i, &p) in self.activation.iter().enumerate() {
            if !(p > 0.0 && p <= 1.0) {
                return fail(format!(
                    "activation[{i}] must lie in (0, 1], got {p} (agent {i})"
                ));
            }
        }
        Ok(())
    }

    pub fn p_min(&self) -> f64 {
        self.activation.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// The regularizer-holder's extra state.
#[derive(Debug, Clone)]
pub struct RegularizerState {
    pub theta: Array1<f64>,
    pub lambda: Array1<f64>,
}

/// Per-agent state: primal, dual accumulator, neighbor buffer, curvature
/// memory, activation counter, and pre-step snapshots for pair construction.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub w: Array1<f64>,
    pub phi: Array1<f64>,
    /// Latest received `w_j`, one slot per neighbor (graph order).
    pub buffer: Vec<Array1<f64>>,
    pub memory: LbfgsMemory,
    /// Activation counter.
    pub tau: u64,
    pub prev_w: Array1<f64>,
    pub prev_grad: Array1<f64>,
    /// Present only on the agent holding the regularizer.
    pub regul: Option<RegularizerState>,
}

/// Execution schedule for [`Engine::run`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// All agents every iteration, Jacobi barrier semantics.
    Sync,
    /// Independent Bernoulli activations; active agents run sequentially in
    /// a uniformly shuffled order against live buffers.
    Async,
    /// Async activations with the sync barrier semantics (reads snapshot
    /// buffers, broadcasts deferred). With all probabilities 1 this
    /// reproduces [`Schedule::Sync`] exactly.
    AsyncBarrier,
}

/// One record per iteration (plus the initial state at `iter = 0`).
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iter: usize,
    /// Cumulative broadcast count (one unit per broadcast of one d-vector).
    pub comm: u64,
    /// Composite objective at the network-average iterate.
    pub objective: f64,
    /// Averaged relative cost error; NaN when no reference is available.
    pub rel_error: f64,
    /// `max_{(i,j) in E} |w_i - w_j|`.
    pub consensus_residual: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    /// Curvature pairs rejected by the guard across all agents.
    pub skipped_pairs: u64,
}

impl RunTrace {
    pub const CSV_HEADER: &'static str = "iter,comm,objective,rel_error,consensus_residual";

    pub fn final_row(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Renders the trace; identical runs produce byte-identical output.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iter, r.comm, r.objective, r.rel_error, r.consensus_residual
            ));
        }
        out
    }
}

/// Per-iteration hook for trace enrichment and invariant monitors.
pub trait EngineObserver {
    fn before_iteration(&mut self, _engine: &Engine<'_>, _iter: usize) {}
    fn after_iteration(&mut self, _engine: &Engine<'_>, _iter: usize) {}
}

/// Observer that does nothing.
pub struct NoopObserver;

impl EngineObserver for NoopObserver {}

/// A configured network ready to iterate. State starts at zero.
pub struct Engine<'a> {
    problem: &'a CompositeProblem,
    graph: &'a NetworkGraph,
    params: HyperParams,
    agents: Vec<AgentState>,
    /// For sender i: `(receiver, slot of i in receiver's buffer)`.
    routes: Vec<Vec<(usize, usize)>>,
    comm_count: u64,
}

impl<'a> Engine<'a> {
    pub fn new(
        problem: &'a CompositeProblem,
        graph: &'a NetworkGraph,
        params: HyperParams,
    ) -> Result<Self, EngineError> {
        let m = graph.agent_count();
        if problem.agent_count() != m {
            return Err(EngineError::Dimension(format!(
                "{} local costs for {} agents",
                problem.agent_count(),
                m
            )));
        }
        params.validate(m)?;
        let d = problem.dim();

        let agents = (0..m)
            .map(|i| AgentState {
                w: Array1::zeros(d),
                phi: Array1::zeros(d),
                buffer: vec![Array1::zeros(d); graph.degree(i)],
                memory: LbfgsMemory::new(params.memory),
                tau: 0,
                prev_w: Array1::zeros(d),
                prev_grad: Array1::zeros(d),
                regul: (i == params.l_index).then(|| RegularizerState {
                    theta: Array1::zeros(d),
                    lambda: Array1::zeros(d),
                }),
            })
            .collect();

        let mut routes = vec![Vec::new(); m];
        for j in 0..m {
            for (slot, &i) in graph.neighbors(j).iter().enumerate() {
                routes[i].push((j, slot));
            }
        }

        Ok(Engine { problem, graph, params, agents, routes, comm_count: 0 })
    }

    pub fn problem(&self) -> &CompositeProblem {
        self.problem
    }

    pub fn graph(&self) -> &NetworkGraph {
        self.graph
    }

    pub fn params(&self) -> &HyperParams {
        &self.params
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn comm_count(&self) -> u64 {
        self.comm_count
    }

    pub fn dim(&self) -> usize {
        self.problem.dim()
    }

    /// Theta held by agent l.
    pub fn theta(&self) -> &Array1<f64> {
        &self.agents[self.params.l_index].regul.as_ref().unwrap().theta
    }

    /// Lambda held by agent l.
    pub fn lambda(&self) -> &Array1<f64> {
        &self.agents[self.params.l_index].regul.as_ref().unwrap().lambda
    }

    pub fn total_skipped_pairs(&self) -> u64 {
        self.agents.iter().map(|a| a.memory.skipped_count()).sum()
    }

    /// Curvature-pair coefficient `mu_z |N_i| + [i=l] mu_theta + epsilon`.
    pub fn pair_coefficient(&self, i: usize) -> f64 {
        let delta = if i == self.params.l_index { self.params.mu_theta } else { 0.0 };
        self.params.mu_z * self.graph.degree(i) as f64 + delta + self.params.epsilon
    }

    /// Inverse seed handed to the two-loop recursion for agent `i`.
    ///
    /// The constant mode seeds the curvature estimate at `gamma * I`, so the
    /// inverse seed is `1/gamma`; the adaptive mode rescales from the
    /// agent's own latest pair at each activation and falls back to the
    /// constant seed while the memory is empty.
    pub fn init_scale(&self, i: usize) -> f64 {
        match self.params.init_mode {
            InitMode::Constant => 1.0 / self.params.gamma,
            InitMode::Adaptive => self.agents[i]
                .memory
                .adaptive_scale()
                .unwrap_or(1.0 / self.params.gamma),
        }
    }

    /// The gradient block `h_i` of the augmented Lagrangian at agent `i`,
    /// read against the current buffer contents.
    pub fn local_gradient(&self, i: usize) -> Array1<f64> {
        self.gradient_parts(i).1
    }

    /// `(grad f_i(w_i), h_i)` so the primal step reuses the cost gradient.
    fn gradient_parts(&self, i: usize) -> (Array1<f64>, Array1<f64>) {
        let agent = &self.agents[i];
        let grad_f = self.problem.costs[i].gradient(agent.w.view());
        let mut h = grad_f.clone() + &agent.phi;
        let half_mu_z = 0.5 * self.params.mu_z;
        for neighbor_w in &agent.buffer {
            h.scaled_add(half_mu_z, &agent.w);
            h.scaled_add(-half_mu_z, neighbor_w);
        }
        if let Some(reg) = &agent.regul {
            // mu_theta (w - theta) + lambda
            h.scaled_add(self.params.mu_theta, &agent.w);
            h.scaled_add(-self.params.mu_theta, &reg.theta);
            h += &reg.lambda;
        }
        (grad_f, h)
    }

    /// Primal step: snapshot, two-loop direction, `w_i -= r_i`.
    fn phase_w(&mut self, i: usize) {
        let (grad_f, h) = self.gradient_parts(i);
        let r = self.agents[i].memory.two_loop(h.view(), self.init_scale(i));
        let agent = &mut self.agents[i];
        agent.prev_w = agent.w.clone();
        agent.prev_grad = grad_f;
        agent.w -= &r;
    }

    /// Dual accumulator update with the new `w_i` and buffered neighbors.
    ///
    /// Every incident edge receives a conservative half-increment: the
    /// active agent adds `(mu_z/4)(w_i - w_j)` to its own `phi_i` and the
    /// neighbor absorbs the exact opposite. Over one synchronous round the
    /// two halves of each edge sum to the `(mu_z/2) L_s w` block update;
    /// the split keeps `sum_i phi_i = 0` on any activation schedule, which
    /// pins the asynchronous fixed point to the true optimum (a one-sided
    /// accumulator freezes transient dual drift into the solution).
    fn phase_phi(&mut self, i: usize) {
        let graph = self.graph;
        let quarter_mu_z = 0.25 * self.params.mu_z;
        for (slot, &j) in graph.neighbors(i).iter().enumerate() {
            let delta = (&self.agents[i].w - &self.agents[i].buffer[slot]) * quarter_mu_z;
            self.agents[i].phi += &delta;
            self.agents[j].phi -= &delta;
        }
    }

    /// Prox step and dual ascent on the regularizer holder.
    fn phase_regularizer(&mut self, i: usize) {
        let mu_theta = self.params.mu_theta;
        let agent = &mut self.agents[i];
        let Some(reg) = agent.regul.as_mut() else { return };
        let v = &agent.w + &(&reg.lambda / mu_theta);
        reg.theta = self.problem.regularizer.prox(v.view(), mu_theta);
        let residual = &agent.w - &reg.theta;
        reg.lambda.scaled_add(mu_theta, &residual);
    }

    /// Builds and stores the curvature pair for this activation.
    fn phase_pair(&mut self, i: usize) {
        let coeff = self.pair_coefficient(i);
        let grad_new = self.problem.costs[i].gradient(self.agents[i].w.view());
        let agent = &mut self.agents[i];
        let s = &agent.w - &agent.prev_w;
        let mut q = grad_new - &agent.prev_grad;
        q.scaled_add(coeff, &s);
        agent.memory.push_pair(s, q);
        agent.tau += 1;
    }

    /// Sends the current `w_i` to every neighbor's buffer; one comm unit.
    fn broadcast(&mut self, i: usize) {
        let w = self.agents[i].w.clone();
        for &(j, slot) in &self.routes[i].clone() {
            self.agents[j].buffer[slot] = w.clone();
        }
        self.comm_count += 1;
    }

    /// Runs the dual/prox/pair phases for one agent after its w update.
    fn finish_agent(&mut self, i: usize) {
        self.phase_phi(i);
        self.phase_regularizer(i);
        self.phase_pair(i);
    }

    /// One synchronous (Jacobi) iteration over all agents.
    pub fn sync_iteration(&mut self) {
        let m = self.graph.agent_count();
        self.barrier_iteration(&(0..m).collect::<Vec<_>>());
    }

    /// Barrier-semantics tick over an active subset: all primal steps read
    /// iteration-t values, then all broadcasts, then all dual updates.
    /// Processing order is normalized (it has no meaning behind a barrier),
    /// so a full activation reproduces [`Self::sync_iteration`] bit-exactly.
    fn barrier_iteration(&mut self, active: &[usize]) {
        let mut active = active.to_vec();
        active.sort_unstable();
        for &i in &active {
            self.phase_w(i);
        }
        for &i in &active {
            self.broadcast(i);
        }
        for &i in &active {
            self.finish_agent(i);
        }
    }

    /// One asynchronous tick: independent Bernoulli activations, sequential
    /// processing in a uniformly shuffled order against live buffers, so a
    /// later agent may already observe a same-tick broadcast.
    pub fn async_iteration<R: Rng>(&mut self, rng: &mut R) {
        let active = self.draw_active(rng);
        for &i in &active {
            self.phase_w(i);
            self.phase_phi(i);
            self.broadcast(i);
            self.phase_regularizer(i);
            self.phase_pair(i);
        }
    }

    /// Async activations with barrier semantics; test path for the schedule
    /// degeneracy against [`Self::sync_iteration`].
    pub fn async_barrier_iteration<R: Rng>(&mut self, rng: &mut R) {
        let active = self.draw_active(rng);
        self.barrier_iteration(&active);
    }

    fn draw_active<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        // gen::<f64>() lies in [0, 1), so p = 1 is always active
        let mut active: Vec<usize> = (0..self.graph.agent_count())
            .filter(|&i| rng.gen::<f64>() < self.params.activation[i])
            .collect();
        active.shuffle(rng);
        active
    }

    fn mean_objective(&self) -> f64 {
        let m = self.agents.len() as f64;
        self.agents
            .iter()
            .map(|a| self.problem.objective(a.w.view()))
            .sum::<f64>()
            / m
    }

    /// `max_{(i,j) in E} |w_i - w_j|_2`.
    pub fn consensus_residual(&self) -> f64 {
        self.graph
            .edges()
            .iter()
            .map(|&(i, j)| {
                let diff = &self.agents[i].w - &self.agents[j].w;
                diff.dot(&diff).sqrt()
            })
            .fold(0.0, f64::max)
    }

    fn mean_w(&self) -> Array1<f64> {
        let mut mean = Array1::<f64>::zeros(self.dim());
        for a in &self.agents {
            mean += &a.w;
        }
        mean / self.agents.len() as f64
    }

    fn state_check(&self) -> Result<(), String> {
        for (i, a) in self.agents.iter().enumerate() {
            if a.w.iter().any(|v| !v.is_finite()) || a.phi.iter().any(|v| !v.is_finite()) {
                return Err(format!("non-finite state at agent {i}"));
            }
            let norm = a.w.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
            if norm > DIVERGENCE_LIMIT {
                return Err(format!("|w_{i}| exceeded {DIVERGENCE_LIMIT:e}"));
            }
            if let Some(reg) = &a.regul {
                if reg.theta.iter().any(|v| !v.is_finite())
                    || reg.lambda.iter().any(|v| !v.is_finite())
                {
                    return Err(format!("non-finite regularizer state at agent {i}"));
                }
            }
        }
        Ok(())
    }

    fn trace_row(&self, iter: usize, initial_gap: Option<f64>, objective_star: Option<f64>) -> TraceRow {
        let mean_cost = self
            .agents
            .iter()
            .map(|a| self.problem.objective(a.w.view()))
            .sum::<f64>()
            / self.agents.len() as f64;
        let rel_error = match (objective_star, initial_gap) {
            (Some(star), Some(gap0)) => crate::analysis::relative_error(mean_cost, gap0 + star, star),
            _ => f64::NAN,
        };
        TraceRow {
            iter,
            comm: self.comm_count,
            objective: self.problem.objective(self.mean_w().view()),
            rel_error,
            consensus_residual: self.consensus_residual(),
        }
    }

    /// Executes `iterations` ticks of the given schedule, recording one trace
    /// row per tick after an initial row. `objective_star` enables the
    /// relative-error column. Aborts with the partial trace on non-finite or
    /// diverging state.
    pub fn run(
        &mut self,
        schedule: Schedule,
        iterations: usize,
        seed: u64,
        objective_star: Option<f64>,
        observer: &mut dyn EngineObserver,
    ) -> Result<RunTrace, EngineError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let initial_gap = objective_star.map(|star| self.mean_objective() - star);
        let mut trace = RunTrace::default();
        trace.rows.push(self.trace_row(0, initial_gap, objective_star));

        for t in 0..iterations {
            observer.before_iteration(self, t);
            match schedule {
                Schedule::Sync => self.sync_iteration(),
                Schedule::Async => self.async_iteration(&mut rng),
                Schedule::AsyncBarrier => self.async_barrier_iteration(&mut rng),
            }
            observer.after_iteration(self, t);
            trace.rows.push(self.trace_row(t + 1, initial_gap, objective_star));
            if let Err(reason) = self.state_check() {
                trace.skipped_pairs = self.total_skipped_pairs();
                return Err(EngineError::Diverged { at: t, reason, partial: trace });
            }
        }
        trace.skipped_pairs = self.total_skipped_pairs();
        Ok(trace)
    }
}

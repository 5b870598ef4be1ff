//! Communication topology: undirected graphs, incidence/Laplacian matrices,
//! and the spectral quantities used by the convergence analysis.
//!
//! Edge `k = (i, j)` is stored with `i < j`; the lower-index endpoint is the
//! source row of `a_s`. All matrices are kept in exact integer arithmetic;
//! Kronecker factors with the identity are never materialized — consumers
//! operate blockwise per coordinate.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph needs at least one agent")]
    Empty,
    #[error("self-loop at agent {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("edge endpoint {agent} out of range for {m} agents")]
    EndpointOutOfRange { agent: usize, m: usize },
    #[error("graph is disconnected; component reachable from agent 0: {component:?}")]
    Disconnected { component: Vec<usize> },
    #[error("regularizer holder {l_index} out of range for {m} agents")]
    InvalidLIndex { l_index: usize, m: usize },
    #[error("could not sample a connected Erdos-Renyi graph in {0} attempts")]
    SamplingFailed(usize),
}

/// Undirected communication graph over agents `0..m`.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    m: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl NetworkGraph {
    /// Validates and builds a graph from an explicit edge list.
    ///
    /// Edges are normalized to `(min, max)` order and sorted. Rejects
    /// self-loops, duplicates, out-of-range endpoints, and disconnected
    /// graphs (the error carries the component reachable from agent 0).
    pub fn from_edges(m: usize, raw_edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if m == 0 {
            return Err(GraphError::Empty);
        }
        let mut edges = Vec::with_capacity(raw_edges.len());
        for &(a, b) in raw_edges {
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            let agent = a.max(b);
            if agent >= m {
                return Err(GraphError::EndpointOutOfRange { agent, m });
            }
            edges.push((a.min(b), a.max(b)));
        }
        edges.sort_unstable();
        if let Some(w) = edges.windows(2).find(|w| w[0] == w[1]) {
            return Err(GraphError::DuplicateEdge(w[0].0, w[0].1));
        }

        let mut neighbors = vec![Vec::new(); m];
        for &(i, j) in &edges {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        let g = NetworkGraph { m, edges, neighbors };
        let component = g.component_of(0);
        if component.len() != m {
            return Err(GraphError::Disconnected { component });
        }
        Ok(g)
    }

    /// Path graph 0-1-...-(m-1).
    pub fn path(m: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..m).map(|i| (i - 1, i)).collect();
        Self::from_edges(m, &edges)
    }

    /// Cycle graph; falls back to a path below 3 agents.
    pub fn ring(m: usize) -> Result<Self, GraphError> {
        let mut edges: Vec<_> = (1..m).map(|i| (i - 1, i)).collect();
        if m >= 3 {
            edges.push((0, m - 1));
        }
        Self::from_edges(m, &edges)
    }

    pub fn complete(m: usize) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        for i in 0..m {
            for j in (i + 1)..m {
                edges.push((i, j));
            }
        }
        Self::from_edges(m, &edges)
    }

    /// Erdos-Renyi G(m, p), resampled until connected (bounded retries).
    pub fn erdos_renyi(m: usize, p: f64, seed: u64) -> Result<Self, GraphError> {
        const MAX_ATTEMPTS: usize = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_ATTEMPTS {
            let mut edges = Vec::new();
            for i in 0..m {
                for j in (i + 1)..m {
                    if rng.gen::<f64>() < p {
                        edges.push((i, j));
                    }
                }
            }
            match Self::from_edges(m, &edges) {
                Ok(g) => return Ok(g),
                Err(GraphError::Disconnected { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(GraphError::SamplingFailed(MAX_ATTEMPTS))
    }

    pub fn agent_count(&self) -> usize {
        self.m
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as (source, destination) with source < destination.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, agent: usize) -> &[usize] {
        &self.neighbors[agent]
    }

    pub fn degree(&self, agent: usize) -> usize {
        self.neighbors[agent].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn component_of(&self, start: usize) -> Vec<usize> {
        let mut seen = vec![false; self.m];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            for &u in &self.neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        (0..self.m).filter(|&v| seen[v]).collect()
    }
}

/// Incidence and Laplacian matrices of a graph, in exact integer arithmetic.
///
/// Row `k` of `a_s`/`a_d` selects the source/destination endpoint of edge `k`;
/// `e_s = a_s - a_d`, `e_u = a_s + a_d`, `l_s = e_s^T e_s` (the graph
/// Laplacian), `l_u = e_u^T e_u`, and the degrees satisfy
/// `degree = (l_s + l_u) / 2` exactly.
#[derive(Debug, Clone)]
pub struct IncidenceSet {
    pub a_s: Array2<i64>,
    pub a_d: Array2<i64>,
    pub e_s: Array2<i64>,
    pub e_u: Array2<i64>,
    pub l_s: Array2<i64>,
    pub l_u: Array2<i64>,
    /// Diagonal of the degree matrix.
    pub degree: Array1<i64>,
    /// Agent holding the nonsmooth regularizer.
    pub l_index: usize,
}

/// Builds the incidence set for a validated graph.
///
/// Disconnected graphs are rejected upstream by [`NetworkGraph::from_edges`];
/// here only `l_index` needs checking.
pub fn build_incidence(g: &NetworkGraph, l_index: usize) -> Result<IncidenceSet, GraphError> {
    let (m, n) = (g.agent_count(), g.edge_count());
    if l_index >= m {
        return Err(GraphError::InvalidLIndex { l_index, m });
    }
    let mut a_s = Array2::<i64>::zeros((n, m));
    let mut a_d = Array2::<i64>::zeros((n, m));
    for (k, &(i, j)) in g.edges().iter().enumerate() {
        a_s[[k, i]] = 1;
        a_d[[k, j]] = 1;
    }
    let e_s = &a_s - &a_d;
    let e_u = &a_s + &a_d;
    let l_s = e_s.t().dot(&e_s);
    let l_u = e_u.t().dot(&e_u);
    let degree = Array1::from_iter((0..m).map(|i| g.degree(i) as i64));
    Ok(IncidenceSet { a_s, a_d, e_s, e_u, l_s, l_u, degree, l_index })
}

impl IncidenceSet {
    pub fn agent_count(&self) -> usize {
        self.l_s.nrows()
    }

    pub fn edge_count(&self) -> usize {
        self.a_s.nrows()
    }

    pub fn e_s_f64(&self) -> Array2<f64> {
        self.e_s.mapv(|v| v as f64)
    }

    pub fn e_u_f64(&self) -> Array2<f64> {
        self.e_u.mapv(|v| v as f64)
    }

    pub fn l_s_f64(&self) -> Array2<f64> {
        self.l_s.mapv(|v| v as f64)
    }

    pub fn l_u_f64(&self) -> Array2<f64> {
        self.l_u.mapv(|v| v as f64)
    }
}

/// Eigenvalue threshold below which a value counts as zero; desk-scale
/// matrices are well conditioned.
pub const EIGEN_ZERO_TOL: f64 = 1e-9;

/// Extreme eigenvalues entering the contraction-factor formula.
#[derive(Debug, Clone, Copy)]
pub struct SpectralData {
    /// Smallest positive eigenvalue of `[E_s; S^T][E_s^T  S]`.
    pub sigma_min_plus: f64,
    /// Largest eigenvalue of the unsigned Laplacian `l_u`.
    pub sigma_max_lu: f64,
    /// Smallest eigenvalue of `l_u`.
    pub sigma_min_lu: f64,
}

/// Dense symmetric eigensolves for the analysis constants.
///
/// The positive spectrum of `C C^T` with `C = [e_s; s_l^T]` equals that of
/// `C^T C = l_s + s_l s_l^T` (m x m), which is what gets decomposed; zero
/// eigenvalues below [`EIGEN_ZERO_TOL`] are excluded from `sigma_min_plus`.
pub fn spectral_quantities(inc: &IncidenceSet) -> SpectralData {
    let m = inc.agent_count();
    let mut ctc = inc.l_s_f64();
    ctc[[inc.l_index, inc.l_index]] += 1.0;
    let eigs = linalg::sym_eigenvalues(&ctc);
    let sigma_min_plus = eigs
        .iter()
        .copied()
        .filter(|&v| v > EIGEN_ZERO_TOL)
        .fold(f64::INFINITY, f64::min);
    assert!(
        sigma_min_plus.is_finite(),
        "connected graph must have a positive eigenvalue"
    );
    let lu_eigs = linalg::sym_eigenvalues(&inc.l_u_f64());
    SpectralData {
        sigma_min_plus,
        sigma_max_lu: lu_eigs[m - 1],
        sigma_min_lu: lu_eigs[0].max(0.0),
    }
}

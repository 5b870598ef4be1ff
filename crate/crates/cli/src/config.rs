//! Experiment configuration: TOML schema, validation with field paths, and
//! construction of the core objects.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use lbfgs_admm::data::{self, PartitionMode, ScaleMode};
use lbfgs_admm::engine::{HyperParams, Schedule};
use lbfgs_admm::graph::{build_incidence, IncidenceSet, NetworkGraph};
use lbfgs_admm::lbfgs::InitMode;
use lbfgs_admm::objective::{
    CompositeProblem, L1Reg, LocalCost, QuadraticCost, Regularizer, ScaledCost, ZeroReg,
};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub graph: GraphSpec,
    pub params: ParamSpec,
    pub schedule: ScheduleSpec,
    pub run: RunSpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub kind: String,
    // quadratic
    pub dim: Option<usize>,
    pub seed: Option<u64>,
    pub curvature_min: Option<f64>,
    pub curvature_max: Option<f64>,
    // dataset
    pub path: Option<PathBuf>,
    pub take_first: Option<usize>,
    pub sample_n: Option<usize>,
    pub sample_seed: Option<u64>,
    pub ridge: Option<f64>,
    pub scale: Option<String>,
    pub partition: Option<String>,
    pub partition_seed: Option<u64>,
    // shared
    pub l1_weight: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub kind: String,
    pub agents: Option<usize>,
    pub p: Option<f64>,
    pub seed: Option<u64>,
    pub edges: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub mu_z: f64,
    pub mu_theta: Option<f64>,
    pub epsilon: f64,
    pub memory: usize,
    pub gamma: f64,
    pub init: Option<String>,
    pub l_index: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: String,
    pub activation: Option<f64>,
    pub activation_per_agent: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub iterations: usize,
    pub seeds: Option<Vec<u64>>,
    pub out_prefix: Option<PathBuf>,
    pub monitors: Option<bool>,
    pub oracle_tol: Option<f64>,
    pub oracle_max_iter: Option<usize>,
    pub zeta: Option<f64>,
}

/// A validated, fully constructed experiment.
pub struct Experiment {
    pub problem: CompositeProblem,
    pub graph: NetworkGraph,
    pub incidence: IncidenceSet,
    pub params: HyperParams,
    pub schedule: Schedule,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub monitors: bool,
    pub out_prefix: PathBuf,
    pub oracle_tol: f64,
    pub oracle_max_iter: usize,
    pub zeta: Option<f64>,
    /// Defaulting decisions worth surfacing (logged by the commands).
    pub notes: Vec<String>,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("cannot parse config {}", path.display()))
}

impl ExperimentConfig {
    pub fn build(self) -> Result<Experiment> {
        let mut notes = Vec::new();
        let graph = self.graph.build()?;
        let m = graph.agent_count();

        let l_index = self.params.l_index.unwrap_or(0);
        let mu_theta = match self.params.mu_theta {
            Some(v) => v,
            None => {
                let v = self.params.mu_z / 2.0;
                notes.push(format!("params.mu_theta defaulted to mu_z/2 = {v}"));
                v
            }
        };
        let init_mode = match self.params.init.as_deref() {
            None | Some("constant") => InitMode::Constant,
            Some("adaptive") => InitMode::Adaptive,
            Some(other) => bail!("params.init: unknown mode {other:?} (constant|adaptive)"),
        };

        let activation = match (&self.schedule.activation_per_agent, self.schedule.activation) {
            (Some(list), _) => {
                if list.len() != m {
                    bail!(
                        "schedule.activation_per_agent: {} entries for {} agents",
                        list.len(),
                        m
                    );
                }
                list.clone()
            }
            (None, Some(p)) => vec![p; m],
            (None, None) => vec![1.0; m],
        };
        for (i, &p) in activation.iter().enumerate() {
            if !(p > 0.0 && p <= 1.0) {
                bail!("schedule.activation[{i}]: probability must lie in (0, 1], got {p} (agent {i})");
            }
        }

        let schedule = match self.schedule.kind.as_str() {
            "sync" => Schedule::Sync,
            "async" => Schedule::Async,
            other => bail!("schedule.kind: unknown kind {other:?} (sync|async)"),
        };

        let params = HyperParams {
            mu_z: self.params.mu_z,
            mu_theta,
            epsilon: self.params.epsilon,
            memory: self.params.memory,
            gamma: self.params.gamma,
            init_mode,
            l_index,
            activation,
        };
        params
            .validate(m)
            .map_err(|e| anyhow!("params: {e}"))?;

        let problem = self.problem.build(m)?;
        let incidence = build_incidence(&graph, l_index).map_err(|e| anyhow!("params.l_index: {e}"))?;

        let seeds = self.run.seeds.unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            bail!("run.seeds: at least one seed required");
        }

        Ok(Experiment {
            problem,
            graph,
            incidence,
            params,
            schedule,
            iterations: self.run.iterations,
            seeds,
            monitors: self.run.monitors.unwrap_or(false),
            out_prefix: self.run.out_prefix.unwrap_or_else(|| PathBuf::from("out/run")),
            oracle_tol: self.run.oracle_tol.unwrap_or(4e-9),
            oracle_max_iter: self.run.oracle_max_iter.unwrap_or(2_000_000),
            zeta: self.run.zeta,
            notes,
        })
    }
}

impl GraphSpec {
    fn build(&self) -> Result<NetworkGraph> {
        let need_agents = || {
            self.agents
                .ok_or_else(|| anyhow!("graph.agents: required for kind {:?}", self.kind))
        };
        let g = match self.kind.as_str() {
            "path" => NetworkGraph::path(need_agents()?),
            "ring" => NetworkGraph::ring(need_agents()?),
            "complete" => NetworkGraph::complete(need_agents()?),
            "erdos_renyi" => {
                let p = self.p.ok_or_else(|| anyhow!("graph.p: required for erdos_renyi"))?;
                NetworkGraph::erdos_renyi(need_agents()?, p, self.seed.unwrap_or(0))
            }
            "explicit" => {
                let edges = self
                    .edges
                    .as_ref()
                    .ok_or_else(|| anyhow!("graph.edges: required for explicit graphs"))?;
                NetworkGraph::from_edges(need_agents()?, edges)
            }
            other => bail!("graph.kind: unknown kind {other:?}"),
        };
        g.map_err(|e| anyhow!("graph: {e}"))
    }
}

impl ProblemSpec {
    fn build(&self, m: usize) -> Result<CompositeProblem> {
        match self.kind.as_str() {
            "quadratic" => self.build_quadratic(m),
            "lasso1d" => Ok(build_lasso1d(m)),
            "dataset" => self.build_dataset(m),
            other => bail!("problem.kind: unknown kind {other:?} (quadratic|lasso1d|dataset)"),
        }
    }

    fn regularizer(&self) -> Box<dyn Regularizer> {
        match self.l1_weight {
            Some(w) if w > 0.0 => Box::new(L1Reg::new(w)),
            _ => Box::new(ZeroReg),
        }
    }

    fn build_quadratic(&self, m: usize) -> Result<CompositeProblem> {
        let dim = self.dim.ok_or_else(|| anyhow!("problem.dim: required for quadratic"))?;
        let lo = self.curvature_min.unwrap_or(1.0);
        let hi = self.curvature_max.unwrap_or(3.0);
        if !(lo > 0.0 && hi >= lo) {
            bail!("problem.curvature_min/max: need 0 < min <= max, got {lo}..{hi}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.unwrap_or(0));
        let costs: Vec<Box<dyn LocalCost>> = (0..m)
            .map(|_| {
                let mut q = Array2::<f64>::eye(dim);
                for k in 0..dim {
                    q[[k, k]] = rng.gen_range(lo..=hi);
                }
                let b = Array1::from_iter((0..dim).map(|_| rng.gen_range(-1.0..1.0)));
                Box::new(QuadraticCost::new(q, b).expect("diagonal SPD")) as Box<dyn LocalCost>
            })
            .collect();
        Ok(CompositeProblem::new(costs, self.regularizer()))
    }

    fn build_dataset(&self, m: usize) -> Result<CompositeProblem> {
        let path = self
            .path
            .as_ref()
            .ok_or_else(|| anyhow!("problem.path: required for dataset problems"))?;
        let mut ds = data::load_libsvm(path).map_err(|e| anyhow!("problem.path: {e}"))?;
        if let Some(n) = self.sample_n {
            ds = ds.sample(n, self.sample_seed.unwrap_or(0));
        } else if let Some(n) = self.take_first {
            ds = ds.take_first(n);
        }
        let scale_mode = match self.scale.as_deref() {
            None | Some("none") => ScaleMode::None,
            Some("max-abs") => ScaleMode::MaxAbs,
            Some(other) => bail!("problem.scale: unknown mode {other:?} (none|max-abs)"),
        };
        let (ds, _scales) = data::scale_features(&ds, scale_mode);
        let mode = match self.partition.as_deref() {
            None | Some("contiguous") => PartitionMode::Contiguous,
            Some("shuffled") => PartitionMode::Shuffled { seed: self.partition_seed.unwrap_or(0) },
            Some(other) => bail!("problem.partition: unknown mode {other:?}"),
        };
        let dim = ds.dim;
        let parts = data::partition(&ds, m, mode).map_err(|e| anyhow!("problem: {e}"))?;
        let ridge = self.ridge.unwrap_or(1e-6);
        let weight = self.l1_weight.unwrap_or(0.0005);
        if weight <= 0.0 {
            bail!("problem.l1_weight: dataset runs need a positive weight, got {weight}");
        }
        Ok(data::logistic_consensus_problem(parts, dim, ridge, weight))
    }
}

/// `m` copies of `(1/m) * 0.5 (w - 1)^2` plus `0.5 |w|`; the optimum is 0.5
/// for any network size.
fn build_lasso1d(m: usize) -> CompositeProblem {
    let costs: Vec<Box<dyn LocalCost>> = (0..m)
        .map(|_| {
            let inner = QuadraticCost::new(Array2::eye(1), Array1::ones(1)).expect("SPD");
            Box::new(ScaledCost::new(Box::new(inner), 1.0 / m as f64)) as Box<dyn LocalCost>
        })
        .collect();
    CompositeProblem::new(costs, Box::new(L1Reg::new(0.5)))
}

//! The run / oracle / check commands over a validated experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use lbfgs_admm::analysis::{
    reference_solve, theoretical_delta, AlphaMode, DeltaInputs, InvariantReport, BoundConstants,
    InvariantMonitors, LyapunovTracker, MonitorConfig, ReferenceSolution,
};
use lbfgs_admm::engine::{Engine, EngineError, EngineObserver, NoopObserver, Schedule};
use lbfgs_admm::graph::spectral_quantities;

use crate::config::Experiment;

/// Output directory override honored by every command.
pub const OUT_DIR_ENV: &str = "LBFGS_ADMM_OUT_DIR";

/// Applies the environment override to an output path.
pub fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) => Path::new(&dir).join(path.file_name().unwrap_or(path.as_os_str())),
        None => path.to_path_buf(),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
    }
    Ok(())
}

fn oracle_path(prefix: &Path) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push("_oracle.json");
    resolve_out(&prefix.with_file_name(name))
}

/// Computes (or loads a cached copy of) the reference solution.
pub fn obtain_reference(exp: &Experiment) -> Result<ReferenceSolution> {
    let cache = oracle_path(&exp.out_prefix);
    if let Ok(text) = std::fs::read_to_string(&cache) {
        if let Ok(reference) = serde_json::from_str::<ReferenceSolution>(&text) {
            if reference.kkt_residual <= 1e-8 && reference.w_star.len() == exp.problem.dim() {
                return Ok(reference);
            }
        }
    }
    let reference = reference_solve(
        &exp.problem,
        &exp.incidence,
        exp.oracle_tol,
        exp.oracle_max_iter,
    )
    .map_err(|e| anyhow!("oracle: {e}"))?;
    ensure_parent(&cache)?;
    std::fs::write(&cache, serde_json::to_string_pretty(&reference)?)
        .with_context(|| format!("cannot write {}", cache.display()))?;
    Ok(reference)
}

/// Writes the reference solution and reports where it went.
pub fn cmd_oracle(exp: &Experiment, out: Option<&Path>) -> Result<PathBuf> {
    for note in &exp.notes {
        println!("note: {note}");
    }
    let reference = reference_solve(
        &exp.problem,
        &exp.incidence,
        exp.oracle_tol,
        exp.oracle_max_iter,
    )
    .map_err(|e| anyhow!("oracle: {e}"))?;
    let path = match out {
        Some(p) => resolve_out(p),
        None => oracle_path(&exp.out_prefix),
    };
    ensure_parent(&path)?;
    std::fs::write(&path, serde_json::to_string_pretty(&reference)?)
        .with_context(|| format!("cannot write {}", path.display()))?;
    println!(
        "oracle: J* = {}, |w*| = {}, KKT residual = {:e} -> {}",
        reference.objective_star,
        reference.w_star.dot(&reference.w_star).sqrt(),
        reference.kkt_residual,
        path.display()
    );
    Ok(path)
}

#[derive(Debug, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub iterations: usize,
    pub comm_units: u64,
    pub final_objective: f64,
    pub final_rel_error: f64,
    pub final_consensus_residual: f64,
    pub skipped_pairs: u64,
    pub monitor_pass_counts: BTreeMap<String, (usize, usize)>,
    pub monitors_passed: bool,
    pub trace_path: String,
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub objective_star: f64,
    pub kkt_residual: f64,
    pub seeds: Vec<SeedSummary>,
    pub all_monitors_passed: bool,
    pub wall_time_seconds: f64,
}

enum RunObserver {
    Noop(NoopObserver),
    Monitors(Box<InvariantMonitors>),
}

impl RunObserver {
    fn as_dyn(&mut self) -> &mut dyn EngineObserver {
        match self {
            RunObserver::Noop(o) => o,
            RunObserver::Monitors(o) => o.as_mut(),
        }
    }
}

/// Executes every configured seed, writing one trace CSV per seed, a
/// mean-relative-error aggregate for multi-seed runs, and a JSON summary.
/// Fails (after preserving the partial trace) on divergence; the summary
/// records whether every enabled monitor passed.
pub fn cmd_run(exp: &Experiment) -> Result<(RunSummary, PathBuf)> {
    let started = Instant::now();
    for note in &exp.notes {
        println!("note: {note}");
    }
    let reference = obtain_reference(exp)?;

    let monitor_config = match exp.schedule {
        Schedule::Sync => MonitorConfig::all(),
        _ => MonitorConfig::async_safe(),
    };

    let mut seed_summaries = Vec::new();
    let mut re_columns: Vec<Vec<f64>> = Vec::new();
    let mut all_monitors_passed = true;

    for &seed in &exp.seeds {
        let mut engine = Engine::new(&exp.problem, &exp.graph, exp.params.clone())
            .map_err(|e| anyhow!("engine: {e}"))?;
        let mut observer = if exp.monitors {
            RunObserver::Monitors(Box::new(
                InvariantMonitors::new(
                    &exp.problem,
                    &exp.graph,
                    &exp.incidence,
                    &exp.params,
                    monitor_config,
                )
                .map_err(|e| anyhow!("monitors: {e}"))?,
            ))
        } else {
            RunObserver::Noop(NoopObserver)
        };

        let trace_path = resolve_out(&with_suffix(&exp.out_prefix, &format!("_seed{seed}.csv")));
        ensure_parent(&trace_path)?;

        let result = engine.run(
            exp.schedule,
            exp.iterations,
            seed,
            Some(reference.objective_star),
            observer.as_dyn(),
        );
        let trace = match result {
            Ok(trace) => trace,
            Err(EngineError::Diverged { at, reason, partial }) => {
                std::fs::write(&trace_path, partial.to_csv())
                    .with_context(|| format!("cannot write {}", trace_path.display()))?;
                bail!(
                    "seed {seed}: diverged at iteration {at} ({reason}); partial trace at {}",
                    trace_path.display()
                );
            }
            Err(e) => return Err(anyhow!("seed {seed}: {e}")),
        };
        std::fs::write(&trace_path, trace.to_csv())
            .with_context(|| format!("cannot write {}", trace_path.display()))?;

        let (pass_counts, monitors_passed, report) = match observer {
            RunObserver::Monitors(m) => {
                let report = m.report;
                (report.pass_counts(), report.all_pass(), Some(report))
            }
            RunObserver::Noop(_) => (BTreeMap::new(), true, None),
        };
        if let Some(report) = &report {
            let inv_path =
                resolve_out(&with_suffix(&exp.out_prefix, &format!("_seed{seed}_invariants.csv")));
            std::fs::write(&inv_path, report.to_csv())
                .with_context(|| format!("cannot write {}", inv_path.display()))?;
        }
        all_monitors_passed &= monitors_passed;

        re_columns.push(trace.rows.iter().map(|r| r.rel_error).collect());
        let last = trace.final_row().expect("trace has rows");
        seed_summaries.push(SeedSummary {
            seed,
            iterations: exp.iterations,
            comm_units: last.comm,
            final_objective: last.objective,
            final_rel_error: last.rel_error,
            final_consensus_residual: last.consensus_residual,
            skipped_pairs: trace.skipped_pairs,
            monitor_pass_counts: pass_counts,
            monitors_passed,
            trace_path: trace_path.display().to_string(),
        });
        println!(
            "seed {seed}: RE = {:e}, consensus residual = {:e}, comm = {}",
            last.rel_error, last.consensus_residual, last.comm
        );
    }

    if exp.seeds.len() > 1 {
        let rows = re_columns[0].len();
        let mut csv = String::from("iter,mean_rel_error\n");
        for r in 0..rows {
            let mean: f64 =
                re_columns.iter().map(|c| c[r]).sum::<f64>() / re_columns.len() as f64;
            csv.push_str(&format!("{r},{mean}\n"));
        }
        let mean_path = resolve_out(&with_suffix(&exp.out_prefix, "_mean_re.csv"));
        ensure_parent(&mean_path)?;
        std::fs::write(&mean_path, csv)
            .with_context(|| format!("cannot write {}", mean_path.display()))?;
    }

    let summary = RunSummary {
        objective_star: reference.objective_star,
        kkt_residual: reference.kkt_residual,
        seeds: seed_summaries,
        all_monitors_passed,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    let summary_path = resolve_out(&with_suffix(&exp.out_prefix, "_summary.json"));
    ensure_parent(&summary_path)?;
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("cannot write {}", summary_path.display()))?;
    Ok((summary, summary_path))
}

/// Runs the workload with every monitor enabled and prints the per-check
/// table plus the theoretical contraction factor; errors on any violation.
pub fn cmd_check(exp: &Experiment) -> Result<InvariantReport> {
    for note in &exp.notes {
        println!("note: {note}");
    }
    let reference = obtain_reference(exp)?;
    let monitor_config = match exp.schedule {
        Schedule::Sync => MonitorConfig::all(),
        _ => MonitorConfig::async_safe(),
    };
    let mut monitors = InvariantMonitors::new(
        &exp.problem,
        &exp.graph,
        &exp.incidence,
        &exp.params,
        monitor_config,
    )
    .map_err(|e| anyhow!("monitors: {e}"))?;
    let mut lyapunov = LyapunovTracker::new(
        &reference,
        &exp.graph,
        &exp.incidence,
        &exp.params,
        match exp.schedule {
            Schedule::Sync => AlphaMode::SyncShadow,
            _ => AlphaMode::LeastSquares,
        },
        false,
    );

    struct Both<'a>(&'a mut InvariantMonitors, &'a mut LyapunovTracker);
    impl EngineObserver for Both<'_> {
        fn before_iteration(&mut self, engine: &Engine<'_>, iter: usize) {
            self.0.before_iteration(engine, iter);
            self.1.before_iteration(engine, iter);
        }
        fn after_iteration(&mut self, engine: &Engine<'_>, iter: usize) {
            self.0.after_iteration(engine, iter);
            self.1.after_iteration(engine, iter);
        }
    }

    let seed = exp.seeds[0];
    let mut engine = Engine::new(&exp.problem, &exp.graph, exp.params.clone())
        .map_err(|e| anyhow!("engine: {e}"))?;
    engine
        .run(
            exp.schedule,
            exp.iterations,
            seed,
            Some(reference.objective_star),
            &mut Both(&mut monitors, &mut lyapunov),
        )
        .map_err(|e| anyhow!("seed {seed}: {e}"))?;

    let report = monitors.into_report();
    println!("{:<26}{:>8}{:>8}", "check", "pass", "total");
    for (check, (pass, total)) in report.pass_counts() {
        println!("{check:<26}{pass:>8}{total:>8}");
    }

    let h = &lyapunov.h_history;
    if h.len() >= 2 {
        let decreasing = h.windows(2).filter(|w| w[1] <= w[0] + 1e-12).count();
        println!(
            "lyapunov: |u-u*|^2_H {:.3e} -> {:.3e}, decreasing at {}/{} steps",
            h[0],
            h[h.len() - 1],
            decreasing,
            h.len() - 1
        );
    }

    if let Ok(constants) = BoundConstants::from_setup(&exp.problem, &exp.graph, &exp.params) {
        let delta = theoretical_delta(&DeltaInputs {
            constants,
            spectral: spectral_quantities(&exp.incidence),
            zeta: exp.zeta,
            p_min: exp.params.p_min(),
        });
        if delta.vacuous {
            println!(
                "theoretical delta: vacuous bound (delta = {:.3e}, tau bound = {:.3e})",
                delta.delta, delta.tau_bound
            );
        } else {
            println!(
                "theoretical delta: {:.6e}, implied rate {:.6}",
                delta.delta, delta.rate
            );
        }
    }

    let inv_path = resolve_out(&with_suffix(&exp.out_prefix, "_check_invariants.csv"));
    ensure_parent(&inv_path)?;
    std::fs::write(&inv_path, report.to_csv())
        .with_context(|| format!("cannot write {}", inv_path.display()))?;

    if let Some(first) = report.first_failure() {
        bail!(
            "invariant violation: {} at iteration {} (measured {:e}, bound {:e}); report at {}",
            first.check,
            first.iteration,
            first.measured,
            first.bound,
            inv_path.display()
        );
    }
    Ok(report)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    prefix.with_file_name(name)
}

//! The `(epsilon, seed)` grid runner and its CSV/manifest emission.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use rhpg_core::riccati::{solve_are, DEFAULT_ARE_MAX_ITER, DEFAULT_ARE_TOL};
use rhpg_core::zeroth_order::OracleKind;
use rhpg_core::{
    run_rhpg, select_horizon, AreSolution, Certifier, Error, InitialStateDistribution, Learner,
    Result, RhpgSchedule, SystemInstance,
};

use crate::config::ExperimentConfig;

/// One grid cell's outcome. Divergence is encoded as an infinite policy
/// error with the flag set; such rows never abort the sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub seed: u64,
    pub policy_error: f64,
    pub oracle_calls: u64,
    pub stabilizing: bool,
    pub wall_ms: f64,
    pub diverged: bool,
    pub horizon: usize,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub manifest: serde_json::Value,
}

/// Run every `(epsilon, seed)` cell of the grid. Cells are independent
/// jobs on a bounded worker pool; results are gathered back into a
/// deterministic order before anything is emitted.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    let doc = config.system_document()?;
    let instance = doc.instantiate()?;
    let are = solve_are(&instance.dynamics, &instance.weights, DEFAULT_ARE_TOL, DEFAULT_ARE_MAX_ITER)?;

    // Horizon per epsilon, fixed up front and recorded in the manifest.
    let mode = config.horizon_mode.to_mode(config.heuristic_base);
    let mut horizons = Vec::with_capacity(config.epsilons.len());
    for &eps in &config.epsilons {
        horizons.push(select_horizon(&mode, eps, Some((&are, &instance.weights)))?);
    }

    let mut cells = Vec::new();
    for (ei, &eps) in config.epsilons.iter().enumerate() {
        for si in 0..config.seeds_per_cell {
            cells.push((eps, horizons[ei], config.base_seed + si as u64));
        }
    }

    let run_cells = || -> Vec<SweepRow> {
        cells
            .par_iter()
            .map(|&(eps, horizon, seed)| run_cell(config, &instance, &are, eps, horizon, seed))
            .collect()
    };
    let rows = match config.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?
            .install(run_cells),
        None => run_cells(),
    };

    let manifest = json!({
        "config": serde_json::to_value(config).expect("config serializes"),
        "system": serde_json::to_value(&doc).expect("system serializes"),
        "initial_state_distribution": "zero-mean Gaussian with covariance Sigma0 (default choice)",
        "ground_truth": are.to_json(),
        "horizons": config.epsilons.iter().zip(&horizons).map(|(e, n)| json!({
            "epsilon": e,
            "horizon": n,
            "mode": serde_json::to_value(config.horizon_mode).unwrap(),
        })).collect::<Vec<_>>(),
        "rows": rows.iter().map(|r| serde_json::to_value(r).unwrap()).collect::<Vec<_>>(),
    });

    Ok(SweepResult { rows, manifest })
}

fn run_cell(
    config: &ExperimentConfig,
    instance: &SystemInstance,
    are: &AreSolution,
    epsilon: f64,
    horizon: usize,
    seed: u64,
) -> SweepRow {
    let start = Instant::now();
    let failed = |calls: u64| SweepRow {
        epsilon,
        seed,
        policy_error: f64::INFINITY,
        oracle_calls: calls,
        stabilizing: false,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        diverged: true,
        horizon,
    };

    let dist = match InitialStateDistribution::gaussian(instance.sigma0.clone()) {
        Ok(d) => d,
        Err(_) => return failed(0),
    };
    let schedule = match build_schedule(config, epsilon, horizon) {
        Ok(s) => s,
        Err(_) => return failed(0),
    };
    let learner = Learner::Simulated {
        dynamics: &instance.dynamics,
        weights: &instance.weights,
        dist: &dist,
        noise: &instance.noise,
    };
    let certifier = Certifier { dynamics: &instance.dynamics, are };
    match run_rhpg(&learner, &schedule, seed, Some(&certifier), false) {
        Ok(report) => {
            let cert = report.certification.expect("certifier attached");
            SweepRow {
                epsilon,
                seed,
                policy_error: cert.gain_error,
                oracle_calls: report.oracle_calls,
                stabilizing: cert.stabilizing,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                diverged: false,
                horizon,
            }
        }
        Err(Error::InnerDivergence { iteration, .. }) => {
            let calls = match config.oracle {
                OracleKind::TwoPoint => 2 * iteration,
                OracleKind::OnePoint => iteration,
            };
            failed(calls)
        }
        Err(_) => failed(0),
    }
}

pub fn build_schedule(config: &ExperimentConfig, epsilon: f64, horizon: usize) -> Result<RhpgSchedule> {
    let mut schedule = RhpgSchedule::uniform(
        epsilon,
        config.delta,
        horizon,
        config.oracle,
        config.radius_rule,
        config.warm_start,
        &config.constants,
    )?;
    if let Some(factor) = config.stop_tolerance_factor {
        schedule = schedule.with_stop_tolerance(factor * epsilon);
    }
    Ok(schedule)
}

/// CSV bytes in the stable emission order (epsilon ascending, then seed),
/// with the fixed header.
pub fn csv_bytes(result: &SweepResult) -> Result<Vec<u8>> {
    let mut rows: Vec<&SweepRow> = result.rows.iter().collect();
    rows.sort_by(|a, b| {
        a.epsilon
            .total_cmp(&b.epsilon)
            .then_with(|| a.seed.cmp(&b.seed))
    });
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["epsilon", "seed", "policy_error", "oracle_calls", "stabilizing", "wall_ms"])
        .map_err(|e| Error::numerical(format!("csv: {e}")))?;
    for row in rows {
        writer
            .write_record(&[
                format_float(row.epsilon),
                row.seed.to_string(),
                format_float(row.policy_error),
                row.oracle_calls.to_string(),
                row.stabilizing.to_string(),
                format_float(row.wall_ms),
            ])
            .map_err(|e| Error::numerical(format!("csv: {e}")))?;
    }
    writer
        .into_inner()
        .map_err(|e| Error::numerical(format!("csv: {e}")))
}

fn format_float(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        let mut buf = ryu_format(v);
        if buf.ends_with(".0") {
            buf.truncate(buf.len() - 2);
        }
        buf
    }
}

fn ryu_format(v: f64) -> String {
    let mut s = format!("{v}");
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Write the CSV to `path`.
pub fn emit_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let bytes = csv_bytes(result)?;
    std::fs::write(path, bytes)
        .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))
}

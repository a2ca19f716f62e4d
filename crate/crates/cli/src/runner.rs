//! Executes sweep cells and writes `metrics.csv` and `summary.json`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Value};
use zofed_core::engine::bilevel::{run_bilevel, LowerConfig, LowerSchedule};
use zofed_core::engine::nn::run_single_level;
use zofed_core::engine::twostage::{run_two_stage, TwoStageConfig};
use zofed_core::engine::{InitialPoint, RunConfig, RunFailure, Trajectory};
use zofed_core::{derive_seed, derive_seed_str, DVector, ProblemInstance};

use crate::config::{ExperimentConfig, InitSpec, ParsedConfig, ScheduleSpec};
use crate::error::HarnessError;
use crate::instance::build_problem;

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 21] = [
    "schema_version",
    "experiment",
    "variant",
    "cell",
    "replication",
    "round",
    "k",
    "loss",
    "exact_loss",
    "residual",
    "infeasibility",
    "consensus_error",
    "comm_rounds",
    "lower_rounds",
    "lower_iters",
    "eps",
    "projections",
    "validation_loss",
    "tau",
    "alpha",
    "wall_ms",
];

/// Result of one (cell, replication) job.
#[derive(Clone, Debug)]
pub struct JobOutcome {
    pub cell: String,
    pub replication: usize,
    pub variant: String,
    /// Full or partial trajectory; `None` when the problem could not be built.
    pub trajectory: Option<Trajectory>,
    pub error: Option<HarnessError>,
    pub wall_ms: f64,
}

/// Seeds of one job: the engine seed depends on the cell coordinates, the
/// problem and initial-point seeds only on the replication.
pub fn job_seeds(master: u64, cell: &str, replication: usize) -> (u64, u64, u64) {
    let run = derive_seed_str(master, &format!("{cell}#{replication}"));
    let init = derive_seed(master, &[replication as u64]);
    let problem = derive_seed_str(master, "problem");
    (run, init, problem)
}

pub fn run_config(cfg: &ExperimentConfig, seed: u64, init_seed: u64) -> RunConfig {
    let r = &cfg.run;
    let mut rc = RunConfig::new(cfg.problem.clients(), r.gamma, r.eta, r.local_steps, r.rounds, seed);
    rc.parallel_clients = r.parallel_clients;
    rc.batch_size = r.batch_size;
    rc.smoothing_draws = r.smoothing_draws;
    rc.residual_every = r.residual_every;
    rc.residual_samples = r.residual_samples;
    rc.init_seed = Some(init_seed);
    rc.init = match &r.init {
        InitSpec::Given(v) => InitialPoint::Given(DVector::from_column_slice(v)),
        InitSpec::UniformBox { lo, hi } => InitialPoint::UniformBox { lo: *lo, hi: *hi },
    };
    rc
}

pub fn lower_config(cfg: &ExperimentConfig) -> LowerConfig {
    let l = &cfg.run.lower;
    LowerConfig {
        schedule: match l.schedule {
            ScheduleSpec::Printed => LowerSchedule::Printed,
            ScheduleSpec::Theorem { scale } => LowerSchedule::Theorem { scale },
        },
        certificate: l.certificate,
        warm_start: l.warm_start,
        exact: l.exact,
    }
}

pub fn two_stage_config(cfg: &ExperimentConfig) -> TwoStageConfig {
    let t = &cfg.run.two_stage;
    TwoStageConfig {
        tau: t.tau,
        alpha: t.alpha,
        warm_start: t.warm_start,
        loss_samples: t.loss_samples,
    }
}

/// Dispatches one run to the engine matching the problem variant.
pub fn run_instance(problem: &ProblemInstance, cfg: &ExperimentConfig, rc: &RunConfig) -> Result<Trajectory, RunFailure> {
    match problem {
        ProblemInstance::SingleLevel(p) => run_single_level(p.as_ref(), rc),
        ProblemInstance::Bilevel(p) | ProblemInstance::Minimax(p) => run_bilevel(p.as_ref(), rc, &lower_config(cfg)),
        ProblemInstance::TwoStage(p) => run_two_stage(p.as_ref(), rc, &two_stage_config(cfg)),
    }
}

pub fn run_job(cfg: &ExperimentConfig, cell: &str, replication: usize) -> JobOutcome {
    let start = Instant::now();
    let (seed, init_seed, problem_seed) = job_seeds(cfg.run.seed, cell, replication);
    let mut out = JobOutcome {
        cell: cell.to_string(),
        replication,
        variant: String::new(),
        trajectory: None,
        error: None,
        wall_ms: 0.0,
    };
    match build_problem(&cfg.problem, problem_seed) {
        Err(e) => out.error = Some(e),
        Ok(problem) => {
            out.variant = problem.variant().to_string();
            let rc = run_config(cfg, seed, init_seed);
            match run_instance(&problem, cfg, &rc) {
                Ok(t) => out.trajectory = Some(t),
                Err(f) => {
                    log::error!("cell [{cell}] replication {replication}: {}", f.error);
                    out.error = Some(f.error.clone().into());
                    out.trajectory = Some(*f.partial);
                }
            }
        }
    }
    out.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    out
}

/// Runs every (cell, replication) job; results come back in grid order.
pub fn run_all(parsed: &ParsedConfig, parallel_cells: usize) -> Result<Vec<JobOutcome>, HarnessError> {
    let jobs: Vec<(&crate::config::Cell, usize)> = parsed
        .cells
        .iter()
        .flat_map(|c| (0..c.config.replications).map(move |r| (c, r)))
        .collect();
    if parallel_cells > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel_cells)
            .build()
            .map_err(|e| HarnessError::Engine(format!("cannot start thread pool: {e}")))?;
        Ok(pool.install(|| jobs.par_iter().map(|(c, r)| run_job(&c.config, &c.key, *r)).collect()))
    } else {
        Ok(jobs.iter().map(|(c, r)| run_job(&c.config, &c.key, *r)).collect())
    }
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        String::new()
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn optf(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// CSV bytes of all trajectories.
pub fn render_csv(experiment: &str, outcomes: &[JobOutcome], wall_time: bool) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| HarnessError::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for o in outcomes {
        let Some(t) = &o.trajectory else { continue };
        let wall = if wall_time { num(o.wall_ms) } else { String::new() };
        for rec in &t.records {
            w.write_record([
                SCHEMA_VERSION.to_string(),
                experiment.to_string(),
                o.variant.clone(),
                o.cell.clone(),
                o.replication.to_string(),
                rec.round.to_string(),
                rec.k.to_string(),
                num(rec.loss),
                optf(rec.exact_loss),
                optf(rec.residual),
                num(rec.infeasibility),
                num(rec.consensus_error),
                rec.comm_rounds.to_string(),
                opt(rec.lower_rounds),
                opt(rec.lower_iters),
                optf(rec.eps),
                opt(rec.projections),
                optf(rec.validation_loss),
                optf(rec.tau),
                optf(rec.alpha),
                wall.clone(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))
}

fn stats(values: &[f64]) -> Value {
    let n = values.len();
    if n == 0 {
        return Value::Null;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return json!({ "mean": mean, "std": null, "ci95": null, "n": n });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let half = 1.96 * std / (n as f64).sqrt();
    json!({ "mean": mean, "std": std, "ci95": [mean - half, mean + half], "n": n })
}

/// Per-cell summary keyed by the canonical coordinate string.
pub fn render_summary(outcomes: &[JobOutcome]) -> Result<Vec<u8>, HarnessError> {
    let mut cells: BTreeMap<&str, Vec<&JobOutcome>> = BTreeMap::new();
    for o in outcomes {
        cells.entry(o.cell.as_str()).or_default().push(o);
    }
    let mut root = serde_json::Map::new();
    for (key, jobs) in cells {
        let done: Vec<&Trajectory> = jobs
            .iter()
            .filter(|j| j.error.is_none())
            .filter_map(|j| j.trajectory.as_ref())
            .collect();
        let finals: Vec<f64> = done.iter().filter_map(|t| t.final_loss()).filter(|v| v.is_finite()).collect();
        let exact: Vec<f64> = done
            .iter()
            .filter_map(|t| t.records.last().and_then(|r| r.exact_loss))
            .collect();
        let errors: Vec<Value> = jobs
            .iter()
            .filter_map(|j| j.error.as_ref().map(|e| json!({ "replication": j.replication, "error": e.to_string() })))
            .collect();
        root.insert(
            key.to_string(),
            json!({
                "replications": jobs.len(),
                "completed": done.len(),
                "final_loss": stats(&finals),
                "final_exact_loss": stats(&exact),
                "errors": errors,
            }),
        );
    }
    let mut bytes = serde_json::to_vec_pretty(&Value::Object(root)).map_err(|e| HarnessError::Io(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| HarnessError::Io(e.to_string()))?;
    Ok(())
}

/// Outcome of a full experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub jobs: usize,
    pub cells: usize,
    pub failures: Vec<String>,
}

/// Runs the grid and writes `metrics.csv` and `summary.json` under `out_dir`.
pub fn run_experiment(parsed: &ParsedConfig, out_dir: &Path, parallel_cells: usize) -> Result<RunReport, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let outcomes = run_all(parsed, parallel_cells)?;
    let csv = render_csv(&parsed.base.name, &outcomes, parsed.base.record_wall_time)?;
    write_atomic(&out_dir.join("metrics.csv"), &csv)?;
    write_atomic(&out_dir.join("summary.json"), &render_summary(&outcomes)?)?;
    let failures = outcomes
        .iter()
        .filter_map(|o| o.error.as_ref().map(|e| format!("[{}] rep {}: {e}", o.cell, o.replication)))
        .collect();
    Ok(RunReport {
        jobs: outcomes.len(),
        cells: parsed.cells.len(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    const TOY: &str = r#"{
        "name": "toy",
        "replications": 3,
        "problem": {"kind": "toy_bilevel", "dim": 2, "clients": 2, "half_width": 1.0},
        "run": {"gamma": 0.05, "eta": 0.05, "local_steps": 2, "rounds": 5, "seed": 7},
        "sweep": {"run.local_steps": [1, 10, 20], "run.eta": [1.0, 0.1, 0.01]}
    }"#;

    #[test]
    fn grid_counts_and_stable_bytes() {
        let parsed = parse_config_str(TOY, Path::new(".")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&parsed, dir.path(), 1).unwrap();
        assert_eq!(report.cells, 9);
        assert_eq!(report.jobs, 27);
        assert!(report.failures.is_empty());
        let first = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        let blocks: std::collections::BTreeSet<(String, String)> = csv::Reader::from_reader(&first[..])
            .records()
            .map(|r| {
                let r = r.unwrap();
                (r[3].to_string(), r[4].to_string())
            })
            .collect();
        assert_eq!(blocks.len(), 27);

        let again = tempfile::tempdir().unwrap();
        run_experiment(&parsed, again.path(), 4).unwrap();
        assert_eq!(first, std::fs::read(again.path().join("metrics.csv")).unwrap());
        assert_eq!(
            std::fs::read(dir.path().join("summary.json")).unwrap(),
            std::fs::read(again.path().join("summary.json")).unwrap()
        );
    }

    #[test]
    fn changing_one_sweep_value_leaves_other_cells_alone() {
        let a = parse_config_str(TOY, Path::new(".")).unwrap();
        let b = parse_config_str(&TOY.replace("[1.0, 0.1, 0.01]", "[1.0, 0.1, 0.5]"), Path::new(".")).unwrap();
        let ra = run_all(&a, 1).unwrap();
        let rb = run_all(&b, 1).unwrap();
        for (x, y) in ra.iter().zip(&rb) {
            if !x.cell.contains("run.eta=0.01") {
                assert_eq!(x.cell, y.cell);
                assert_eq!(x.trajectory, y.trajectory);
            }
        }
    }

    #[test]
    fn header_is_shared_and_nullable_columns_are_empty() {
        let parsed = parse_config_str(&TOY.replace("\"replications\": 3", "\"replications\": 1"), Path::new(".")).unwrap();
        let outcomes = run_all(&parsed, 1).unwrap();
        let bytes = render_csv("toy", &outcomes, false).unwrap();
        let mut rdr = csv::Reader::from_reader(&bytes[..]);
        assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER.to_vec());
        for r in rdr.records() {
            let r = r.unwrap();
            assert_eq!(&r[0], "1");
            assert_eq!(&r[16], "");
            assert_eq!(&r[20], "");
            assert!(!r.iter().any(|f| f == "NaN"));
        }
    }
}

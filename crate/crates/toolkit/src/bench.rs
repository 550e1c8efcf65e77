//! Throughput benchmark over batch sizes.

use std::io::Write;
use std::time::Instant;

use orbitlite_core::streams;
use orbitlite_core::tasks::{action_bounds, make_task, TaskConfig, TaskError};
use orbitlite_core::world::{worker_count, WorldError};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const WARMUP_STEPS: usize = 100;
/// Distinct random action batches cycled through the timed loop.
const ACTION_BATCHES: usize = 32;

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct BenchRow {
    pub num_envs: usize,
    pub wall_seconds: f64,
    /// Control steps per environment.
    pub control_steps: usize,
    /// Physics substeps summed over environments.
    pub physics_substeps: u64,
    pub physics_steps_per_sec: f64,
    pub env_steps_per_sec: f64,
    pub threads: usize,
    /// Empty unless the row failed.
    pub error: String,
}

#[derive(Debug, thiserror::Error)]
enum RowError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    World(#[from] WorldError),
}

fn run_row(cfg: &TaskConfig, num_envs: usize, steps: usize, seed: u64) -> Result<BenchRow, RowError> {
    let mut env = make_task(cfg, num_envs)?;
    env.set_threads(worker_count());
    env.seed(seed);
    let (lo, hi) = action_bounds(cfg)?;
    let mut rng = streams::stream(seed, 0, "bench/actions");
    let batches: Vec<Vec<f64>> = (0..ACTION_BATCHES)
        .map(|_| (0..num_envs).flat_map(|_| lo.iter().zip(&hi).map(|(l, h)| rng.gen_range(*l..=*h)).collect::<Vec<_>>()).collect())
        .collect();
    for k in 0..WARMUP_STEPS {
        env.step(&batches[k % ACTION_BATCHES])?;
    }
    env.reset_counters();
    let start = Instant::now();
    for k in 0..steps {
        env.step(&batches[k % ACTION_BATCHES])?;
    }
    let wall = start.elapsed().as_secs_f64();
    let substeps: u64 = (0..num_envs).map(|i| env.counters(i).substeps).sum();
    Ok(BenchRow {
        num_envs,
        wall_seconds: wall,
        control_steps: steps,
        physics_substeps: substeps,
        physics_steps_per_sec: substeps as f64 / wall,
        env_steps_per_sec: (num_envs * steps) as f64 / wall,
        threads: env.threads(),
        error: String::new(),
    })
}

/// One row per batch size; a failing row carries its error and the run
/// continues.
pub fn bench(cfg: &TaskConfig, num_envs: &[usize], steps: usize, seed: u64) -> Vec<BenchRow> {
    num_envs
        .iter()
        .map(|&n| {
            log::info!("bench {} with {n} envs", cfg.task);
            run_row(cfg, n, steps, seed).unwrap_or_else(|e| BenchRow {
                num_envs: n,
                control_steps: steps,
                error: e.to_string(),
                ..BenchRow::default()
            })
        })
        .collect()
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

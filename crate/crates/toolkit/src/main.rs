use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use orbitlite_core::tasks::{ControlMode, TaskConfig, TaskId};
use orbitlite_toolkit::{beam, bench, record, serve};

/// Exit code of `replay --verify` when the rerun differs from the log.
const EXIT_DEVIATION: u8 = 3;

#[derive(Parser)]
#[command(name = "orbitlite", version, about = "Vectorized robot simulation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time random-action stepping over batch sizes.
    Bench {
        #[arg(long)]
        task: TaskId,
        #[arg(long, value_delimiter = ',', default_value = "1,4,16,64,256,1024")]
        num_envs: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Record episodes to a log. Teleop commands are read from stdin.
    Record {
        #[arg(long)]
        task: TaskId,
        #[arg(long)]
        policy: record::PolicyKind,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "panda")]
        robot: String,
        #[arg(long, default_value_t = ControlMode::TaskSpaceIk)]
        mode: ControlMode,
    },
    /// Re-execute a log.
    Replay {
        #[arg(long)]
        file: PathBuf,
        /// Compare observations with the log.
        #[arg(long)]
        verify: bool,
        /// Replace the recorded seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stream a live session over WebSocket.
    Serve {
        #[arg(long)]
        task: TaskId,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value_t = 30.0)]
        rate: f64,
        #[arg(long, default_value = "panda")]
        robot: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cantilever beam release at several resolutions.
    ValidateBeam {
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        resolutions: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create(path: &PathBuf) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Bench { task, num_envs, steps, out, seed } => {
            let rows = bench::bench(&TaskConfig::new(task), &num_envs, steps, seed);
            bench::write_csv(&rows, create(&out)?)?;
            for r in &rows {
                if r.error.is_empty() {
                    println!("{:>6} envs  {:>12.1} env-steps/s  {:>12.1} physics-steps/s", r.num_envs, r.env_steps_per_sec, r.physics_steps_per_sec);
                } else {
                    println!("{:>6} envs  failed: {}", r.num_envs, r.error);
                }
            }
        }
        Command::Record { task, policy, episodes, out, seed, robot, mode } => {
            let cfg = TaskConfig::new(task).with_robot(&robot).with_mode(mode);
            let s = record::record(&cfg, policy, episodes, seed, create(&out)?, None)?;
            println!("recorded {} episodes, {} steps, {} successes{}", s.episodes, s.steps, s.successes, if s.truncated { ", truncated" } else { "" });
        }
        Command::Replay { file, verify, seed } => {
            let r = record::replay_file(&file, verify, seed)?;
            if !r.config_hash_matches {
                eprintln!("warning: config hash differs from the log");
            }
            println!("replayed {} episodes, {} steps", r.episodes, r.steps);
            if let Some(d) = r.max_obs_deviation {
                println!("max observation deviation {d:e}");
                println!("max reward deviation {:e}", r.max_reward_deviation.unwrap_or(0.0));
                println!("done mismatches {}", r.done_mismatches);
                if !r.is_exact() {
                    return Ok(ExitCode::from(EXIT_DEVIATION));
                }
            }
        }
        Command::Serve { task, port, rate, robot, seed } => {
            let mut opts = serve::ServeOptions::new(task, port, rate);
            opts.robot = robot;
            opts.seed = seed;
            let handle = serve::serve(&opts)?;
            println!("listening on ws://{}", handle.addr());
            handle.wait();
        }
        Command::ValidateBeam { resolutions, out } => {
            let reports = beam::validate_beam(&resolutions)?;
            beam::write_csv(&reports, create(&out)?)?;
            for r in &reports {
                println!("m={:>3}  sag {:.6} m  peaks {}  decay {:.4}", r.resolution, r.static_sag, r.peaks.len(), r.decay_ratio);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

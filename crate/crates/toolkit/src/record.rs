//! Demonstration recording and replay.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use orbitlite_core::streams;
use orbitlite_core::tasks::{action_bounds, make_scene, make_task, ControlMode, ExpertPool, TaskConfig, TaskError};
use orbitlite_core::world::{Env, WorldError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::episode_log::{config_hash, read_log, EpisodeLog, Header, LogError, LogWriter, StepRecord, FORMAT_VERSION};
use crate::protocol::{ClientMsg, Teleop};

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error("teleop line {line}: {msg}")]
    Teleop { line: usize, msg: String },
    #[error("observation width {found} does not match the log ({expected})")]
    Layout { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Expert,
    Random,
    Teleop,
}

impl FromStr for PolicyKind {
    type Err = RecordError;
    fn from_str(s: &str) -> Result<Self, RecordError> {
        match s {
            "expert" => Ok(PolicyKind::Expert),
            "random" => Ok(PolicyKind::Random),
            "teleop" => Ok(PolicyKind::Teleop),
            _ => Err(RecordError::UnknownPolicy(s.into())),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Expert => "expert",
            PolicyKind::Random => "random",
            PolicyKind::Teleop => "teleop",
        })
    }
}

/// Maps a twist to a task-space action for one control period.
pub fn teleop_action(cfg: &TaskConfig, cmd: &Teleop, act_dim: usize) -> Result<Vec<f64>, TaskError> {
    let (lo, hi) = action_bounds(cfg)?;
    let dt = 1.0 / cfg.control_rate;
    let mut a: Vec<f64> = cmd.twist.iter().map(|v| v * dt).collect();
    if act_dim > 6 {
        a.push(if cmd.gripper { 1.0 } else { -1.0 });
    }
    for ((v, l), h) in a.iter_mut().zip(&lo).zip(&hi) {
        *v = v.clamp(*l, *h);
    }
    Ok(a)
}

enum Policy<'a> {
    Expert(ExpertPool),
    Random { rng: ChaCha8Rng, lo: Vec<f64>, hi: Vec<f64> },
    Teleop { input: Box<dyn BufRead + 'a>, line: usize },
}

impl Policy<'_> {
    /// `None` once teleop input is exhausted.
    fn act(&mut self, env: &Env, cfg: &TaskConfig) -> Result<Option<Vec<f64>>, RecordError> {
        match self {
            Policy::Expert(pool) => Ok(Some(pool.act(env))),
            Policy::Random { rng, lo, hi } => Ok(Some(lo.iter().zip(hi.iter()).map(|(l, h)| rng.gen_range(*l..=*h)).collect())),
            Policy::Teleop { input, line } => loop {
                let mut text = String::new();
                if input.read_line(&mut text)? == 0 {
                    return Ok(None);
                }
                *line += 1;
                if text.trim().is_empty() {
                    continue;
                }
                let err = |msg: String| RecordError::Teleop { line: *line, msg };
                return match ClientMsg::parse(&text).map_err(err)? {
                    ClientMsg::Teleop(t) => Ok(Some(teleop_action(cfg, &t, env.act_dim())?)),
                    other => Err(RecordError::Teleop { line: *line, msg: format!("expected teleop, got {other:?}") }),
                };
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordSummary {
    pub episodes: usize,
    pub steps: usize,
    pub successes: usize,
    pub truncated: bool,
}

/// Records `episodes` complete episodes. Teleop commands are read from
/// `teleop`, one `teleop` message per line and control step; running out
/// of input ends the log with a truncation marker.
pub fn record<W: Write>(
    cfg: &TaskConfig,
    policy: PolicyKind,
    episodes: usize,
    seed: u64,
    out: W,
    teleop: Option<Box<dyn BufRead + '_>>,
) -> Result<RecordSummary, RecordError> {
    let mut cfg = cfg.clone();
    if policy == PolicyKind::Teleop {
        cfg.mode = ControlMode::TaskSpaceIk;
    }
    let scene = make_scene(&cfg)?;
    let mut env = make_task(&cfg, 1)?;
    let header = Header {
        format_version: FORMAT_VERSION,
        task: cfg.task.to_string(),
        task_config: cfg.clone(),
        config_hash: config_hash(&scene),
        seed,
        dt: env.dt(),
        decimation: env.decimation(),
        obs_layout: env.observation_layout(),
        action_layout: env.action_layout(),
        policy: policy.to_string(),
    };
    let mut writer = LogWriter::new(out, &header)?;
    let mut pi = match policy {
        PolicyKind::Expert => Policy::Expert(ExpertPool::new(&cfg, 1)?),
        PolicyKind::Random => {
            let (lo, hi) = action_bounds(&cfg)?;
            Policy::Random { rng: streams::stream(seed, 0, "policy/random"), lo, hi }
        }
        PolicyKind::Teleop => Policy::Teleop {
            input: teleop.unwrap_or_else(|| Box::new(std::io::BufReader::new(std::io::stdin()))),
            line: 0,
        },
    };
    let mut obs = env.seed(seed);
    let mut summary = RecordSummary { episodes: 0, steps: 0, successes: 0, truncated: false };
    while summary.episodes < episodes {
        let t = env.view(0).time();
        let Some(action) = pi.act(&env, &cfg)? else {
            writer.truncate(summary.episodes)?;
            summary.truncated = true;
            break;
        };
        let r = env.step(&action)?;
        let done = r.dones[0];
        writer.step(StepRecord { step: 0, episode: summary.episodes, t, obs, action, reward: r.rewards[0], done })?;
        summary.steps += 1;
        if let Policy::Expert(pool) = &mut pi {
            pool.observe_dones(&r.dones);
        }
        if done {
            summary.episodes += 1;
            summary.successes += r.infos[0].success as usize;
        }
        obs = r.observations;
    }
    writer.finish()?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayReport {
    pub steps: usize,
    pub episodes: usize,
    /// Largest absolute observation difference, when verifying.
    pub max_obs_deviation: Option<f64>,
    pub max_reward_deviation: Option<f64>,
    pub done_mismatches: usize,
    pub config_hash_matches: bool,
}

impl ReplayReport {
    pub fn is_exact(&self) -> bool {
        self.max_obs_deviation.unwrap_or(0.0) == 0.0
            && self.max_reward_deviation.unwrap_or(0.0) == 0.0
            && self.done_mismatches == 0
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| if x.to_bits() == y.to_bits() { 0.0 } else { (x - y).abs() })
        .fold(0.0, |m, d| if d.is_nan() { f64::INFINITY } else { m.max(d) })
}

/// Re-executes the recorded actions. `seed` replaces the recorded seed.
pub fn replay(ep: &EpisodeLog, verify: bool, seed: Option<u64>) -> Result<ReplayReport, RecordError> {
    let cfg = &ep.header.task_config;
    let scene = make_scene(cfg)?;
    let hash_ok = config_hash(&scene) == ep.header.config_hash;
    if !hash_ok {
        log::warn!("config hash differs from the log; replaying anyway");
    }
    let mut env = make_task(cfg, 1)?;
    if env.obs_dim() != ep.header.obs_width() {
        return Err(RecordError::Layout { expected: ep.header.obs_width(), found: env.obs_dim() });
    }
    let mut obs = env.seed(seed.unwrap_or(ep.header.seed));
    let mut dev_obs = 0.0f64;
    let mut dev_rew = 0.0f64;
    let mut mismatches = 0;
    for rec in &ep.steps {
        if verify {
            dev_obs = dev_obs.max(max_abs_diff(&obs, &rec.obs));
        }
        let r = env.step(&rec.action)?;
        if verify {
            dev_rew = dev_rew.max(max_abs_diff(&r.rewards, &[rec.reward]));
            mismatches += (r.dones[0] != rec.done) as usize;
        }
        obs = r.observations;
    }
    Ok(ReplayReport {
        steps: ep.steps.len(),
        episodes: ep.episodes(),
        max_obs_deviation: verify.then_some(dev_obs),
        max_reward_deviation: verify.then_some(dev_rew),
        done_mismatches: mismatches,
        config_hash_matches: hash_ok,
    })
}

pub fn replay_file(path: &std::path::Path, verify: bool, seed: Option<u64>) -> Result<ReplayReport, RecordError> {
    let file = std::fs::File::open(path)?;
    let ep = read_log(std::io::BufReader::new(file))?;
    replay(&ep, verify, seed)
}

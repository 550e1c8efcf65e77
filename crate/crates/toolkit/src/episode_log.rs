//! Line-delimited JSON episode logs.
//!
//! A log is one header line followed by one line per control step. An
//! interrupted recording ends with a `truncated` marker line.

use std::io::{BufRead, Write};

use orbitlite_core::tasks::TaskConfig;
use orbitlite_core::world::SceneConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log is empty")]
    Empty,
    #[error("first line is not a header")]
    MissingHeader,
    #[error("format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("log truncated at line {line}; last valid step is {}", last_step.map_or("none".to_string(), |s| s.to_string()))]
    Truncated { line: usize, last_step: Option<usize> },
    #[error("line {line}: expected step {expected}, found {found}")]
    NonContiguous { line: usize, expected: usize, found: usize },
    #[error("line {line}: {what} has length {found}, layout declares {expected}")]
    Width { line: usize, what: &'static str, expected: usize, found: usize },
    #[error("second header at line {0}")]
    DuplicateHeader(usize),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub format_version: u32,
    pub task: String,
    pub task_config: TaskConfig,
    /// Hex SHA-256 of the resolved scene document.
    pub config_hash: String,
    pub seed: u64,
    pub dt: f64,
    pub decimation: u64,
    pub obs_layout: Vec<(String, usize)>,
    pub action_layout: Vec<(String, usize)>,
    pub policy: String,
}

impl Header {
    pub fn obs_width(&self) -> usize {
        self.obs_layout.iter().map(|(_, w)| w).sum()
    }

    pub fn action_width(&self) -> usize {
        self.action_layout.iter().map(|(_, w)| w).sum()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub episode: usize,
    /// Sim time at which `obs` was taken.
    pub t: f64,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Line {
    Header(Header),
    Step(StepRecord),
    Truncated { episode: usize, step: usize },
}

/// Hash of the canonical JSON form of a scene.
pub fn config_hash(scene: &SceneConfig) -> String {
    // Value keeps maps sorted, so the text is canonical
    let value = serde_json::to_value(scene).expect("scene serializes");
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

pub struct LogWriter<W: Write> {
    out: W,
    next_step: usize,
}

impl<W: Write> LogWriter<W> {
    pub fn new(mut out: W, header: &Header) -> Result<Self, LogError> {
        write_line(&mut out, &Line::Header(header.clone()))?;
        Ok(Self { out, next_step: 0 })
    }

    pub fn next_step(&self) -> usize {
        self.next_step
    }

    pub fn step(&mut self, mut rec: StepRecord) -> Result<(), LogError> {
        rec.step = self.next_step;
        self.next_step += 1;
        write_line(&mut self.out, &Line::Step(rec))
    }

    pub fn truncate(&mut self, episode: usize) -> Result<(), LogError> {
        write_line(&mut self.out, &Line::Truncated { episode, step: self.next_step })
    }

    pub fn finish(mut self) -> Result<W, LogError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

fn write_line<W: Write>(out: &mut W, line: &Line) -> Result<(), LogError> {
    serde_json::to_writer(&mut *out, line).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub header: Header,
    pub steps: Vec<StepRecord>,
    /// Episode cut short by a truncation marker.
    pub truncated: Option<usize>,
}

impl EpisodeLog {
    pub fn episodes(&self) -> usize {
        self.steps.iter().filter(|s| s.done).count()
    }
}

pub fn read_log<R: BufRead>(input: R) -> Result<EpisodeLog, LogError> {
    let mut header: Option<Header> = None;
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut truncated = None;
    for (i, text) in input.lines().enumerate() {
        let text = text?;
        let n = i + 1;
        if text.trim().is_empty() {
            continue;
        }
        let line: Line = match serde_json::from_str(&text) {
            Ok(l) => l,
            Err(_) if header.is_none() => {
                // tolerate newer headers only far enough to report the version
                let v: Option<u32> = serde_json::from_str::<serde_json::Value>(&text)
                    .ok()
                    .and_then(|v| v.get("format_version").and_then(|x| x.as_u64()))
                    .map(|x| x as u32);
                return Err(match v {
                    Some(found) if found != FORMAT_VERSION => LogError::Version { found },
                    _ => LogError::MissingHeader,
                });
            }
            Err(_) => return Err(LogError::Truncated { line: n, last_step: steps.last().map(|s| s.step) }),
        };
        match line {
            Line::Header(h) => {
                if header.is_some() {
                    return Err(LogError::DuplicateHeader(n));
                }
                if h.format_version != FORMAT_VERSION {
                    return Err(LogError::Version { found: h.format_version });
                }
                header = Some(h);
            }
            Line::Step(s) => {
                let h = header.as_ref().ok_or(LogError::MissingHeader)?;
                if s.step != steps.len() {
                    return Err(LogError::NonContiguous { line: n, expected: steps.len(), found: s.step });
                }
                check_width(n, "obs", h.obs_width(), s.obs.len())?;
                check_width(n, "action", h.action_width(), s.action.len())?;
                steps.push(s);
            }
            Line::Truncated { episode, .. } => {
                header.as_ref().ok_or(LogError::MissingHeader)?;
                truncated = Some(episode);
            }
        }
    }
    let header = header.ok_or(LogError::Empty)?;
    if let Some(last) = steps.last() {
        if !last.done && truncated.is_none() {
            return Err(LogError::Truncated { line: steps.len() + 2, last_step: Some(last.step) });
        }
    }
    Ok(EpisodeLog { header, steps, truncated })
}

fn check_width(line: usize, what: &'static str, expected: usize, found: usize) -> Result<(), LogError> {
    if expected != found {
        return Err(LogError::Width { line, what, expected, found });
    }
    Ok(())
}

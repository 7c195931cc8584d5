//! On-disk formats: config files, checkpoints, episode logs and CSV exports.
//!
//! Checkpoints are line-oriented text. Every number is written with Rust's
//! shortest round-trip exponent formatting, so parsing restores the exact
//! bits. The last line carries a SHA-256 of everything before it.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::FrameEvents;
use crate::nn::Tensor;
use crate::rarl::{AgentRole, PassLog, Termination};
use crate::sac::{SacAgent, SacConfig};
use crate::scenario::{Action, EpisodeHeader, ScenarioRecord, StepRecord, StepRewards, VehicleState};
use crate::dynamics::PhysicsFrame;
use crate::{Error, ExperimentConfig, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "nearmiss-checkpoint";

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text)
}

/// Writes the canonical form of `cfg`.
pub fn write_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::write(path, cfg.canonical_text()).map_err(|e| Error::io(path, e))
}

/// Trained parameters of one role after one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub role: AgentRole,
    pub round: usize,
    pub config_hash: String,
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_agent(role: AgentRole, round: usize, cfg: &ExperimentConfig, agent: &SacAgent) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            role,
            round,
            config_hash: cfg.hash(),
            obs_dim: agent.obs_dim(),
            hidden: agent.cfg.hidden.clone(),
            tensors: agent.tensors(),
        }
    }

    /// Refuses a checkpoint written under a different config unless `force`.
    pub fn check_config(&self, cfg: &ExperimentConfig, force: bool) -> Result<()> {
        let expected = cfg.hash();
        if !force && self.config_hash != expected {
            return Err(Error::HashMismatch { expected, found: self.config_hash.clone() });
        }
        Ok(())
    }

    /// Rebuilds the agent. Learning settings come from `sac`; the network
    /// shape comes from the checkpoint.
    pub fn to_agent(&self, sac: &SacConfig) -> Result<SacAgent> {
        let cfg = SacConfig { hidden: self.hidden.clone(), ..sac.clone() };
        SacAgent::from_tensors(self.obs_dim, cfg, &self.tensors)
    }

    pub fn to_text(&self) -> String {
        let mut body = String::new();
        let join = |xs: &[usize], sep: &str| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep);
        body.push_str(CHECKPOINT_MAGIC);
        body.push('\n');
        body.push_str(&format!("format_version = {}\n", self.format_version));
        body.push_str(&format!("role = {}\n", self.role));
        body.push_str(&format!("round = {}\n", self.round));
        body.push_str(&format!("config_hash = {}\n", self.config_hash));
        body.push_str(&format!("obs_dim = {}\n", self.obs_dim));
        body.push_str(&format!("hidden = {}\n", join(&self.hidden, ",")));
        body.push_str(&format!("tensors = {}\n", self.tensors.len()));
        for t in &self.tensors {
            body.push_str(&format!("tensor {} {}\n", t.name, join(&t.shape, "x")));
            let values: Vec<String> = t.data.iter().map(|v| format!("{v:e}")).collect();
            body.push_str(&values.join(" "));
            body.push('\n');
        }
        let digest = hex::encode(Sha256::digest(body.as_bytes()));
        body.push_str(&format!("end sha256={digest}\n"));
        body
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        // The footer must be intact before anything else is trusted.
        let body_end = text.trim_end_matches('\n').rfind('\n').map_or(0, |i| i + 1);
        let footer = text[body_end..].trim_end_matches('\n');
        let digest = footer
            .strip_prefix("end sha256=")
            .filter(|d| d.len() == 64 && d.bytes().all(|b| b.is_ascii_hexdigit()) && text.ends_with('\n'))
            .ok_or_else(|| Error::Truncated(source.to_string()))?;
        let body = &text[..body_end];
        if hex::encode(Sha256::digest(body.as_bytes())) != digest {
            return Err(Error::Checksum(source.to_string()));
        }

        let mut lines = body.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Truncated(format!("{source}: missing {what}")));
        let parse_err = |line: usize, msg: String| Error::Parse { line, msg };

        let (n, magic) = next("magic line")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(parse_err(n, format!("expected {CHECKPOINT_MAGIC:?}")));
        }
        let mut field = |key: &str| -> Result<(usize, String)> {
            let (n, line) = next(key)?;
            let value = line
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(" = "))
                .ok_or_else(|| parse_err(n, format!("expected `{key} = ...`")))?;
            Ok((n, value.to_string()))
        };
        let num = |(n, v): (usize, String)| v.parse::<usize>().map_err(|e| parse_err(n, e.to_string()));

        let (n, v) = field("format_version")?;
        let format_version: u32 = v.parse().map_err(|e: std::num::ParseIntError| parse_err(n, e.to_string()))?;
        if format_version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: format_version, expected: CHECKPOINT_VERSION });
        }
        let (n, v) = field("role")?;
        let role: AgentRole = v.parse().map_err(|_| parse_err(n, format!("bad role {v:?}")))?;
        let round = num(field("round")?)?;
        let (_, config_hash) = field("config_hash")?;
        let obs_dim = num(field("obs_dim")?)?;
        let (n, v) = field("hidden")?;
        let hidden = v
            .split(',')
            .map(|x| x.parse::<usize>().map_err(|e| parse_err(n, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let count = num(field("tensors")?)?;

        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, head) = next("tensor header")?;
            let mut parts = head.split(' ');
            let (Some("tensor"), Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(parse_err(n, "expected `tensor NAME DIMS`".into()));
            };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|e| parse_err(n, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let (n, values) = next("tensor values")?;
            let data = if values.is_empty() {
                Vec::new()
            } else {
                values
                    .split(' ')
                    .map(|v| v.parse::<f64>().map_err(|e| parse_err(n, format!("{v:?}: {e}"))))
                    .collect::<Result<Vec<_>>>()?
            };
            if data.len() != shape.iter().product::<usize>() {
                return Err(parse_err(n, format!("tensor {name} has {} values for shape {shape:?}", data.len())));
            }
            tensors.push(Tensor { name: name.to_string(), shape, data });
        }
        if let Some((n, _)) = lines.next() {
            return Err(parse_err(n, "unexpected content after the last tensor".into()));
        }
        Ok(Self { format_version, role, round, config_hash, obs_dim, hidden, tensors })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_text(&text, &path.display().to_string())
}

/// Per-vehicle entry of a log frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogVehicle {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
    pub accel: f64,
    pub omega: f64,
    pub p: f64,
    pub delta: f64,
}

/// One physics frame. Rewards and termination ride on the last frame of
/// each control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFrame {
    pub t: f64,
    pub step: usize,
    pub frame: usize,
    pub vehicles: Vec<LogVehicle>,
    pub events: FrameEvents,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<StepRewards>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination: Option<Termination>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Header(EpisodeHeader),
    Frame(LogFrame),
}

/// Streams an episode log one line at a time.
pub struct LogWriter {
    out: BufWriter<File>,
    ids: Vec<u32>,
    path: PathBuf,
}

impl LogWriter {
    pub fn create(path: &Path, header: &EpisodeHeader) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            ids: header.initial.vehicles.iter().map(|v| v.id).collect(),
            path: path.to_path_buf(),
        };
        w.line(&LogLine::Header(header.clone()))?;
        w.flush()?;
        Ok(w)
    }

    fn line(&mut self, line: &LogLine) -> Result<()> {
        let text = serde_json::to_string(line).map_err(|e| Error::Domain(e.to_string()))?;
        writeln!(self.out, "{text}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    /// Writes every frame of a control step, then flushes.
    pub fn write_step(&mut self, step: &StepRecord) -> Result<()> {
        let last = step.frames.len().saturating_sub(1);
        for (k, f) in step.frames.iter().enumerate() {
            let vehicles = self
                .ids
                .iter()
                .zip(&f.states)
                .zip(&step.actions)
                .map(|((&id, s), a)| LogVehicle {
                    id,
                    x: s.x,
                    y: s.y,
                    v: s.v,
                    theta: s.theta,
                    accel: s.accel,
                    omega: s.omega,
                    p: a.p,
                    delta: a.delta,
                })
                .collect();
            let frame = LogFrame {
                t: f.t,
                step: step.step,
                frame: k,
                vehicles,
                events: f.events.clone(),
                rewards: (k == last).then_some(step.rewards),
                termination: if k == last { step.termination } else { None },
            };
            self.line(&LogLine::Frame(frame))?;
        }
        self.flush()
    }
}

pub fn write_log(path: &Path, record: &ScenarioRecord) -> Result<()> {
    let mut w = LogWriter::create(path, &record.header)?;
    for s in &record.steps {
        w.write_step(s)?;
    }
    Ok(())
}

/// Reads and validates an episode log: monotone time, constant vehicle
/// set, complete control steps.
pub fn read_log(path: &Path) -> Result<ScenarioRecord> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_log(BufReader::new(file), false)
}

/// Like [`read_log`] but drops an unfinished trailing step, as left by an
/// interrupted run.
pub fn read_log_prefix(path: &Path) -> Result<ScenarioRecord> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_log(BufReader::new(file), true)
}

pub fn parse_log<R: BufRead>(reader: R, allow_partial: bool) -> Result<ScenarioRecord> {
    let mut header: Option<EpisodeHeader> = None;
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut pending: Vec<LogFrame> = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    let mut n_lines = 0;
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        n_lines = n;
        let err = |msg: String| Error::Parse { line: n, msg };
        let line = line.map_err(|e| err(e.to_string()))?;
        let parsed: LogLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        match (parsed, &header) {
            (LogLine::Header(h), None) => {
                if h.initial.vehicles.is_empty() || h.frames_per_step == 0 {
                    return Err(err("header needs vehicles and frames_per_step >= 1".into()));
                }
                last_t = h.initial.t;
                header = Some(h);
            }
            (LogLine::Header(_), Some(_)) => return Err(err("second header record".into())),
            (LogLine::Frame(_), None) => return Err(err("frame before header".into())),
            (LogLine::Frame(f), Some(h)) => {
                let ids: Vec<u32> = h.initial.vehicles.iter().map(|v| v.id).collect();
                if !(f.t > last_t) {
                    return Err(err(format!("time {} does not advance past {last_t}", f.t)));
                }
                if f.vehicles.len() != ids.len() || f.vehicles.iter().zip(&ids).any(|(v, &id)| v.id != id) {
                    return Err(err(format!("vehicle set differs from the header ({} vehicles)", ids.len())));
                }
                if f.step != steps.len() || f.frame != pending.len() {
                    return Err(err(format!("expected step {} frame {}", steps.len(), pending.len())));
                }
                if pending.len() >= h.frames_per_step {
                    return Err(err("too many frames in one step".into()));
                }
                last_t = f.t;
                let closes = f.rewards.is_some();
                pending.push(f);
                if closes {
                    if pending.len() != h.frames_per_step {
                        return Err(err(format!("step has {} frames, expected {}", pending.len(), h.frames_per_step)));
                    }
                    let frames = std::mem::take(&mut pending);
                    let last = frames.last().expect("non-empty");
                    let rewards = last.rewards.expect("closing frame");
                    let termination = last.termination;
                    let actions = last.vehicles.iter().map(|v| Action { p: v.p, delta: v.delta }).collect();
                    steps.push(StepRecord {
                        step: last.step,
                        actions,
                        rewards,
                        termination,
                        frames: frames
                            .into_iter()
                            .map(|f| PhysicsFrame {
                                t: f.t,
                                states: f
                                    .vehicles
                                    .iter()
                                    .map(|v| VehicleState {
                                        x: v.x,
                                        y: v.y,
                                        v: v.v,
                                        theta: v.theta,
                                        accel: v.accel,
                                        omega: v.omega,
                                    })
                                    .collect(),
                                events: f.events,
                            })
                            .collect(),
                    });
                }
            }
        }
    }
    let header = header.ok_or(Error::Parse { line: 1, msg: "missing header record".into() })?;
    if !pending.is_empty() && !allow_partial {
        return Err(Error::Parse { line: n_lines, msg: "log ends inside a control step".into() });
    }
    Ok(ScenarioRecord { header, steps })
}

/// Flattens a log into one CSV row per vehicle per physics frame.
pub fn log_to_csv<W: Write>(record: &ScenarioRecord, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let to_err = |e: csv::Error| Error::Domain(format!("csv: {e}"));
    out.write_record(["t", "step", "frame", "id", "x", "y", "v", "theta", "accel", "omega", "p", "delta"])
        .map_err(to_err)?;
    let ids: Vec<u32> = record.header.initial.vehicles.iter().map(|v| v.id).collect();
    for s in &record.steps {
        for (k, f) in s.frames.iter().enumerate() {
            for ((id, st), a) in ids.iter().zip(&f.states).zip(&s.actions) {
                out.write_record([
                    f.t.to_string(),
                    s.step.to_string(),
                    k.to_string(),
                    id.to_string(),
                    st.x.to_string(),
                    st.y.to_string(),
                    st.v.to_string(),
                    st.theta.to_string(),
                    st.accel.to_string(),
                    st.omega.to_string(),
                    a.p.to_string(),
                    a.delta.to_string(),
                ])
                .map_err(to_err)?;
            }
        }
    }
    out.flush().map_err(|e| Error::Domain(e.to_string()))
}

pub fn write_pass_logs<W: Write>(logs: &[PassLog], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for l in logs {
        out.serialize(l).map_err(|e| Error::Domain(format!("csv: {e}")))?;
    }
    out.flush().map_err(|e| Error::Domain(e.to_string()))
}

/// Exclusive ownership of an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.display().to_string())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

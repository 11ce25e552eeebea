//! The XEDS1 shard format.
//!
//! ```text
//! "XEDS1" | u32 LE header length | header JSON (UTF-8)
//! per trajectory: u32 LE steps T | u32 LE instruction id |
//!                 each declared stream as T * prod(shape) LE f32, header order
//! ```
//! The last declared stream is always `actions` with shape `[action_dim]`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadKind;

pub const SHARD_MAGIC: &[u8; 5] = b"XEDS1";
pub const ACTIONS: &str = "actions";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub name: String,
    /// Per-step shape.
    pub shape: Vec<usize>,
    pub dtype: String,
}

impl StreamSpec {
    pub fn f32(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_owned(),
            shape: shape.to_vec(),
            dtype: "f32".into(),
        }
    }

    pub fn step_len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardHeader {
    pub dataset: String,
    pub embodiment: String,
    pub streams: Vec<StreamSpec>,
    pub action_dim: usize,
    pub head: HeadKind,
    pub vocab_size: u32,
    /// Image stream sampled for hindsight goals, if the embodiment takes
    /// goal images.
    pub goal_stream: Option<String>,
}

impl ShardHeader {
    /// Header for observation streams `obs` followed by the action stream.
    pub fn new(
        dataset: &str,
        embodiment: &str,
        obs: Vec<StreamSpec>,
        head: HeadKind,
        vocab_size: u32,
        goal_stream: Option<&str>,
    ) -> Self {
        let mut streams = obs;
        streams.push(StreamSpec::f32(ACTIONS, &[head.action_dim()]));
        Self {
            dataset: dataset.to_owned(),
            embodiment: embodiment.to_owned(),
            streams,
            action_dim: head.action_dim(),
            head,
            vocab_size,
            goal_stream: goal_stream.map(str::to_owned),
        }
    }

    fn validate(&self) -> Result<()> {
        let last = self.streams.last();
        if last.map(|s| (s.name.as_str(), s.shape.as_slice())) != Some((ACTIONS, &[self.action_dim]))
        {
            return Err(Error::Format(format!(
                "last stream must be `{ACTIONS}` with shape [{}]",
                self.action_dim
            )));
        }
        if self.action_dim != self.head.action_dim() {
            return Err(Error::Format(format!(
                "action_dim {} does not match head {}",
                self.action_dim, self.head
            )));
        }
        for s in &self.streams {
            if s.dtype != "f32" {
                return Err(Error::Format(format!(
                    "stream `{}` has unsupported dtype {}",
                    s.name, s.dtype
                )));
            }
        }
        if let Some(g) = &self.goal_stream {
            if !self.streams.iter().any(|s| &s.name == g) {
                return Err(Error::Format(format!("goal stream `{g}` is not declared")));
            }
        }
        Ok(())
    }

    pub fn stream(&self, name: &str) -> Option<&StreamSpec> {
        self.streams.iter().find(|s| s.name == name)
    }
}

/// One episode. `streams` holds every observation stream plus `actions`,
/// each `steps * prod(shape)` values, row-major by step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub embodiment: String,
    pub instruction: u32,
    pub steps: usize,
    pub streams: BTreeMap<String, Vec<f32>>,
}

impl TrajectoryRecord {
    pub fn stream(&self, name: &str) -> Result<&[f32]> {
        self.streams
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup {
                kind: "stream",
                name: name.to_owned(),
            })
    }

    /// Step `t` of a stream whose per-step length is `len`.
    pub fn step_of<'a>(&'a self, name: &str, len: usize, t: usize) -> Result<&'a [f32]> {
        let s = self.stream(name)?;
        s.get(t * len..(t + 1) * len).ok_or(Error::Range {
            index: t,
            size: self.steps,
        })
    }

    pub fn actions(&self) -> Result<&[f32]> {
        self.stream(ACTIONS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetShard {
    pub header: ShardHeader,
    pub trajectories: Vec<TrajectoryRecord>,
}

fn check_trajectory(header: &ShardHeader, i: usize, t: &TrajectoryRecord) -> Result<()> {
    if t.embodiment != header.embodiment {
        return Err(Error::Format(format!(
            "trajectory {i} is `{}` in a `{}` shard",
            t.embodiment, header.embodiment
        )));
    }
    if t.streams.len() != header.streams.len() {
        return Err(Error::Format(format!(
            "trajectory {i} has {} streams, header declares {}",
            t.streams.len(),
            header.streams.len()
        )));
    }
    for s in &header.streams {
        let data = t.streams.get(&s.name).ok_or_else(|| {
            Error::Format(format!("trajectory {i} lacks stream `{}`", s.name))
        })?;
        if data.len() != t.steps * s.step_len() {
            let per_step = if t.steps > 0 { data.len() / t.steps } else { 0 };
            return Err(Error::Format(format!(
                "trajectory {i} stream `{}` has {per_step} values per step, header declares {:?}",
                s.name, s.shape
            )));
        }
    }
    if t.instruction >= header.vocab_size {
        return Err(Error::Format(format!(
            "trajectory {i} instruction {} outside vocabulary {}",
            t.instruction, header.vocab_size
        )));
    }
    Ok(())
}

pub fn encode_shard(header: &ShardHeader, trajectories: &[TrajectoryRecord]) -> Result<Vec<u8>> {
    header.validate()?;
    for (i, t) in trajectories.iter().enumerate() {
        check_trajectory(header, i, t)?;
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in trajectories {
        out.extend_from_slice(&(t.steps as u32).to_le_bytes());
        out.extend_from_slice(&t.instruction.to_le_bytes());
        for s in &header.streams {
            for v in &t.streams[&s.name] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corruption {
                offset: self.bytes.len() as u64,
                reason: format!("truncated while reading {what} at byte {}", self.pos),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode_shard(bytes: &[u8]) -> Result<DatasetShard> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(SHARD_MAGIC.len(), "magic")?;
    if magic != SHARD_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected XEDS1",
            String::from_utf8_lossy(magic)
        )));
    }
    let len = r.u32("header length")? as usize;
    let json = r.take(len, "header")?;
    let header: ShardHeader = serde_json::from_slice(json)
        .map_err(|e| Error::Format(format!("shard header: {e}")))?;
    header.validate()?;
    let mut trajectories = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos;
        let steps = r.u32("step count")? as usize;
        let instruction = r.u32("instruction id")?;
        let mut streams = BTreeMap::new();
        for s in &header.streams {
            let n = steps
                .checked_mul(s.step_len())
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Corruption {
                    offset: start as u64,
                    reason: format!("step count {steps} overflows"),
                })?;
            let raw = r.take(n, &format!("stream `{}`", s.name))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            streams.insert(s.name.clone(), data);
        }
        let t = TrajectoryRecord {
            embodiment: header.embodiment.clone(),
            instruction,
            steps,
            streams,
        };
        check_trajectory(&header, trajectories.len(), &t)?;
        trajectories.push(t);
    }
    Ok(DatasetShard {
        header,
        trajectories,
    })
}

pub fn write_shard(
    path: impl AsRef<Path>,
    header: &ShardHeader,
    trajectories: &[TrajectoryRecord],
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_shard(header, trajectories)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn read_shard(path: impl AsRef<Path>) -> Result<DatasetShard> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_shard(&bytes)
}

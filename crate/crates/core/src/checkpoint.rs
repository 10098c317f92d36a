//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "AISF" | u32 version | u64 checksum
//! u64 header length | header (UTF-8)
//! u64 tensor count | per tensor: u64 name length, name, u32 rank, rank × u64 dims, f32 data
//! ```
//!
//! The checksum is FNV-1a over every byte after the checksum field. The header
//! holds the run configuration, the training state and the normalization
//! statistics as three `[section]`s. Tensors are stored as f32; the fixed
//! reservoir weights are regenerated from the seed on load and kept at full
//! precision when they agree with the stored copy.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ingest::NormStats;
use crate::model::Model;
use crate::numeric::{hash_bytes, Tensor};
use crate::reservoir::ReservoirStack;
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"AISF";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    Magic,
    #[error("format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch (stored {stored:#018x}, computed {computed:#018x}); file truncated or corrupt")]
    Checksum { stored: u64, computed: u64 },
    #[error("file too short for the fixed header")]
    Truncated,
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("header: {0}")]
    Header(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    fn of(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            dims: t.shape().to_vec(),
            data: t.data().iter().map(|&x| x as f32).collect(),
        }
    }

    fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(&self.dims, self.data.iter().map(|&x| x as f64).collect())
    }
}

/// Training progress recorded alongside the parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainState {
    pub model_seed: u64,
    pub epoch: usize,
    pub best_val: f64,
    pub adam_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub header: String,
    pub tensors: Vec<NamedTensor>,
}

fn reservoir_tensors(tag: &str, stack: &ReservoirStack, out: &mut Vec<NamedTensor>) {
    for (l, layer) in stack.layers.iter().enumerate() {
        out.push(NamedTensor::of(format!("{tag}.l{}.w_in", l + 1), &layer.w_in));
        out.push(NamedTensor::of(format!("{tag}.l{}.w_rec", l + 1), &layer.w_rec));
        out.push(NamedTensor::of(format!("{tag}.l{}.bias", l + 1), &layer.bias));
    }
}

fn all_reservoir_tensors(model: &Model) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    reservoir_tensors("reservoir.fwd", &model.reservoir.forward, &mut out);
    if let Some(rev) = &model.reservoir.reverse {
        reservoir_tensors("reservoir.rev", rev, &mut out);
    }
    out
}

fn header_err(msg: impl Into<String>) -> Error {
    CheckpointError::Header(msg.into()).into()
}

/// Splits `[name]` sections of the header.
fn sections(header: &str) -> Vec<(&str, String)> {
    let mut out: Vec<(&str, String)> = Vec::new();
    for line in header.lines() {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            out.push((name, String::new()));
        } else if let Some(last) = out.last_mut() {
            last.1.push_str(line);
            last.1.push('\n');
        }
    }
    out
}

impl Checkpoint {
    /// Snapshot of a model, its optimizer moments and the run configuration.
    pub fn capture(run: &RunConfig, model: &Model, adam: &AdamState, epoch: usize, best_val: f64) -> Self {
        let mut header = String::new();
        let _ = writeln!(header, "[run]\n{run}[state]");
        let _ = writeln!(header, "model_seed = {}", model.seed);
        let _ = writeln!(header, "epoch = {epoch}");
        let _ = writeln!(header, "best_val = {best_val:?}");
        let _ = writeln!(header, "adam_step = {}", adam.step);
        let _ = write!(header, "[norm_stats]\n{}", model.stats.to_csv());
        let mut tensors: Vec<NamedTensor> = model.store.iter().map(|(_, n, t)| NamedTensor::of(n, t)).collect();
        for (id, name, _) in model.store.iter() {
            tensors.push(NamedTensor::of(format!("adam.m.{name}"), &adam.m[id.index()]));
            tensors.push(NamedTensor::of(format!("adam.v.{name}"), &adam.v[id.index()]));
        }
        tensors.extend(all_reservoir_tensors(model));
        Self {
            version: VERSION,
            header,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend((self.header.len() as u64).to_le_bytes());
        body.extend(self.header.as_bytes());
        body.extend((self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            body.extend((t.name.len() as u64).to_le_bytes());
            body.extend(t.name.as_bytes());
            body.extend((t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                body.extend((d as u64).to_le_bytes());
            }
            for &x in &t.data {
                body.extend(x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(body.len() + 16);
        out.extend(MAGIC);
        out.extend(self.version.to_le_bytes());
        out.extend(hash_bytes(&body).to_le_bytes());
        out.extend(body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic.into());
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated.into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            }
            .into());
        }
        let stored = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body = &bytes[16..];
        let computed = hash_bytes(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed }.into());
        }
        let mut r = Reader { buf: body, pos: 0 };
        let hlen = r.u64()? as usize;
        let header = String::from_utf8(r.take(hlen)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("header is not UTF-8".into()))?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u64()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| CheckpointError::Malformed("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()).into());
        }
        Ok(Self {
            version,
            header,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let text = sections(&self.header)
            .into_iter()
            .find(|(n, _)| *n == "run")
            .ok_or_else(|| header_err("missing [run] section"))?
            .1;
        RunConfig::parse(&text)
    }

    pub fn state(&self) -> Result<TrainState> {
        let text = sections(&self.header)
            .into_iter()
            .find(|(n, _)| *n == "state")
            .ok_or_else(|| header_err("missing [state] section"))?
            .1;
        let get = |key: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| {
                    l.split_once('=')
                        .filter(|(k, _)| k.trim() == key)
                        .map(|(_, v)| v.trim())
                })
                .ok_or_else(|| header_err(format!("missing `{key}`")))
        };
        let bad = |key: &str| header_err(format!("cannot parse `{key}`"));
        Ok(TrainState {
            model_seed: get("model_seed")?.parse().map_err(|_| bad("model_seed"))?,
            epoch: get("epoch")?.parse().map_err(|_| bad("epoch"))?,
            best_val: get("best_val")?.parse().map_err(|_| bad("best_val"))?,
            adam_step: get("adam_step")?.parse().map_err(|_| bad("adam_step"))?,
        })
    }

    pub fn norm_stats(&self) -> Result<NormStats> {
        let text = sections(&self.header)
            .into_iter()
            .find(|(n, _)| *n == "norm_stats")
            .ok_or_else(|| header_err("missing [norm_stats] section"))?
            .1;
        NormStats::from_csv(&text, Path::new("<checkpoint>"))
    }

    /// Rebuilds the model and optimizer state.
    ///
    /// Every learnable tensor and both moment tensors must be present with the
    /// shape the configuration implies; any other tensor is rejected.
    pub fn restore(&self) -> Result<(RunConfig, Model, AdamState, TrainState)> {
        let run = self.run_config()?;
        let state = self.state()?;
        let mut model = Model::new(run.model.clone(), self.norm_stats()?, state.model_seed)?;
        let mut adam = AdamState::new(&model.store);
        adam.step = state.adam_step;
        let mut expected: Vec<String> = Vec::new();
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            for (key, slot) in [
                (name.clone(), 0usize),
                (format!("adam.m.{name}"), 1),
                (format!("adam.v.{name}"), 2),
            ] {
                let t = self
                    .tensor(&key)
                    .ok_or_else(|| CheckpointError::MissingTensor(key.clone()))?;
                let want = model.store.get(id).shape().to_vec();
                if t.dims != want {
                    return Err(CheckpointError::TensorShape {
                        name: key,
                        expected: want,
                        found: t.dims.clone(),
                    }
                    .into());
                }
                let value = t.to_tensor()?;
                match slot {
                    0 => *model.store.get_mut(id) = value,
                    1 => adam.m[id.index()] = value,
                    _ => adam.v[id.index()] = value,
                }
                expected.push(key);
            }
        }
        let regenerated = all_reservoir_tensors(&model);
        let mut differs = false;
        for want in &regenerated {
            let Some(t) = self.tensor(&want.name) else {
                continue;
            };
            if t.dims != want.dims {
                return Err(CheckpointError::TensorShape {
                    name: want.name.clone(),
                    expected: want.dims.clone(),
                    found: t.dims.clone(),
                }
                .into());
            }
            differs |= t.data != want.data;
            expected.push(want.name.clone());
        }
        if differs {
            load_reservoir(self, &mut model)?;
        }
        if let Some(extra) = self.tensors.iter().find(|t| !expected.contains(&t.name)) {
            return Err(CheckpointError::UnexpectedTensor(extra.name.clone()).into());
        }
        Ok((run, model, adam, state))
    }
}

fn load_reservoir(ck: &Checkpoint, model: &mut Model) -> Result<()> {
    let mut stacks = vec![("reservoir.fwd", &mut model.reservoir.forward)];
    if let Some(rev) = model.reservoir.reverse.as_mut() {
        stacks.push(("reservoir.rev", rev));
    }
    for (tag, stack) in stacks {
        for (l, layer) in stack.layers.iter_mut().enumerate() {
            for (part, slot) in [
                ("w_in", &mut layer.w_in),
                ("w_rec", &mut layer.w_rec),
                ("bias", &mut layer.bias),
            ] {
                if let Some(t) = ck.tensor(&format!("{tag}.l{}.{part}", l + 1)) {
                    *slot = t.to_tensor()?;
                }
            }
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

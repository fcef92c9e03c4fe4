//! Binary checkpoint files.
//!
//! ```text
//! "GERU"  u32 version  u32 len + config text  u32 tensor count
//! per tensor: u32 len + name, u8 rank, rank × u32 dims, f32 data
//! ```
//! All integers and floats are little-endian. Batch-norm running statistics
//! are stored as ordinary tensors; optional training state rides along as
//! `state.*` config keys and extra tensors.

use std::fs;
use std::path::Path;

use super::{NetConfig, Network};
use crate::error::{Error, Result};
use crate::kv;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"GERU";
pub const FORMAT_VERSION: u32 = 1;

/// Raw checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl CheckpointData {
    pub fn config(&self) -> Result<NetConfig> {
        NetConfig::from_text(&self.config_text)
    }

    /// `state.*` entries of the config text, with the prefix removed.
    pub fn state(&self) -> Result<Vec<(String, String)>> {
        Ok(kv::parse(&self.config_text)?
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix("state.").map(|s| (s.to_string(), v)))
            .collect())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_text)?;
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_str(&mut out, name)?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("{name}: rank too large")))?;
            out.push(rank);
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let config_text = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let raw = r.take(
                len.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(CheckpointData { config_text, tensors })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file: wanted {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

fn snapshot<F: Scalar>(net: &Network<F>) -> Vec<(String, Tensor<f32>)> {
    let mut v: Vec<(String, Tensor<f32>)> = net.params().iter().map(|p| (p.name.clone(), p.value.cast())).collect();
    v.extend(net.buffers().into_iter().map(|(n, t)| (n, t.cast())));
    v
}

/// Serializes the network plus optional `state.*` keys and extra tensors.
pub fn save_with_state<F: Scalar>(
    net: &Network<F>,
    path: &Path,
    state: &[(String, String)],
    extra: Vec<(String, Tensor<f32>)>,
) -> Result<()> {
    let mut text = net.config().to_text();
    let prefixed: Vec<(String, String)> = state.iter().map(|(k, v)| (format!("state.{k}"), v.clone())).collect();
    text.push_str(&kv::render(&prefixed));
    let mut tensors = snapshot(net);
    tensors.extend(extra);
    let bytes = CheckpointData {
        config_text: text,
        tensors,
    }
    .to_bytes()?;
    // write-then-rename so an interrupted save never leaves a torn file behind
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save<F: Scalar>(net: &Network<F>, path: &Path) -> Result<()> {
    save_with_state(net, path, &[], Vec::new())
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    CheckpointData::from_bytes(&fs::read(path)?)
}

fn same_architecture(a: &NetConfig, b: &NetConfig) -> bool {
    NetConfig {
        init_seed: 0,
        ..a.clone()
    } == NetConfig {
        init_seed: 0,
        ..b.clone()
    }
}

impl<F: Scalar> Network<F> {
    /// Copies parameters and statistics from `data`. The stored network must
    /// have the same architecture; tensors the network does not own are ignored.
    pub fn load_from(&mut self, data: &CheckpointData) -> Result<()> {
        let stored = data.config()?;
        if !same_architecture(&stored, self.config()) {
            return Err(Error::ConfigMismatch(format!(
                "stored `{}`, expected `{}`",
                stored.to_text().trim().replace('\n', ", "),
                self.config().to_text().trim().replace('\n', ", ")
            )));
        }
        for p in self.params_mut() {
            let t = data
                .tensor(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        let names: Vec<String> = self.buffers().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let t = data
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            self.load_buffer(&name, &t.cast())?;
        }
        Ok(())
    }
}

pub fn load_with_state<F: Scalar>(path: &Path) -> Result<(Network<F>, CheckpointData)> {
    let data = read_checkpoint(path)?;
    let mut net = Network::build(&data.config()?)?;
    net.load_from(&data)?;
    Ok((net, data))
}

pub fn load<F: Scalar>(path: &Path) -> Result<Network<F>> {
    Ok(load_with_state(path)?.0)
}

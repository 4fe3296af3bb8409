//! Binary checkpoint container plus its structured-text manifest sidecar.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "DEXPRIOR"            8-byte magic
//! version: u32
//! n_sections: u32
//! n_sections x { tag: [u8; 8] (ASCII, space padded), len: u64, payload: [u8; len] }
//! ```
//!
//! An agent checkpoint holds, in order, `LAYERS` (policy dims then value
//! dims, each as `n: u32` + `n x u32`), `NORMSTAT` (`dim: u32`, `count: f64`,
//! `mean`, `m2`, `frozen: u8`), `LOGSTD` (`n: u32` + `n x f64`) and `PARAMS`
//! (policy parameters then value parameters as 8-byte floats). Synergy
//! decompositions go in `SYNERGY` sections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::ActorCritic;
use crate::error::{Error, Result};
use crate::nn::{GaussianPolicy, Mlp, RunningNormalizer};
use crate::synergy::SynergyDecomposition;

pub const MAGIC: &[u8; 8] = b"DEXPRIOR";
pub const FORMAT_VERSION: u32 = 1;

const TAG_LAYERS: &[u8; 8] = b"LAYERS  ";
const TAG_NORM: &[u8; 8] = b"NORMSTAT";
const TAG_LOGSTD: &[u8; 8] = b"LOGSTD  ";
const TAG_PARAMS: &[u8; 8] = b"PARAMS  ";
const TAG_SYNERGY: &[u8; 8] = b"SYNERGY ";

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|v| self.f64(*v));
    }
    fn dims(&mut self, dims: &[usize]) {
        self.u32(dims.len() as u32);
        dims.iter().for_each(|d| self.u32(*d as u32));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated at byte {} (wanted {n} more)", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn dims(&mut self) -> std::result::Result<Vec<usize>, String> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.u32().map(|d| d as usize)).collect()
    }
    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Generic container of tagged sections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub sections: Vec<([u8; 8], Vec<u8>)>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.sections.len() as u32);
        for (tag, payload) in &self.sections {
            w.buf.extend_from_slice(tag);
            w.u64(payload.len() as u64);
            w.buf.extend_from_slice(payload);
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let n = r.u32()? as usize;
        let mut sections = Vec::with_capacity(n);
        for _ in 0..n {
            let tag: [u8; 8] = r.take(8)?.try_into().unwrap();
            let len = r.u64()? as usize;
            sections.push((tag, r.take(len)?.to_vec()));
        }
        if !r.done() {
            return Err("trailing bytes after last section".into());
        }
        Ok(Self { sections })
    }

    fn get(&self, tag: &[u8; 8]) -> std::result::Result<&[u8], String> {
        self.sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| format!("missing section {}", String::from_utf8_lossy(tag).trim_end()))
    }
}

pub fn encode_agent(agent: &ActorCritic) -> Vec<u8> {
    let mut layers = Writer::default();
    layers.dims(agent.policy.net.dims());
    layers.dims(agent.value.dims());

    let n = &agent.normalizer;
    let mut norm = Writer::default();
    norm.u32(n.dim() as u32);
    norm.f64(n.count);
    norm.f64s(&n.mean);
    norm.f64s(&n.m2);
    norm.u8(n.frozen as u8);

    let mut log_std = Writer::default();
    log_std.u32(agent.policy.log_std.len() as u32);
    log_std.f64s(&agent.policy.log_std);

    let mut params = Writer::default();
    params.f64s(&agent.policy.net.params);
    params.f64s(&agent.value.params);

    Container {
        sections: vec![
            (*TAG_LAYERS, layers.buf),
            (*TAG_NORM, norm.buf),
            (*TAG_LOGSTD, log_std.buf),
            (*TAG_PARAMS, params.buf),
        ],
    }
    .encode()
}

pub fn decode_agent(bytes: &[u8]) -> std::result::Result<ActorCritic, String> {
    let c = Container::decode(bytes)?;
    let mut r = Reader::new(c.get(TAG_LAYERS)?);
    let pdims = r.dims()?;
    let vdims = r.dims()?;
    if pdims.len() < 2 || vdims.len() < 2 {
        return Err("layer dims too short".into());
    }

    let mut r = Reader::new(c.get(TAG_NORM)?);
    let dim = r.u32()? as usize;
    let count = r.f64()?;
    let mean = r.f64s(dim)?;
    let m2 = r.f64s(dim)?;
    let frozen = r.u8()? != 0;
    let normalizer = RunningNormalizer { count, mean, m2, frozen };

    let mut r = Reader::new(c.get(TAG_LOGSTD)?);
    let n = r.u32()? as usize;
    let log_std = r.f64s(n)?;

    let mut probe_p = Mlp::zeros(&pdims);
    let mut probe_v = Mlp::zeros(&vdims);
    let mut r = Reader::new(c.get(TAG_PARAMS)?);
    probe_p.params = r.f64s(probe_p.n_params())?;
    probe_v.params = r.f64s(probe_v.n_params())?;
    if !r.done() {
        return Err("parameter section length does not match layer dims".into());
    }
    if log_std.len() != probe_p.output_dim() || dim != probe_p.input_dim() {
        return Err("log_std or normalizer dimension does not match the policy".into());
    }
    Ok(ActorCritic { policy: GaussianPolicy { net: probe_p, log_std }, value: probe_v, normalizer })
}

/// Sidecar metadata written next to every checkpoint as `<file>.manifest.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub kind: String,
    pub config_hash: String,
    pub iteration: usize,
    pub seed: u64,
    pub task_ids: Vec<String>,
}

pub fn manifest_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".manifest.toml");
    PathBuf::from(s)
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

pub fn save_agent(path: &Path, agent: &ActorCritic, manifest: &CheckpointManifest) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, encode_agent(agent)).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let text = toml::to_string(manifest).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mp = manifest_path(path);
    fs::write(&mp, text).map_err(|e| Error::io(format!("writing {}", mp.display()), e))
}

pub fn load_agent(path: &Path) -> Result<ActorCritic> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_agent(&bytes).map_err(|r| ckpt_err(path, r))
}

pub fn load_manifest(path: &Path) -> Result<CheckpointManifest> {
    let mp = manifest_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(format!("reading {}", mp.display()), e))?;
    toml::from_str(&text).map_err(|e| ckpt_err(&mp, e.to_string()))
}

pub fn encode_synergies(items: &[(String, SynergyDecomposition)]) -> Vec<u8> {
    let sections = items
        .iter()
        .map(|(label, d)| {
            let mut w = Writer::default();
            w.str(label);
            w.u32(d.n_muscles as u32);
            w.u32(d.k as u32);
            w.u64(d.n_samples as u64);
            w.f64s(&d.w);
            w.f64s(&d.h);
            w.f64(d.vaf);
            w.u32(d.iterations_used as u32);
            w.u8(d.converged as u8);
            (*TAG_SYNERGY, w.buf)
        })
        .collect();
    Container { sections }.encode()
}

pub fn decode_synergies(bytes: &[u8]) -> std::result::Result<Vec<(String, SynergyDecomposition)>, String> {
    let c = Container::decode(bytes)?;
    c.sections
        .iter()
        .filter(|(t, _)| t == TAG_SYNERGY)
        .map(|(_, p)| {
            let mut r = Reader::new(p);
            let label = r.str()?;
            let n_muscles = r.u32()? as usize;
            let k = r.u32()? as usize;
            let n_samples = r.u64()? as usize;
            let w = r.f64s(n_muscles * k)?;
            let h = r.f64s(k * n_samples)?;
            let vaf = r.f64()?;
            let iterations_used = r.u32()? as usize;
            let converged = r.u8()? != 0;
            Ok((label, SynergyDecomposition { n_muscles, k, n_samples, w, h, vaf, iterations_used, converged }))
        })
        .collect()
}

pub fn save_synergies(path: &Path, items: &[(String, SynergyDecomposition)]) -> Result<()> {
    fs::write(path, encode_synergies(items)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_synergies(path: &Path) -> Result<Vec<(String, SynergyDecomposition)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_synergies(&bytes).map_err(|r| ckpt_err(path, r))
}

//! `.qgsc` training checkpoints.
//!
//! Layout (little-endian):
//!
//! | field | encoding |
//! |---|---|
//! | magic | `QGSC` |
//! | version | `u32` (1) |
//! | run config | blob: `u64` length + UTF-8 `key = value` text |
//! | scene | blob: `u64` length + a complete `.qgs` file |
//! | step | `u64` |
//! | seed | `u64` |
//! | RNG word position | `u128` |
//! | group count | `u32` |
//! | groups | see below |
//!
//! Each group: name blob, `f64` learning rate, `u64` Adam step, `u64`
//! length `n`, then `n` values, `n` first moments and `n` second moments as
//! `f64`.

use std::path::Path;

use super::binio::{read_file, write_atomic, Reader, Writer};
use super::config::RunConfig;
use super::scene::SceneFile;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QGSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupState {
    pub name: String,
    pub lr: f64,
    pub adam_step: u64,
    pub values: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub scene: SceneFile,
    pub step: u64,
    pub seed: u64,
    pub rng_word_pos: u128,
    pub groups: Vec<GroupState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.blob(self.config.to_text().as_bytes());
        w.blob(&self.scene.to_bytes());
        w.u64(self.step);
        w.u64(self.seed);
        w.u128(self.rng_word_pos);
        w.u32(self.groups.len() as u32);
        for g in &self.groups {
            w.blob(g.name.as_bytes());
            w.f64(g.lr);
            w.u64(g.adam_step);
            w.u64(g.values.len() as u64);
            w.f64s(&g.values);
            w.f64s(&g.m);
            w.f64s(&g.v);
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let at = r.offset();
        let text = std::str::from_utf8(r.blob("config")?).map_err(|_| Error::format(at, "config is not UTF-8"))?;
        let config = RunConfig::parse(text)?;
        let at = r.offset();
        let scene = SceneFile::from_bytes(r.blob("scene")?).map_err(|e| match e {
            Error::Format { offset, msg } => Error::format(at + 8 + offset, format!("embedded scene: {msg}")),
            other => other,
        })?;
        let step = r.u64("step")?;
        let seed = r.u64("seed")?;
        let rng_word_pos = r.u128("RNG position")?;
        let count = r.u32("group count")?;
        let mut groups = Vec::new();
        for _ in 0..count {
            let at = r.offset();
            let name = std::str::from_utf8(r.blob("group name")?).map_err(|_| Error::format(at, "group name is not UTF-8"))?.to_string();
            let lr = r.finite_f64("learning rate")?;
            let adam_step = r.u64("Adam step")?;
            let n = r.len(24, "group length")?;
            let values = r.finite_f64s(n, "parameter value")?;
            let m = r.finite_f64s(n, "first moment")?;
            let v = r.finite_f64s(n, "second moment")?;
            groups.push(GroupState { name, lr, adam_step, values, m, v });
        }
        r.expect_end()?;
        Ok(Self { config, scene, step, seed, rng_word_pos, groups })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

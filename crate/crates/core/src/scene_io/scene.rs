//! `.qgs` scene files.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `QGS1` |
//! | 4 | 4 | `u32` version (1) |
//! | 8 | 8 | `u64` Gaussian count `n` |
//! | 16 | 48 | bounds: `f64` min x, y, z, max x, y, z |
//! | 64 | 472 n | records of 59 `f64` each |
//!
//! A record is `mu (3), rot (w, x, y, z), log_scale (3), opacity_logit,
//! sh (48, channel-major)`.

use std::path::Path;

use super::binio::{read_file, write_atomic, Reader, Writer};
use crate::encoding::Aabb;
use crate::error::{Error, Result};
use crate::render::{Gaussian, GAUSSIAN_PARAMS};

pub const SCENE_MAGIC: &[u8; 4] = b"QGS1";
pub const SCENE_VERSION: u32 = 1;
pub const SCENE_HEADER_BYTES: usize = 64;
pub const RECORD_BYTES: usize = GAUSSIAN_PARAMS * 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneFile {
    pub bounds: Aabb,
    pub gaussians: Vec<Gaussian>,
}

impl SceneFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(SCENE_MAGIC);
        w.u32(SCENE_VERSION);
        w.u64(self.gaussians.len() as u64);
        w.f64s(&self.bounds.min);
        w.f64s(&self.bounds.max);
        for g in &self.gaussians {
            w.f64s(&g.to_flat());
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        let magic = r.take(4, "magic")?;
        if magic != SCENE_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected {SCENE_MAGIC:?}")));
        }
        let version = r.u32("version")?;
        if version != SCENE_VERSION {
            return Err(Error::Version { found: version, expected: SCENE_VERSION });
        }
        let at = r.offset();
        let n = r.u64("Gaussian count")?;
        let min = r.finite_f64s(3, "bounds")?;
        let max = r.finite_f64s(3, "bounds")?;
        if (n as u128) * RECORD_BYTES as u128 != r.remaining() as u128 {
            return Err(Error::format(
                at,
                format!("Gaussian count {n} implies {} record bytes, file has {}", n as u128 * RECORD_BYTES as u128, r.remaining()),
            ));
        }
        let bounds = Aabb::new([min[0], min[1], min[2]], [max[0], max[1], max[2]]);
        let mut gaussians = Vec::with_capacity(n as usize);
        for _ in 0..n {
            gaussians.push(Gaussian::from_flat(&r.finite_f64s(GAUSSIAN_PARAMS, "Gaussian record")?));
        }
        Ok(Self { bounds, gaussians })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

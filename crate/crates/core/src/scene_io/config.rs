//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys and duplicate keys are errors. Floats are written in the
//! shortest form that parses back to the same bits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::binio::{read_file, write_atomic};
use super::synthetic::TargetKind;
use crate::error::{Error, Result};
use crate::pipeline::{ModulationMode, PipelineKind};

/// Parsed key/value pairs with their line numbers.
#[derive(Debug, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    /// Removes `key` and parses it into `slot` if present.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, v)) = self.entries.remove(key) {
            *slot = v.parse().map_err(|e| Error::Config(format!("line {line}: {key} = '{v}': {e}")))?;
        }
        Ok(())
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((k, (line, _))) = self.entries.into_iter().min_by_key(|(_, (l, _))| *l) {
            return Err(Error::Config(format!("line {line}: unknown key '{k}'")));
        }
        Ok(())
    }
}

/// Everything that defines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub pipeline: PipelineKind,
    pub modulation: ModulationMode,
    /// Train plain SH Gaussians without a modulator.
    pub baseline: bool,
    pub iters: u64,
    pub lambda: f64,
    pub ansatz_layers: usize,
    pub hash_levels: usize,
    pub hash_features: usize,
    pub hash_table_log2: u32,
    pub hash_base_resolution: usize,
    pub hash_max_resolution: usize,
    pub hidden: usize,
    pub proj_hidden: usize,
    pub dropout: f64,
    pub lr_position: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_sh: f64,
    pub lr_hash: f64,
    pub lr_network: f64,
    pub lr_quantum: f64,
    /// Every learning rate decays exponentially to this fraction of its
    /// initial value over `iters` steps.
    pub lr_decay: f64,
    /// Metrics row every this many steps (0 = only at the end).
    pub log_every: u64,
    /// Checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pipeline: PipelineKind::I,
            modulation: ModulationMode::Full,
            baseline: false,
            iters: 2000,
            lambda: 0.2,
            ansatz_layers: 4,
            hash_levels: 8,
            hash_features: 2,
            hash_table_log2: 14,
            hash_base_resolution: 16,
            hash_max_resolution: 512,
            hidden: 64,
            proj_hidden: 64,
            dropout: 0.1,
            lr_position: 1.6e-4,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 0.05,
            lr_sh: 2.5e-3,
            lr_hash: 1e-2,
            lr_network: 1e-3,
            lr_quantum: 7.5e-3,
            lr_decay: 0.1,
            log_every: 50,
            checkpoint_every: 500,
        }
    }
}

macro_rules! fields {
    ($m:ident) => {
        $m!(seed, pipeline, modulation, baseline, iters, lambda, ansatz_layers, hash_levels, hash_features, hash_table_log2,
            hash_base_resolution, hash_max_resolution, hidden, proj_hidden, dropout, lr_position, lr_rotation, lr_scale,
            lr_opacity, lr_sh, lr_hash, lr_network, lr_quantum, lr_decay, log_every, checkpoint_every)
    };
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let mut c = Self::default();
        macro_rules! take {
            ($($f:ident),*) => { $( kv.take(stringify!($f), &mut c.$f)?; )* };
        }
        fields!(take);
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! put {
            ($($f:ident),*) => { $( let _ = writeln!(s, "{} = {}", stringify!($f), self.$f); )* };
        }
        fields!(put);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("lambda {} must lie in (0, 1)", self.lambda)));
        }
        if self.hash_table_log2 > 30 {
            return Err(Error::Config("hash_table_log2 above 30".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay {} must lie in (0, 1]", self.lr_decay)));
        }
        for (name, lr) in [
            ("lr_position", self.lr_position),
            ("lr_rotation", self.lr_rotation),
            ("lr_scale", self.lr_scale),
            ("lr_opacity", self.lr_opacity),
            ("lr_sh", self.lr_sh),
            ("lr_hash", self.lr_hash),
            ("lr_network", self.lr_network),
            ("lr_quantum", self.lr_quantum),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} = {lr} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::parse(&String::from_utf8_lossy(&bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// Parameters of a generated dataset; the targets are a pure function of
/// these values.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: TargetKind,
    pub num_gaussians: usize,
    pub seed: u64,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub elevation_deg: f64,
    /// Camera distance in units of the scene extent.
    pub radius_factor: f64,
    /// Focal length in units of the image width.
    pub focal_factor: f64,
    pub white_background: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: TargetKind::StepLobe,
            num_gaussians: 8,
            seed: 0,
            views: 16,
            width: 64,
            height: 64,
            elevation_deg: 30.0,
            radius_factor: 4.0,
            focal_factor: 2.5,
            white_background: false,
        }
    }
}

macro_rules! dataset_fields {
    ($m:ident) => {
        $m!(kind, num_gaussians, seed, views, width, height, elevation_deg, radius_factor, focal_factor, white_background)
    };
}

impl DatasetConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let mut c = Self::default();
        macro_rules! take {
            ($($f:ident),*) => { $( kv.take(stringify!($f), &mut c.$f)?; )* };
        }
        dataset_fields!(take);
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! put {
            ($($f:ident),*) => { $( let _ = writeln!(s, "{} = {}", stringify!($f), self.$f); )* };
        }
        dataset_fields!(put);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_gaussians == 0 || self.views == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("num_gaussians, views, width and height must be positive".into()));
        }
        if !(self.radius_factor > 0.0 && self.focal_factor > 0.0) {
            return Err(Error::Config("radius_factor and focal_factor must be positive".into()));
        }
        if !(self.elevation_deg.abs() < 90.0) {
            return Err(Error::Config("elevation_deg must lie strictly between -90 and 90".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::parse(&String::from_utf8_lossy(&bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

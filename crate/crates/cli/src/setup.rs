use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qgs_core::scene_io::synthetic::{generate_scene, SyntheticDataset};
use qgs_core::scene_io::{DatasetConfig, RunConfig};

use crate::{Cli, GenArgs, RunConfigArgs};

pub const DATASET_FILE: &str = "dataset.cfg";

/// Replaces `key = value` lines of a configuration text; unknown keys are
/// rejected.
pub fn apply_overrides(text: &str, overrides: &[String]) -> Result<String> {
    let mut lines: Vec<(String, String)> = text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else { bail!("override '{o}' is not of the form KEY=VALUE") };
        let (k, v) = (k.trim(), v.trim());
        match lines.iter_mut().find(|(key, _)| key == k) {
            Some(slot) => slot.1 = v.to_string(),
            None => bail!("unknown configuration key '{k}'"),
        }
    }
    Ok(lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn run_config(cli: &Cli, args: &RunConfigArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(p) => RunConfig::parse(&read_text(p)?).with_context(|| format!("in {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut c = RunConfig::parse(&apply_overrides(&base.to_text(), &args.set)?)?;
    if let Some(p) = args.pipeline {
        c.pipeline = p;
    }
    if let Some(m) = args.modulation {
        c.modulation = m;
    }
    if let Some(i) = args.iters {
        c.iters = i;
    }
    if args.baseline {
        c.baseline = true;
    }
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

pub fn dataset_config(cli: &Cli, args: &GenArgs) -> Result<DatasetConfig> {
    let base = match &args.config {
        Some(p) => DatasetConfig::parse(&read_text(p)?).with_context(|| format!("in {}", p.display()))?,
        None => DatasetConfig::default(),
    };
    let mut c = DatasetConfig::parse(&apply_overrides(&base.to_text(), &args.set)?)?;
    if let Some(k) = args.kind {
        c.kind = k;
    }
    if let Some(n) = args.gaussians {
        c.num_gaussians = n;
    }
    if let Some(v) = args.views {
        c.views = v;
    }
    if let Some(w) = args.width {
        c.width = w;
    }
    if let Some(h) = args.height {
        c.height = h;
    }
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

/// Regenerates the dataset described by a `gen` directory or its config.
pub fn load_dataset(path: &Path) -> Result<SyntheticDataset> {
    let cfg = if path.is_dir() { path.join(DATASET_FILE) } else { path.to_path_buf() };
    let config = DatasetConfig::load(&cfg).with_context(|| format!("loading dataset {}", cfg.display()))?;
    log::info!("dataset {}: {} {} Gaussians, {} views {}x{}", cfg.display(), config.kind, config.num_gaussians, config.views, config.width, config.height);
    Ok(generate_scene(&config)?)
}

/// Creates `<root>/<timestamp>-<command>-seed<seed>`, adding a numeric
/// suffix if that name is taken.
pub fn create_run_dir(root: &Path, command: &str, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{command}-seed{seed}");
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => {
                log::info!("run directory {}", dir.display());
                return Ok(dir);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

pub fn log_config(label: &str, text: &str) {
    log::info!("{label}:");
    for line in text.lines() {
        log::info!("  {line}");
    }
}

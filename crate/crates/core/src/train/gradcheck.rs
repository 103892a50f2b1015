//! Central finite-difference check of every trainable parameter group of
//! the full render pipeline.

use std::fmt;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss_and_grads, pipeline_config, sh_degree, view_loss};
use crate::encoding::Aabb;
use crate::error::{Error, Result};
use crate::pipeline::{Modulator, ParamKind, PipelineKind};
use crate::quantum::AnsatzParams;
use crate::render::sh::{SH_BASIS, SH_LEN};
use crate::render::{Camera, Gaussian, Image, RenderOptions, GAUSSIAN_PARAMS};
use crate::scene_io::config::RunConfig;
use crate::scene_io::scene::SceneFile;

pub const FD_STEP: f64 = 1e-4;
pub const THRESHOLD: f64 = 1e-3;
/// Denominator floor of the relative error, so entries whose gradient is
/// zero compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;
pub const MAX_GAUSSIANS: usize = 4;
pub const MAX_SIDE: usize = 8;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub width: usize,
    pub height: usize,
    /// Randomize every modulator parameter before checking.
    pub perturb: bool,
    /// Entries checked per group: half the largest analytic gradients,
    /// half drawn at random.
    pub entries_per_group: usize,
    pub seed: u64,
    /// Test hook: scales the analytic gradient of the named group.
    pub corrupt_group: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { width: MAX_SIDE, height: MAX_SIDE, perturb: true, entries_per_group: 16, seed: 0, corrupt_group: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub size: usize,
    pub checked: usize,
    /// Entries left out because the step crosses a hash-grid cell face.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= THRESHOLD
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub pipeline: PipelineKind,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupReport::passed)
    }

    pub fn failed_groups(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| !g.passed()).map(|g| g.name.as_str()).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradcheck pipeline {} (h = {FD_STEP:e}, threshold {THRESHOLD:e})", self.pipeline)?;
        for g in &self.groups {
            writeln!(
                f,
                "{:<20} {} max_rel_err={:.3e} max_abs_grad={:.3e} checked={}/{} skipped={}",
                g.name,
                if g.passed() { "PASS" } else { "FAIL" },
                g.max_rel_err,
                g.max_abs_grad,
                g.checked,
                g.size,
                g.skipped
            )?;
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Slot {
    Gaussian(usize),
    Modulator(usize, usize),
}

/// Camera used for gradient checks: off-axis, close enough that every
/// Gaussian covers the whole image.
pub fn gradcheck_camera(bounds: &Aabb, width: usize, height: usize) -> Result<Camera> {
    let c = Vector3::from(std::array::from_fn::<f64, 3, _>(|a| 0.5 * (bounds.min[a] + bounds.max[a])));
    let extent = (0..3).map(|a| bounds.extent(a)).fold(0.0, f64::max);
    let offset = Vector3::new(0.4, -1.0, -3.0).normalize() * 3.0 * extent;
    Camera::look_at(c + offset, c, Vector3::new(0.0, -1.0, 0.0), 2.0 * width.max(height) as f64, width, height)
}

fn near_kink(m: &Modulator, mu: [f64; 3], cam: &Camera, axis: usize, h: f64) -> Result<bool> {
    if m.spatial_grid().near_cell_boundary(mu, axis, h) {
        return Ok(true);
    }
    if let Some(d) = m.direction_grid() {
        let (dir, _) = crate::render::view_direction(mu, cam);
        let p = d.direction_to_point(dir)?;
        return Ok((0..3).any(|a| d.near_cell_boundary(p, a, h)));
    }
    Ok(false)
}

/// A small scene suited to finite differences: large, semi-transparent
/// Gaussians whose colors and modulated opacities stay away from clamps,
/// with means away from the cell faces of the configured grids.
pub fn gradcheck_scene(run: &RunConfig, n: usize, seed: u64) -> Result<SceneFile> {
    let bounds = Aabb::new([-0.5; 3], [0.5; 3]);
    let probe = Modulator::zeros(pipeline_config(run, bounds))?;
    let cam = gradcheck_camera(&bounds, MAX_SIDE, MAX_SIDE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussians = Vec::with_capacity(n);
    while gaussians.len() < n {
        let mu: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.2..0.2));
        let mut kink = false;
        for a in 0..3 {
            kink |= near_kink(&probe, mu, &cam, a, 2.0 * FD_STEP)?;
        }
        if kink {
            continue;
        }
        let mut sh = [0.0; SH_LEN];
        for ch in 0..3 {
            sh[ch * SH_BASIS] = rng.gen_range(-0.6..-0.2);
            for k in 1..SH_BASIS {
                sh[ch * SH_BASIS + k] = rng.gen_range(-0.05..0.05);
            }
        }
        gaussians.push(Gaussian {
            mu,
            rot: [rng.gen_range(0.5..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
            log_scale: std::array::from_fn(|_| rng.gen_range(-0.3..0.0)),
            opacity_logit: rng.gen_range(-1.5..-0.5),
            sh,
        });
    }
    Ok(SceneFile { bounds, gaussians })
}

/// Named check groups as lists of parameter slots.
fn check_groups(scene: &[Gaussian], m: &Modulator) -> Vec<(String, Vec<Slot>)> {
    let n = scene.len();
    let mut out = vec![
        ("gaussian_attributes".to_string(), (0..n).flat_map(|i| (0..11).map(move |k| Slot::Gaussian(i * GAUSSIAN_PARAMS + k))).collect()),
        ("sh_coefficients".to_string(), (0..n).flat_map(|i| (11..GAUSSIAN_PARAMS).map(move |k| Slot::Gaussian(i * GAUSSIAN_PARAMS + k))).collect()),
    ];
    let groups = m.groups();
    let all = |pred: &dyn Fn(&str, ParamKind) -> bool| -> Vec<Slot> {
        groups
            .iter()
            .enumerate()
            .filter(|(_, g)| pred(g.name, g.kind))
            .flat_map(|(gi, g)| (0..g.rows * g.cols).map(move |k| Slot::Modulator(gi, k)))
            .collect()
    };
    out.push(("hash_tables".into(), all(&|_, k| k == ParamKind::Hash)));
    match m.config().kind {
        PipelineKind::I => {
            let per = m.config().ansatz_layers * AnsatzParams::PER_LAYER;
            out.push(("hypernetwork".into(), all(&|name, _| ["hyper.w0", "hyper.b0", "hyper.w1", "hyper.b1"].contains(&name))));
            // the last layer's columns generate the angles, then the decoder
            let w2 = groups.iter().position(|g| g.name == "hyper.w2").expect("hypernetwork output layer");
            let b2 = w2 + 1;
            let cols = groups[w2].cols;
            let rows = groups[w2].rows;
            let split = |angles: bool| -> Vec<Slot> {
                let keep = |c: usize| (c < per) == angles;
                let mut v: Vec<Slot> = (0..rows * cols).filter(|k| keep(k % cols)).map(|k| Slot::Modulator(w2, k)).collect();
                v.extend((0..cols).filter(|&c| keep(c)).map(|c| Slot::Modulator(b2, c)));
                v
            };
            out.push(("ansatz_angles".into(), split(true)));
            out.push(("decoding_mlp".into(), split(false)));
        }
        PipelineKind::II => {
            out.push(("projection_mlps".into(), all(&|name, _| name.starts_with("proj_"))));
            out.push(("ansatz_angles".into(), all(&|name, _| name == "ansatz")));
            out.push(("decoding_mlp".into(), all(&|name, _| name.starts_with("decoder."))));
        }
    }
    out
}

fn perturb(m: &mut Modulator, rng: &mut ChaCha8Rng) {
    let kinds: Vec<ParamKind> = m.groups().iter().map(|g| g.kind).collect();
    for (values, kind) in m.group_values_mut().into_iter().zip(kinds) {
        let a = if kind == ParamKind::Hash { 0.5 } else { 0.2 };
        for v in values.iter_mut() {
            *v += rng.gen_range(-a..a);
        }
    }
}

/// Checks the loss gradient of a single view against central differences.
pub fn run_gradcheck(run: &RunConfig, scene: &SceneFile, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if scene.gaussians.is_empty() || scene.gaussians.len() > MAX_GAUSSIANS {
        return Err(Error::Config(format!("gradcheck needs 1 to {MAX_GAUSSIANS} Gaussians, got {}", scene.gaussians.len())));
    }
    if opts.width == 0 || opts.height == 0 || opts.width > MAX_SIDE || opts.height > MAX_SIDE {
        return Err(Error::Config(format!("gradcheck images must be at most {MAX_SIDE}x{MAX_SIDE}")));
    }
    if run.baseline {
        return Err(Error::Config("gradcheck needs a modulated configuration (baseline = false)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut modulator = Modulator::new(pipeline_config(run, scene.bounds), &mut rng)?;
    if opts.perturb {
        perturb(&mut modulator, &mut rng);
    }
    let mut gaussians = scene.gaussians.clone();
    let cam = gradcheck_camera(&scene.bounds, opts.width, opts.height)?;
    let ropts = RenderOptions { sh_degree: sh_degree(run), background: [0.2, 0.3, 0.1] };
    // target offset from the render by at least 0.05 everywhere, so no L1
    // residual changes sign within a step
    let base = super::render_view(&gaussians, Some(&modulator), &cam, &ropts)?;
    let target = Image::from_data(
        base.width,
        base.height,
        base.data
            .iter()
            .map(|v| {
                let d = rng.gen_range(0.05..0.15);
                if rng.gen_bool(0.5) {
                    v + d
                } else {
                    v - d
                }
            })
            .collect(),
    )?;
    let grads = loss_and_grads(&gaussians, Some(&modulator), &cam, &target, &ropts, run.lambda, None)?;

    let analytic = |s: Slot| match s {
        Slot::Gaussian(k) => grads.gaussians[k],
        Slot::Modulator(g, k) => grads.modulator[g][k],
    };
    let mut reports = Vec::new();
    for (name, slots) in check_groups(&gaussians, &modulator) {
        let size = slots.len();
        let mut ranked = slots.clone();
        ranked.sort_by(|a, b| analytic(*b).abs().total_cmp(&analytic(*a).abs()));
        let top = opts.entries_per_group.div_ceil(2).min(ranked.len());
        let mut chosen: Vec<Slot> = ranked[..top].to_vec();
        let mut rest = ranked[top..].to_vec();
        rest.shuffle(&mut rng);
        chosen.extend(rest.into_iter().take(opts.entries_per_group - top));

        let corrupt = opts.corrupt_group.as_deref() == Some(name.as_str());
        let mut report = GroupReport { name, size, checked: 0, skipped: 0, max_rel_err: 0.0, max_abs_grad: 0.0 };
        for s in chosen {
            if let Slot::Gaussian(k) = s {
                let (i, p) = (k / GAUSSIAN_PARAMS, k % GAUSSIAN_PARAMS);
                if p < 3 && near_kink(&modulator, gaussians[i].mu, &cam, p, FD_STEP)? {
                    report.skipped += 1;
                    continue;
                }
            }
            let mut a = analytic(s);
            if corrupt {
                a = 1.5 * a + 1e-3;
            }
            let mut eval = |delta: f64| -> Result<f64> {
                match s {
                    Slot::Gaussian(k) => {
                        let (i, p) = (k / GAUSSIAN_PARAMS, k % GAUSSIAN_PARAMS);
                        let orig = gaussians[i].clone();
                        let mut flat = orig.to_flat();
                        flat[p] += delta;
                        gaussians[i] = Gaussian::from_flat(&flat);
                        let l = view_loss(&gaussians, Some(&modulator), &cam, &target, &ropts, run.lambda);
                        gaussians[i] = orig;
                        Ok(l?.loss)
                    }
                    Slot::Modulator(g, k) => {
                        let orig = modulator.group_values()[g][k];
                        modulator.group_values_mut()[g][k] = orig + delta;
                        let l = view_loss(&gaussians, Some(&modulator), &cam, &target, &ropts, run.lambda);
                        modulator.group_values_mut()[g][k] = orig;
                        Ok(l?.loss)
                    }
                }
            };
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(err);
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
        }
        reports.push(report);
    }
    Ok(GradcheckReport { pipeline: run.pipeline, groups: reports })
}

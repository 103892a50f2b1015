//! Synthetic view-dependent targets and datasets.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DatasetConfig;
use super::scene::SceneFile;
use crate::encoding::Aabb;
use crate::error::{Error, Result};
use crate::render::sh::{eval_sh, sh_basis, SH_BASIS, SH_LEN};
use crate::render::{render_colors, Camera, Gaussian, Image, RenderOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetKind {
    /// A random degree-3 SH function.
    ShSmooth,
    /// Two colors separated by the boundary of a spherical cap.
    StepLobe,
    /// A narrow highlight `exp(kappa (d . d0 - 1))` over a base color.
    SpecularSpot,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::ShSmooth => "sh_smooth",
            TargetKind::StepLobe => "step_lobe",
            TargetKind::SpecularSpot => "specular_spot",
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sh_smooth" => Ok(TargetKind::ShSmooth),
            "step_lobe" => Ok(TargetKind::StepLobe),
            "specular_spot" => Ok(TargetKind::SpecularSpot),
            other => Err(Error::Config(format!("unknown target kind '{other}'"))),
        }
    }
}

pub const SPECULAR_KAPPA: f64 = 100.0;

/// A color as a function of the unit viewing direction.
#[derive(Clone, Debug, PartialEq)]
pub enum DirectionalTarget {
    Sh { sh: Vec<f64> },
    StepLobe { center: [f64; 3], half_angle: f64, inside: [f64; 3], outside: [f64; 3] },
    SpecularSpot { center: [f64; 3], kappa: f64, base: [f64; 3], spot: [f64; 3] },
}

/// 1 if `d` lies strictly inside the cap around `center`, else 0.
pub fn cap_indicator(center: [f64; 3], half_angle: f64, d: [f64; 3]) -> f64 {
    let c = center[0] * d[0] + center[1] * d[1] + center[2] * d[2];
    if c > half_angle.cos() {
        1.0
    } else {
        0.0
    }
}

impl DirectionalTarget {
    pub fn kind(&self) -> TargetKind {
        match self {
            DirectionalTarget::Sh { .. } => TargetKind::ShSmooth,
            DirectionalTarget::StepLobe { .. } => TargetKind::StepLobe,
            DirectionalTarget::SpecularSpot { .. } => TargetKind::SpecularSpot,
        }
    }

    pub fn eval(&self, d: [f64; 3]) -> [f64; 3] {
        match self {
            DirectionalTarget::Sh { sh } => eval_sh(sh, d),
            DirectionalTarget::StepLobe { center, half_angle, inside, outside } => {
                let t = cap_indicator(*center, *half_angle, d);
                std::array::from_fn(|c| outside[c] + t * (inside[c] - outside[c]))
            }
            DirectionalTarget::SpecularSpot { center, kappa, base, spot } => {
                let dot = center[0] * d[0] + center[1] * d[1] + center[2] * d[2];
                let w = (kappa * (dot - 1.0)).exp();
                std::array::from_fn(|c| (base[c] + w * spot[c]).clamp(0.0, 1.0))
            }
        }
    }

    /// Random target of `kind`. For caps, `center` fixes the cap axis;
    /// otherwise it is drawn uniformly.
    pub fn random(kind: TargetKind, center: Option<[f64; 3]>, rng: &mut impl Rng) -> Self {
        let center = center.unwrap_or_else(|| random_unit(rng));
        let color = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| -> [f64; 3] { std::array::from_fn(|_| rng.gen_range(lo..hi)) };
        match kind {
            TargetKind::ShSmooth => {
                let mut sh = vec![0.0; SH_LEN];
                for ch in 0..3 {
                    sh[ch * SH_BASIS] = rng.gen_range(-0.6..0.6);
                    for k in 1..SH_BASIS {
                        let l = (k as f64).sqrt().floor();
                        sh[ch * SH_BASIS + k] = rng.gen_range(-0.25..0.25) / (l + 1.0);
                    }
                }
                DirectionalTarget::Sh { sh }
            }
            TargetKind::StepLobe => {
                let inside = color(rng, 0.1, 0.9);
                // keep the two sides visibly different in every channel
                let outside = std::array::from_fn(|c| {
                    let shift: f64 = rng.gen_range(0.3..0.6);
                    let (up, down) = (0.95 - inside[c], inside[c] - 0.05);
                    let go_up = if up >= shift && down >= shift { rng.gen_bool(0.5) } else { up >= down };
                    if go_up {
                        inside[c] + shift.min(up)
                    } else {
                        inside[c] - shift.min(down)
                    }
                });
                DirectionalTarget::StepLobe { center, half_angle: rng.gen_range(45f64..75.0).to_radians(), inside, outside }
            }
            TargetKind::SpecularSpot => {
                DirectionalTarget::SpecularSpot { center, kappa: SPECULAR_KAPPA, base: color(rng, 0.05, 0.5), spot: color(rng, 0.3, 0.5) }
            }
        }
    }
}

/// A seeded random target with a uniformly drawn axis.
pub fn generate_directional_target(kind: TargetKind, seed: u64) -> DirectionalTarget {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DirectionalTarget::random(kind, None, &mut rng)
}

pub fn random_unit(rng: &mut (impl Rng + ?Sized)) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..TAU);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// Midpoint quadrature on the sphere, uniform in `z` and `phi` (hence
/// equal-area cells). Returns unit directions; each has weight
/// `4 pi / len`.
pub fn sphere_quadrature(nz: usize, nphi: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(nz * nphi);
    for i in 0..nz {
        let z = -1.0 + (i as f64 + 0.5) * 2.0 / nz as f64;
        let r = (1.0 - z * z).max(0.0).sqrt();
        for j in 0..nphi {
            let phi = (j as f64 + 0.5) * TAU / nphi as f64;
            out.push([r * phi.cos(), r * phi.sin(), z]);
        }
    }
    out
}

/// Least-squares degree-3 SH fit of a directional color over the sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct ShFit {
    /// Coefficients in renderer layout (the +0.5 offset is accounted for).
    pub sh: Vec<f64>,
    /// Sphere-averaged squared error of the unclamped fit, mean over channels.
    pub mse: f64,
}

/// Normal-equations fit of `0.5 + sum_k a_k Y_k` to `target` using the
/// given quadrature directions.
pub fn sh_least_squares(target: impl Fn([f64; 3]) -> [f64; 3], dirs: &[[f64; 3]]) -> Result<ShFit> {
    let mut gram = DMatrix::<f64>::zeros(SH_BASIS, SH_BASIS);
    let mut rhs = DMatrix::<f64>::zeros(SH_BASIS, 3);
    let values: Vec<[f64; 3]> = dirs.iter().map(|&d| target(d)).collect();
    let bases: Vec<[f64; SH_BASIS]> = dirs.iter().map(|&d| sh_basis(d)).collect();
    for (y, t) in bases.iter().zip(&values) {
        for a in 0..SH_BASIS {
            for b in 0..SH_BASIS {
                gram[(a, b)] += y[a] * y[b];
            }
            for c in 0..3 {
                rhs[(a, c)] += y[a] * (t[c] - 0.5);
            }
        }
    }
    let chol = gram.cholesky().ok_or_else(|| Error::Config("SH normal equations are singular; use more quadrature points".into()))?;
    let coef = chol.solve(&rhs);
    let mut sh = vec![0.0; SH_LEN];
    for c in 0..3 {
        for k in 0..SH_BASIS {
            sh[c * SH_BASIS + k] = coef[(k, c)];
        }
    }
    let mut err = 0.0;
    for (y, t) in bases.iter().zip(&values) {
        for c in 0..3 {
            let col = DVector::from_fn(SH_BASIS, |k, _| coef[(k, c)]);
            let fit: f64 = 0.5 + (0..SH_BASIS).map(|k| y[k] * col[k]).sum::<f64>();
            err += (fit - t[c]).powi(2);
        }
    }
    Ok(ShFit { sh, mse: err / (3 * dirs.len()) as f64 })
}

/// Cameras evenly spaced in azimuth on a ring at the given elevation,
/// all looking at the origin with `+z` up.
pub fn camera_ring(views: usize, elevation_deg: f64, radius: f64, focal: f64, width: usize, height: usize) -> Result<Vec<Camera>> {
    let e = elevation_deg.to_radians();
    (0..views)
        .map(|k| {
            let az = TAU * k as f64 / views as f64;
            let pos = Vector3::new(radius * e.cos() * az.cos(), radius * e.cos() * az.sin(), radius * e.sin());
            Camera::look_at(pos, Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), focal, width, height)
        })
        .collect()
}

/// Bounds of the generated scenes; means are drawn from a smaller box
/// inside so hash lookups stay in range while positions train.
pub const SCENE_BOUNDS: f64 = 0.5;
const MEAN_BOX: f64 = 0.3;

/// Ground truth for a synthetic scene.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    /// True geometry; SH holds the least-squares SH fit of each target.
    pub scene: SceneFile,
    pub targets: Vec<DirectionalTarget>,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
}

impl SyntheticDataset {
    pub fn render_options(&self) -> RenderOptions {
        RenderOptions { sh_degree: 3, background: if self.config.white_background { [1.0; 3] } else { [0.0; 3] } }
    }
}

fn random_quaternion(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

/// Builds scene, cameras, per-Gaussian targets and rendered target images.
/// A pure function of `config`.
pub fn generate_scene(config: &DatasetConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bounds = Aabb::new([-SCENE_BOUNDS; 3], [SCENE_BOUNDS; 3]);
    let extent = 2.0 * SCENE_BOUNDS;
    let cameras = camera_ring(
        config.views,
        config.elevation_deg,
        config.radius_factor * extent,
        config.focal_factor * config.width as f64,
        config.width,
        config.height,
    )?;
    let quad = sphere_quadrature(64, 128);
    let mut gaussians = Vec::with_capacity(config.num_gaussians);
    let mut targets = Vec::with_capacity(config.num_gaussians);
    for _ in 0..config.num_gaussians {
        let mu: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-MEAN_BOX..MEAN_BOX));
        let rot = random_quaternion(&mut rng);
        let log_scale: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05f64..0.12).ln());
        let opacity_logit = rng.gen_range(1.5..3.0);
        // cap axis along the view direction of a random ring camera, so
        // the cap boundary crosses the training views
        let cam = &cameras[rng.gen_range(0..cameras.len())];
        let v = Vector3::from(mu) - cam.position;
        let v = v / v.norm();
        let target = DirectionalTarget::random(config.kind, Some([v.x, v.y, v.z]), &mut rng);
        let fit = sh_least_squares(|d| target.eval(d), &quad)?;
        let mut sh = [0.0; SH_LEN];
        sh.copy_from_slice(&fit.sh);
        gaussians.push(Gaussian { mu, rot, log_scale, opacity_logit, sh });
        targets.push(target);
    }
    let opts = RenderOptions { sh_degree: 3, background: if config.white_background { [1.0; 3] } else { [0.0; 3] } };
    let images = cameras
        .iter()
        .map(|cam| render_colors(&gaussians, cam, |i, d| targets[i].eval(d), &opts).map(|r| r.rgb))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset { config: config.clone(), scene: SceneFile { bounds, gaussians }, targets, cameras, images })
}

/// Polar angle and azimuth of the center of equirectangular pixel `(i, j)`
/// in a `w x h` map.
pub fn equirect_direction(i: usize, j: usize, w: usize, h: usize) -> [f64; 3] {
    let phi = (i as f64 + 0.5) / w as f64 * TAU;
    let theta = (j as f64 + 0.5) / h as f64 * PI;
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

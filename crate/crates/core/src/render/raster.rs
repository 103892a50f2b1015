//! Depth-sorted front-to-back alpha compositing and its reverse pass.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::camera::{normalize_quat, normalize_quat_vjp, quat_matrix_vjp, quat_to_matrix, Camera, COV2D_FLOOR, NEAR_PLANE};
use super::sh::{basis_count, sh_basis, sh_basis_grad, SH_BASIS, SH_LEN};
use super::Image;
use crate::error::{Error, Result};

/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance falls below this.
pub const T_MIN: f64 = 1e-4;
/// Upper clamp on (modulated) opacity.
pub const ALPHA_MAX: f64 = 0.9999;
/// Projected covariances with smaller determinant are skipped.
pub const DET_MIN: f64 = 1e-12;

/// Rows per backward work item; fixed so gradient merging does not depend
/// on the thread count.
const ROWS_PER_CHUNK: usize = 4;

/// One splat. The color is stored as degree-3 SH coefficients, 16 per
/// channel, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mu: [f64; 3],
    /// Quaternion `(w, x, y, z)`; normalized before use.
    pub rot: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub sh: [f64; SH_LEN],
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        super::camera::covariance_3d(self.rot, self.log_scale)
    }

    /// Scalar parameters in the order `mu, rot, log_scale, opacity_logit, sh`.
    pub fn to_flat(&self) -> [f64; GAUSSIAN_PARAMS] {
        let mut out = [0.0; GAUSSIAN_PARAMS];
        out[0..3].copy_from_slice(&self.mu);
        out[3..7].copy_from_slice(&self.rot);
        out[7..10].copy_from_slice(&self.log_scale);
        out[10] = self.opacity_logit;
        out[11..].copy_from_slice(&self.sh);
        out
    }

    pub fn from_flat(v: &[f64]) -> Self {
        assert_eq!(v.len(), GAUSSIAN_PARAMS);
        let mut sh = [0.0; SH_LEN];
        sh.copy_from_slice(&v[11..]);
        Self {
            mu: [v[0], v[1], v[2]],
            rot: [v[3], v[4], v[5], v[6]],
            log_scale: [v[7], v[8], v[9]],
            opacity_logit: v[10],
            sh,
        }
    }
}

pub const GAUSSIAN_PARAMS: usize = 11 + SH_LEN;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-Gaussian view-dependent color factors.
#[derive(Clone, Debug, PartialEq)]
pub enum ColorFactors {
    None,
    /// `n x 48`, multiplying the SH coefficients before evaluation.
    Sh(Vec<f64>),
    /// `n x 3`, multiplying the evaluated RGB color.
    Rgb(Vec<f64>),
}

/// Multiplicative per-Gaussian updates for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation {
    pub color: ColorFactors,
    /// `n` opacity factors; `None` means 1.
    pub opacity: Option<Vec<f64>>,
}

impl Modulation {
    pub fn identity() -> Self {
        Self { color: ColorFactors::None, opacity: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// SH degree used for the base color (3, or 0 for DC-only).
    pub sh_degree: usize,
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { sh_degree: 3, background: [0.0; 3] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub rgb: Image,
    /// Final transmittance per pixel, row-major.
    pub transmittance: Vec<f64>,
}

/// Gradients of a scalar loss with respect to everything the renderer reads.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads {
    /// `n x GAUSSIAN_PARAMS`, in [`Gaussian::to_flat`] order.
    pub gaussians: Vec<f64>,
    /// Same layout as the [`ColorFactors`] passed in (empty for `None`).
    pub color_factors: Vec<f64>,
    /// `n` entries (zeros when no opacity factors were given).
    pub opacity_factors: Vec<f64>,
}

/// Per-Gaussian screen-space state, plus what the reverse pass needs.
#[derive(Clone, Debug)]
struct Splat {
    index: usize,
    depth: f64,
    mean: Vector2<f64>,
    /// Inverse 2D covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    conic: [f64; 3],
    color: [f64; 3],
    alpha: f64,
    // reverse-pass intermediates
    t_cam: Vector3<f64>,
    m: Matrix2x3<f64>,
    cov3: Matrix3<f64>,
    rmat: Matrix3<f64>,
    scale: Vector3<f64>,
    q_unit: [f64; 4],
    q_norm: f64,
    dir: [f64; 3],
    dir_norm: f64,
    /// SH sum + 0.5 before clamping.
    raw_color: [f64; 3],
    /// Color after the SH clamp and before RGB factors.
    base_color: [f64; 3],
    base_alpha: f64,
    alpha_unclamped: f64,
}

fn check_modulation(n: usize, m: &Modulation) -> Result<()> {
    match &m.color {
        ColorFactors::Sh(f) if f.len() != n * SH_LEN => {
            return Err(Error::Shape(format!("SH color factors: {} values for {n} Gaussians", f.len())))
        }
        ColorFactors::Rgb(f) if f.len() != n * 3 => {
            return Err(Error::Shape(format!("RGB color factors: {} values for {n} Gaussians", f.len())))
        }
        _ => {}
    }
    if let Some(o) = &m.opacity {
        if o.len() != n {
            return Err(Error::Shape(format!("opacity factors: {} values for {n} Gaussians", o.len())));
        }
    }
    Ok(())
}

/// Unit viewing direction from the camera to `mu`, and the distance.
pub fn view_direction(mu: [f64; 3], cam: &Camera) -> ([f64; 3], f64) {
    let v = Vector3::from(mu) - cam.position;
    let n = v.norm();
    if n == 0.0 {
        return ([0.0, 0.0, 1.0], 0.0);
    }
    ([v.x / n, v.y / n, v.z / n], n)
}

/// `(raw, clamped base, final)` color of Gaussian `i` seen along `dir`.
fn color_terms(i: usize, g: &Gaussian, dir: [f64; 3], m: &Modulation, sh_degree: usize) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let basis = sh_basis(dir);
    let nb = basis_count(sh_degree);
    let sh_f = match &m.color {
        ColorFactors::Sh(f) => Some(&f[i * SH_LEN..(i + 1) * SH_LEN]),
        _ => None,
    };
    let raw_color: [f64; 3] = std::array::from_fn(|ch| {
        let mut s = 0.5;
        for k in 0..nb {
            let idx = ch * SH_BASIS + k;
            let coeff = match sh_f {
                Some(f) => g.sh[idx] * f[idx],
                None => g.sh[idx],
            };
            s += coeff * basis[k];
        }
        s
    });
    let base_color = raw_color.map(|c| c.clamp(0.0, 1.0));
    let color = match &m.color {
        ColorFactors::Rgb(f) => std::array::from_fn(|ch| (base_color[ch] * f[3 * i + ch]).clamp(0.0, 1.0)),
        _ => base_color,
    };
    (raw_color, base_color, color)
}

/// Splat color of Gaussian `i` of a scene under modulation `m` when seen
/// along the unit direction `dir`.
pub fn modulated_color(scene: &[Gaussian], i: usize, dir: [f64; 3], m: &Modulation, sh_degree: usize) -> Result<[f64; 3]> {
    check_modulation(scene.len(), m)?;
    let g = scene.get(i).ok_or(Error::IndexOutOfRange { index: i, len: scene.len() })?;
    Ok(color_terms(i, g, dir, m, sh_degree).2)
}

fn preprocess(i: usize, g: &Gaussian, cam: &Camera, m: &Modulation, opts: &RenderOptions) -> Option<Splat> {
    let t_cam = cam.world_to_camera(&Vector3::from(g.mu));
    if t_cam.z <= NEAR_PLANE {
        return None;
    }
    let (q_unit, q_norm) = normalize_quat(g.rot);
    let rmat = quat_to_matrix(q_unit);
    let scale = Vector3::from(g.log_scale.map(f64::exp));
    let a = rmat * Matrix3::from_diagonal(&scale);
    let cov3 = a * a.transpose();
    let mmat = cam.jacobian(&t_cam) * cam.rotation;
    let cov2 = mmat * cov3 * mmat.transpose() + Matrix2::identity() * COV2D_FLOOR;
    let det = cov2.determinant();
    if !(det >= DET_MIN) {
        return None;
    }
    let conic = [cov2[(1, 1)] / det, -cov2[(0, 1)] / det, cov2[(0, 0)] / det];

    let (dir, dir_norm) = view_direction(g.mu, cam);
    let (raw_color, base_color, color) = color_terms(i, g, dir, m, opts.sh_degree);

    let base_alpha = g.opacity();
    let alpha_unclamped = match &m.opacity {
        Some(o) => base_alpha * o[i],
        None => base_alpha,
    };
    let alpha = alpha_unclamped.clamp(0.0, ALPHA_MAX);

    Some(Splat {
        index: i,
        depth: t_cam.z,
        mean: cam.project_point(&t_cam),
        conic,
        color,
        alpha,
        t_cam,
        m: mmat,
        cov3,

        rmat,
        scale,
        q_unit,
        q_norm,
        dir,
        dir_norm,
        raw_color,
        base_color,
        base_alpha,
        alpha_unclamped,
    })
}

fn prepare(scene: &[Gaussian], cam: &Camera, m: &Modulation, opts: &RenderOptions) -> Result<Vec<Splat>> {
    check_modulation(scene.len(), m)?;
    let mut splats: Vec<Splat> = scene.iter().enumerate().filter_map(|(i, g)| preprocess(i, g, cam, m, opts)).collect();
    // ties broken by index for determinism
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    Ok(splats)
}

#[inline]
fn splat_weight(s: &Splat, px: f64, py: f64) -> (f64, f64, f64, f64) {
    let dx = px - s.mean.x;
    let dy = py - s.mean.y;
    let power = -0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy);
    let g = power.exp();
    (s.alpha * g, g, dx, dy)
}

fn composite_pixel(splats: &[Splat], px: f64, py: f64, bg: [f64; 3]) -> ([f64; 3], f64) {
    let mut c = [0.0; 3];
    let mut t = 1.0;
    for s in splats {
        let (a, _, _, _) = splat_weight(s, px, py);
        if a < ALPHA_MIN {
            continue;
        }
        for ch in 0..3 {
            c[ch] += s.color[ch] * a * t;
        }
        t *= 1.0 - a;
        if t < T_MIN {
            break;
        }
    }
    for ch in 0..3 {
        c[ch] += t * bg[ch];
    }
    (c, t)
}

fn composite(splats: &[Splat], cam: &Camera, opts: &RenderOptions) -> RenderedImage {
    let (w, h) = (cam.width, cam.height);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgb = Vec::with_capacity(3 * w);
            let mut tr = Vec::with_capacity(w);
            for x in 0..w {
                let (c, t) = composite_pixel(splats, x as f64 + 0.5, y as f64 + 0.5, opts.background);
                rgb.extend_from_slice(&c);
                tr.push(t);
            }
            (rgb, tr)
        })
        .collect();
    let mut data = Vec::with_capacity(3 * w * h);
    let mut transmittance = Vec::with_capacity(w * h);
    for (rgb, tr) in rows {
        data.extend(rgb);
        transmittance.extend(tr);
    }
    RenderedImage { rgb: Image { width: w, height: h, data }, transmittance }
}

/// Renders `scene` from `cam` with the given per-Gaussian modulation.
pub fn render(scene: &[Gaussian], cam: &Camera, modulation: &Modulation, opts: &RenderOptions) -> Result<RenderedImage> {
    let splats = prepare(scene, cam, modulation, opts)?;
    Ok(composite(&splats, cam, opts))
}

/// Renders with a caller-supplied color per Gaussian instead of its SH
/// color; `color_of(index, unit view direction)` must return values in
/// `[0, 1]`. Used to produce ground truth beyond SH expressivity.
pub fn render_colors(scene: &[Gaussian], cam: &Camera, color_of: impl Fn(usize, [f64; 3]) -> [f64; 3], opts: &RenderOptions) -> Result<RenderedImage> {
    let mut splats = prepare(scene, cam, &Modulation::identity(), opts)?;
    for s in &mut splats {
        s.color = color_of(s.index, s.dir).map(|c| c.clamp(0.0, 1.0));
    }
    Ok(composite(&splats, cam, opts))
}

/// Per-splat screen-space gradient accumulator.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    color: [f64; 3],
    alpha: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.alpha += o.alpha;
    }
}

fn backward_pixel(splats: &[Splat], px: f64, py: f64, bg: [f64; 3], g: [f64; 3], acc: &mut [SplatGrad], scratch: &mut Vec<(usize, f64, f64, f64, f64, f64)>) {
    // forward replay: (splat, a, gauss, dx, dy, T before)
    scratch.clear();
    let mut t = 1.0;
    for (si, s) in splats.iter().enumerate() {
        let (a, gw, dx, dy) = splat_weight(s, px, py);
        if a < ALPHA_MIN {
            continue;
        }
        scratch.push((si, a, gw, dx, dy, t));
        t *= 1.0 - a;
        if t < T_MIN {
            break;
        }
    }
    // contribution of everything behind the current splat, starting with
    // the background term
    let mut after = [t * bg[0], t * bg[1], t * bg[2]];
    for &(si, a, gw, dx, dy, t_i) in scratch.iter().rev() {
        let s = &splats[si];
        let sg = &mut acc[si];
        let mut da = 0.0;
        for ch in 0..3 {
            sg.color[ch] += g[ch] * a * t_i;
            da += g[ch] * (s.color[ch] * t_i - after[ch] / (1.0 - a));
        }
        for ch in 0..3 {
            after[ch] += s.color[ch] * a * t_i;
        }
        // a = alpha * exp(power)
        sg.alpha += da * gw;
        let dpower = da * a;
        let (ca, cb, cc) = (s.conic[0], s.conic[1], s.conic[2]);
        // d power / d mean = Q (pixel - mean)
        sg.mean[0] += dpower * (ca * dx + cb * dy);
        sg.mean[1] += dpower * (cb * dx + cc * dy);
        sg.conic[0] += dpower * (-0.5 * dx * dx);
        sg.conic[1] += dpower * (-dx * dy);
        sg.conic[2] += dpower * (-0.5 * dy * dy);
    }
}

/// Renders and, given `dL/d(image)`, returns the image together with the
/// gradients of `L` with respect to every Gaussian parameter and every
/// modulation factor.
pub fn render_backward(scene: &[Gaussian], cam: &Camera, modulation: &Modulation, opts: &RenderOptions, grad_image: &[f64]) -> Result<RenderGrads> {
    let splats = prepare(scene, cam, modulation, opts)?;
    let (w, h) = (cam.width, cam.height);
    if grad_image.len() != 3 * w * h {
        return Err(Error::Shape(format!("image gradient has {} values, expected {}", grad_image.len(), 3 * w * h)));
    }
    let nchunks = h.div_ceil(ROWS_PER_CHUNK);
    let partial: Vec<Vec<SplatGrad>> = (0..nchunks)
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![SplatGrad::default(); splats.len()];
            let mut scratch = Vec::new();
            for y in chunk * ROWS_PER_CHUNK..((chunk + 1) * ROWS_PER_CHUNK).min(h) {
                for x in 0..w {
                    let o = 3 * (y * w + x);
                    let g = [grad_image[o], grad_image[o + 1], grad_image[o + 2]];
                    if g == [0.0; 3] {
                        continue;
                    }
                    backward_pixel(&splats, x as f64 + 0.5, y as f64 + 0.5, opts.background, g, &mut acc, &mut scratch);
                }
            }
            acc
        })
        .collect();
    let mut total = vec![SplatGrad::default(); splats.len()];
    for p in &partial {
        for (t, g) in total.iter_mut().zip(p) {
            t.add(g);
        }
    }

    let n = scene.len();
    let mut out = RenderGrads {
        gaussians: vec![0.0; n * GAUSSIAN_PARAMS],
        color_factors: match &modulation.color {
            ColorFactors::None => Vec::new(),
            ColorFactors::Sh(_) => vec![0.0; n * SH_LEN],
            ColorFactors::Rgb(_) => vec![0.0; n * 3],
        },
        opacity_factors: vec![0.0; n],
    };
    for (s, sg) in splats.iter().zip(&total) {
        splat_param_grads(s, sg, &scene[s.index], cam, modulation, opts, &mut out);
    }
    Ok(out)
}

fn splat_param_grads(s: &Splat, sg: &SplatGrad, g: &Gaussian, cam: &Camera, m: &Modulation, opts: &RenderOptions, out: &mut RenderGrads) {
    let i = s.index;
    let gp = &mut out.gaussians[i * GAUSSIAN_PARAMS..(i + 1) * GAUSSIAN_PARAMS];

    // opacity: alpha = clamp(sigmoid(logit) * factor)
    if s.alpha_unclamped <= ALPHA_MAX {
        let factor = m.opacity.as_ref().map_or(1.0, |o| o[i]);
        gp[10] += sg.alpha * factor * s.base_alpha * (1.0 - s.base_alpha);
        if m.opacity.is_some() {
            out.opacity_factors[i] += sg.alpha * s.base_alpha;
        }
    }

    // color
    let mut d_raw = [0.0; 3];
    for ch in 0..3 {
        let mut d_base = sg.color[ch];
        if let ColorFactors::Rgb(f) = &m.color {
            let prod = s.base_color[ch] * f[3 * i + ch];
            if (0.0..=1.0).contains(&prod) {
                out.color_factors[3 * i + ch] += sg.color[ch] * s.base_color[ch];
                d_base = sg.color[ch] * f[3 * i + ch];
            } else {
                d_base = 0.0;
            }
        }
        if (0.0..=1.0).contains(&s.raw_color[ch]) {
            d_raw[ch] = d_base;
        }
    }
    let basis = sh_basis(s.dir);
    let dbasis = sh_basis_grad(s.dir);
    let nb = basis_count(opts.sh_degree);
    let sh_f = match &m.color {
        ColorFactors::Sh(f) => Some(&f[i * SH_LEN..(i + 1) * SH_LEN]),
        _ => None,
    };
    let mut d_dir = Vector3::zeros();
    for ch in 0..3 {
        if d_raw[ch] == 0.0 {
            continue;
        }
        for k in 0..nb {
            let idx = ch * SH_BASIS + k;
            let factor = sh_f.map_or(1.0, |f| f[idx]);
            gp[11 + idx] += d_raw[ch] * basis[k] * factor;
            if sh_f.is_some() {
                out.color_factors[i * SH_LEN + idx] += d_raw[ch] * basis[k] * g.sh[idx];
            }
            let coeff = g.sh[idx] * factor;
            for a in 0..3 {
                d_dir[a] += d_raw[ch] * coeff * dbasis[k][a];
            }
        }
    }
    let mut d_mu = Vector3::zeros();
    if s.dir_norm > 0.0 {
        let d = Vector3::from(s.dir);
        d_mu += (d_dir - d * d.dot(&d_dir)) / s.dir_norm;
    }

    // conic = inverse(cov2): dL/dcov2 = -Q G Q with G the symmetric
    // full-matrix gradient of the conic
    let q = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let g_q = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let g_cov2 = -(q * g_q * q);
    // cov2 = M cov3 M^T + floor
    let g_cov3 = s.m.transpose() * g_cov2 * s.m;
    let g_m = 2.0 * g_cov2 * s.m * s.cov3;
    let g_j = g_m * cam.rotation.transpose();

    let t = s.t_cam;
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_t = Vector3::zeros();
    // J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]
    d_t.z += g_j[(0, 0)] * (-fx * iz2);
    d_t.x += g_j[(0, 2)] * (-fx * iz2);
    d_t.z += g_j[(0, 2)] * (2.0 * fx * t.x * iz3);
    d_t.z += g_j[(1, 1)] * (-fy * iz2);
    d_t.y += g_j[(1, 2)] * (-fy * iz2);
    d_t.z += g_j[(1, 2)] * (2.0 * fy * t.y * iz3);
    // mean = (fx x/z + cx, fy y/z + cy)
    d_t.x += sg.mean[0] * fx * iz;
    d_t.z += sg.mean[0] * (-fx * t.x * iz2);
    d_t.y += sg.mean[1] * fy * iz;
    d_t.z += sg.mean[1] * (-fy * t.y * iz2);
    d_mu += cam.rotation.transpose() * d_t;
    for a in 0..3 {
        gp[a] += d_mu[a];
    }

    // cov3 = A A^T with A = R S
    let amat = s.rmat * Matrix3::from_diagonal(&s.scale);
    let g_a = 2.0 * g_cov3 * amat;
    let mut g_r = Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            g_r[(r, c)] = g_a[(r, c)] * s.scale[c];
        }
    }
    for k in 0..3 {
        let d_scale: f64 = (0..3).map(|r| g_a[(r, k)] * s.rmat[(r, k)]).sum();
        gp[7 + k] += d_scale * s.scale[k];
    }
    let g_qu = quat_matrix_vjp(s.q_unit, &g_r);
    let g_q = normalize_quat_vjp(s.q_unit, s.q_norm, g_qu);
    for k in 0..4 {
        gp[3 + k] += g_q[k];
    }
}

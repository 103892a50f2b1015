//! Image losses and quality metrics.

use super::Image;
use crate::error::{Error, Result};

pub const SSIM_RADIUS: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const DEFAULT_LAMBDA: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
}

fn window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian blur of one `w x h` plane; samples outside the image
/// count as zero.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = x as isize + i as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    s += kv * src[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = y as isize + i as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    s += kv * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn plane(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(3).copied().collect()
}

/// Mean SSIM over all pixels and channels and, optionally, its gradient
/// with respect to `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    a.same_shape(b)?;
    let (w, h) = (a.width, a.height);
    let n = (w * h * 3) as f64;
    if n == 0.0 {
        return Err(Error::Shape("SSIM of an empty image".into()));
    }
    let k = window();
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; a.data.len()] } else { Vec::new() };
    for ch in 0..3 {
        let x = plane(a, ch);
        let y = plane(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, w, h, &k), blur(&y, w, h, &k));
        let (exx, eyy, exy) = (blur(&xx, w, h, &k), blur(&yy, w, h, &k), blur(&xy, w, h, &k));
        let mut m1 = vec![0.0; w * h];
        let mut m2 = vec![0.0; w * h];
        let mut m3 = vec![0.0; w * h];
        for p in 0..w * h {
            let (ux, uy) = (mx[p], my[p]);
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * (exy[p] - ux * uy) + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = (exx[p] - ux * ux) + (eyy[p] - uy * uy) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let d = b1 * b2;
                m1[p] = ((2.0 * uy * a2 - 2.0 * uy * a1) / d - s * (2.0 * ux / b1 - 2.0 * ux / b2)) / n;
                m2[p] = (-s / b2) / n;
                m3[p] = (2.0 * a1 / d) / n;
            }
        }
        if want_grad {
            // the window is symmetric, so the adjoint of the blur is the blur
            let (g1, g2, g3) = (blur(&m1, w, h, &k), blur(&m2, w, h, &k), blur(&m3, w, h, &k));
            for p in 0..w * h {
                grad[3 * p + ch] = g1[p] + 2.0 * x[p] * g2[p] + y[p] * g3[p];
            }
        }
    }
    Ok((total / n, grad))
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, zero padding).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.data.len().max(1) as f64)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.data.len().max(1) as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// `(1 - lambda) L1 + lambda (1 - SSIM) / 2`.
pub fn loss(rendered: &Image, target: &Image, lambda: f64) -> Result<LossTerms> {
    let l = l1(rendered, target)?;
    let s = ssim(rendered, target)?;
    Ok(LossTerms { loss: (1.0 - lambda) * l + lambda * (1.0 - s) / 2.0, l1: l, ssim: s })
}

/// [`loss`] together with its gradient with respect to `rendered`.
pub fn loss_with_grad(rendered: &Image, target: &Image, lambda: f64) -> Result<(LossTerms, Vec<f64>)> {
    let l = l1(rendered, target)?;
    let (s, ds) = ssim_impl(rendered, target, true)?;
    let n = rendered.data.len() as f64;
    let grad = rendered
        .data
        .iter()
        .zip(&target.data)
        .zip(&ds)
        .map(|((p, q), g)| {
            let sign = if p > q {
                1.0
            } else if p < q {
                -1.0
            } else {
                0.0
            };
            (1.0 - lambda) * sign / n - lambda * 0.5 * g
        })
        .collect();
    Ok((LossTerms { loss: (1.0 - lambda) * l + lambda * (1.0 - s) / 2.0, l1: l, ssim: s }, grad))
}

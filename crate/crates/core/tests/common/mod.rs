//! Independent reference implementations shared by the integration and
//! acceptance suites. Nothing here calls into the simulator's gate kernels.

#![allow(dead_code)]

use num_complex::Complex64 as C;

pub type Mat8 = [[C; 8]; 8];
pub type Mat2 = [[C; 2]; 2];

const Z0: C = C::new(0.0, 0.0);
const O1: C = C::new(1.0, 0.0);

pub fn identity2() -> Mat2 {
    [[O1, Z0], [Z0, O1]]
}

pub fn ry_matrix(a: f64) -> Mat2 {
    let (s, c) = (a / 2.0).sin_cos();
    [[C::new(c, 0.0), C::new(-s, 0.0)], [C::new(s, 0.0), C::new(c, 0.0)]]
}

pub fn rz_matrix(a: f64) -> Mat2 {
    [[C::from_polar(1.0, -a / 2.0), Z0], [Z0, C::from_polar(1.0, a / 2.0)]]
}

/// `op` on `qubit`, identity elsewhere, with qubit j = bit j of the index.
/// Built as the Kronecker product `I (x) ... (x) op (x) ... (x) I` with the
/// most significant qubit leftmost.
pub fn embed(op: Mat2, qubit: usize) -> Mat8 {
    let factors: Vec<Mat2> = (0..3).rev().map(|q| if q == qubit { op } else { identity2() }).collect();
    let mut out = [[Z0; 8]; 8];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let mut acc = O1;
            for (pos, f) in factors.iter().enumerate() {
                let shift = 2 - pos;
                acc *= f[(r >> shift) & 1][(c >> shift) & 1];
            }
            *v = acc;
        }
    }
    out
}

pub fn cnot_matrix(control: usize, target: usize) -> Mat8 {
    let mut out = [[Z0; 8]; 8];
    for c in 0..8 {
        let r = if c >> control & 1 == 1 { c ^ (1 << target) } else { c };
        out[r][c] = O1;
    }
    out
}

pub fn matmul(a: &Mat8, b: &Mat8) -> Mat8 {
    let mut out = [[Z0; 8]; 8];
    for i in 0..8 {
        for k in 0..8 {
            for j in 0..8 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn matvec(a: &Mat8, v: &[C; 8]) -> [C; 8] {
    let mut out = [Z0; 8];
    for i in 0..8 {
        for j in 0..8 {
            out[i] += a[i][j] * v[j];
        }
    }
    out
}

/// Dense unitary of the layered ansatz; `flat` is `[layer][qubit][theta, phi]`.
pub fn ansatz_unitary(flat: &[f64]) -> Mat8 {
    let mut u = embed(identity2(), 0);
    for layer in flat.chunks(6) {
        for q in 0..3 {
            u = matmul(&embed(ry_matrix(layer[2 * q]), q), &u);
            u = matmul(&embed(rz_matrix(layer[2 * q + 1]), q), &u);
        }
        u = matmul(&cnot_matrix(0, 1), &u);
        u = matmul(&cnot_matrix(1, 2), &u);
        u = matmul(&cnot_matrix(2, 0), &u);
    }
    u
}

/// Dense encoder state `(x)_j Rz(phi) Ry(theta) |0>`.
pub fn encoded_state(theta: f64, phi: f64) -> [C; 8] {
    let mut v = [Z0; 8];
    v[0] = O1;
    for q in 0..3 {
        v = matvec(&embed(ry_matrix(theta), q), &v);
        v = matvec(&embed(rz_matrix(phi), q), &v);
    }
    v
}

pub fn z_expectations(v: &[C; 8]) -> [f64; 3] {
    let mut z = [0.0; 3];
    for (k, a) in v.iter().enumerate() {
        for (j, zj) in z.iter_mut().enumerate() {
            *zj += if k >> j & 1 == 0 { a.norm_sqr() } else { -a.norm_sqr() };
        }
    }
    z
}

/// `<Z>` of the (optionally conditioned) circuit via dense matrices.
/// `cond = [s0, s1, s2, v0, v1, v2]` applied as `Ry(s_j)` then `Rz(v_j)`.
pub fn dense_expectation(theta: f64, phi: f64, cond: Option<[f64; 6]>, flat: &[f64]) -> [f64; 3] {
    let mut v = encoded_state(theta, phi);
    if let Some(c) = cond {
        for q in 0..3 {
            v = matvec(&embed(ry_matrix(c[q]), q), &v);
            v = matvec(&embed(rz_matrix(c[3 + q]), q), &v);
        }
    }
    let u = ansatz_unitary(flat);
    z_expectations(&matvec(&u, &v))
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Parameter-shift derivative of `upstream . <Z>` with respect to every
/// rotation angle in `[theta_enc, phi_enc, cond.., flat..]` order.
///
/// The encoding angles drive three gates each, so their derivative is the
/// sum of three single-gate shifts; those are evaluated with a per-qubit
/// dense encoder.
pub fn parameter_shift(theta: f64, phi: f64, cond: Option<[f64; 6]>, flat: &[f64], upstream: [f64; 3]) -> Vec<f64> {
    let shift = std::f64::consts::FRAC_PI_2;
    let f = |enc: [[f64; 2]; 3], cond: Option<[f64; 6]>, flat: &[f64]| -> f64 {
        let mut v = [Z0; 8];
        v[0] = O1;
        for (q, a) in enc.iter().enumerate() {
            v = matvec(&embed(ry_matrix(a[0]), q), &v);
            v = matvec(&embed(rz_matrix(a[1]), q), &v);
        }
        if let Some(c) = cond {
            for q in 0..3 {
                v = matvec(&embed(ry_matrix(c[q]), q), &v);
                v = matvec(&embed(rz_matrix(c[3 + q]), q), &v);
            }
        }
        dot3(z_expectations(&matvec(&ansatz_unitary(flat), &v)), upstream)
    };
    let base = [[theta, phi]; 3];
    let mut out = Vec::new();
    for which in 0..2 {
        let mut g = 0.0;
        for q in 0..3 {
            let mut plus = base;
            let mut minus = base;
            plus[q][which] += shift;
            minus[q][which] -= shift;
            g += (f(plus, cond, flat) - f(minus, cond, flat)) / 2.0;
        }
        out.push(g);
    }
    if let Some(c) = cond {
        for i in 0..6 {
            let mut plus = c;
            let mut minus = c;
            plus[i] += shift;
            minus[i] -= shift;
            out.push((f(base, Some(plus), flat) - f(base, Some(minus), flat)) / 2.0);
        }
    }
    for i in 0..flat.len() {
        let mut plus = flat.to_vec();
        let mut minus = flat.to_vec();
        plus[i] += shift;
        minus[i] -= shift;
        out.push((f(base, cond, &plus) - f(base, cond, &minus)) / 2.0);
    }
    out
}

/// Central finite differences of `upstream . <Z>` over the same slot order.
pub fn finite_difference(theta: f64, phi: f64, cond: Option<[f64; 6]>, flat: &[f64], upstream: [f64; 3], h: f64) -> Vec<f64> {
    let mut slots = vec![theta, phi];
    if let Some(c) = cond {
        slots.extend_from_slice(&c);
    }
    slots.extend_from_slice(flat);
    let n_cond = if cond.is_some() { 6 } else { 0 };
    let eval = |s: &[f64]| {
        let cond = cond.map(|_| {
            let mut c = [0.0; 6];
            c.copy_from_slice(&s[2..8]);
            c
        });
        dot3(dense_expectation(s[0], s[1], cond, &s[2 + n_cond..]), upstream)
    };
    (0..slots.len())
        .map(|i| {
            let mut p = slots.clone();
            let mut m = slots.clone();
            p[i] += h;
            m[i] -= h;
            (eval(&p) - eval(&m)) / (2.0 * h)
        })
        .collect()
}

/// Relative error. References below 1e-4 in magnitude are compared on an
/// absolute 1e-4 scale, since central differences cannot resolve a
/// relative error on a gradient that is (analytically) zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

// ---------------------------------------------------------------------------
// Real spherical harmonics from associated Legendre functions.

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// Associated Legendre `P_l^m(x)` with the Condon-Shortley phase, m >= 0,
/// by the standard upward recurrence.
pub fn assoc_legendre(l: u32, m: u32, x: f64) -> f64 {
    let mut pmm = 1.0;
    if m > 0 {
        let s = ((1.0 - x) * (1.0 + x)).sqrt();
        let mut fact = 1.0;
        for _ in 0..m {
            pmm *= -fact * s;
            fact += 2.0;
        }
    }
    if l == m {
        return pmm;
    }
    let mut pmmp1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pmmp1;
    }
    let mut pll = 0.0;
    for ll in (m + 2)..=l {
        pll = ((2 * ll - 1) as f64 * x * pmmp1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pmmp1;
        pmmp1 = pll;
    }
    pll
}

/// Real spherical harmonic `Y_l^m` (Condon-Shortley phase retained) at a
/// unit direction, ordered by index `l^2 + l + m`.
pub fn real_sh(l: i32, m: i32, d: [f64; 3]) -> f64 {
    let theta = d[2].clamp(-1.0, 1.0).acos();
    let phi = d[1].atan2(d[0]);
    let am = m.unsigned_abs();
    let k = (((2 * l + 1) as f64) / (4.0 * std::f64::consts::PI) * factorial(l as u32 - am) / factorial(l as u32 + am)).sqrt();
    let p = assoc_legendre(l as u32, am, theta.cos());
    match m.cmp(&0) {
        std::cmp::Ordering::Equal => k * p,
        std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * k * (m as f64 * phi).cos() * p,
        std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * k * (am as f64 * phi).sin() * p,
    }
}

pub fn real_sh_basis(d: [f64; 3]) -> [f64; 16] {
    let mut out = [0.0; 16];
    for l in 0..4i32 {
        for m in -l..=l {
            out[(l * l + l + m) as usize] = real_sh(l, m, d);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Direct (non-separable) SSIM reference.

/// Mean SSIM over all pixels and channels of two `h x w x 3` images with an
/// 11x11 Gaussian window (sigma 1.5), zero padding, computed by explicit
/// 2D window sums.
pub fn reference_ssim(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let radius = 5i64;
    let sigma = 1.5;
    let mut g1 = Vec::new();
    for i in -radius..=radius {
        g1.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let s: f64 = g1.iter().sum();
    g1.iter_mut().for_each(|v| *v /= s);
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let (sx, sy) = (x + dx, y + dy);
                        if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                            continue;
                        }
                        let wgt = g1[(dy + radius) as usize] * g1[(dx + radius) as usize];
                        let idx = ((sy as usize * w) + sx as usize) * 3 + ch;
                        let (va, vb) = (a[idx], b[idx]);
                        mx += wgt * va;
                        my += wgt * vb;
                        xx += wgt * va * va;
                        yy += wgt * vb * vb;
                        xy += wgt * va * vb;
                    }
                }
                let sx2 = xx - mx * mx;
                let sy2 = yy - my * my;
                let sxy = xy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx2 + sy2 + c2));
            }
        }
    }
    total / (w * h * 3) as f64
}

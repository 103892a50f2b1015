//! Real spherical harmonics up to degree 3, in the sign convention and
//! ordering (`l^2 + l + m`) used by Gaussian-splatting renderers.

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis functions per color channel.
pub const SH_BASIS: usize = 16;
/// Coefficients per Gaussian: 16 per RGB channel, channel-major.
pub const SH_LEN: usize = 3 * SH_BASIS;

/// Number of basis functions used at a given degree.
pub fn basis_count(degree: usize) -> usize {
    (degree.min(3) + 1).pow(2)
}

pub fn sh_basis(d: [f64; 3]) -> [f64; SH_BASIS] {
    let [x, y, z] = d;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Gradient of each basis polynomial with respect to `(x, y, z)`.
pub fn sh_basis_grad(d: [f64; 3]) -> [[f64; 3]; SH_BASIS] {
    let [x, y, z] = d;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let c2 = SH_C2;
    let c3 = SH_C3;
    [
        [0.0, 0.0, 0.0],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [c2[0] * y, c2[0] * x, 0.0],
        [0.0, c2[1] * z, c2[1] * y],
        [-2.0 * c2[2] * x, -2.0 * c2[2] * y, 4.0 * c2[2] * z],
        [c2[3] * z, 0.0, c2[3] * x],
        [2.0 * c2[4] * x, -2.0 * c2[4] * y, 0.0],
        [6.0 * c3[0] * x * y, c3[0] * (3.0 * xx - 3.0 * yy), 0.0],
        [c3[1] * y * z, c3[1] * x * z, c3[1] * x * y],
        [-2.0 * c3[2] * x * y, c3[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * c3[2] * y * z],
        [-6.0 * c3[3] * x * z, -6.0 * c3[3] * y * z, c3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)],
        [c3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * c3[4] * x * y, 8.0 * c3[4] * x * z],
        [2.0 * c3[5] * x * z, -2.0 * c3[5] * y * z, c3[5] * (xx - yy)],
        [c3[6] * (3.0 * xx - 3.0 * yy), -6.0 * c3[6] * x * y, 0.0],
    ]
}

/// Unclamped `sum_k a_k Y_k(d) + 0.5` per channel using the first
/// `basis_count(degree)` functions.
pub fn eval_sh_raw(sh: &[f64], d: [f64; 3], degree: usize) -> [f64; 3] {
    let basis = sh_basis(d);
    let n = basis_count(degree);
    std::array::from_fn(|ch| {
        let coeffs = &sh[ch * SH_BASIS..ch * SH_BASIS + n];
        coeffs.iter().zip(&basis[..n]).map(|(a, y)| a * y).sum::<f64>() + 0.5
    })
}

/// Degree-3 SH color with the +0.5 offset, clamped to `[0, 1]`.
pub fn eval_sh(sh: &[f64], d: [f64; 3]) -> [f64; 3] {
    eval_sh_raw(sh, d, 3).map(|c| c.clamp(0.0, 1.0))
}

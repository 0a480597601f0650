//! Real spherical harmonics up to degree 3 for view-dependent color.
//!
//! Colors use the customary `+0.5` offset and are clamped at zero.

use crate::math::Vec3;
use crate::primitive::SH_BASIS;

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

/// Basis functions in use for `degree`.
pub fn basis_count(degree: usize) -> usize {
    (degree.min(3) + 1).pow(2)
}

/// Basis values at `dir`; entries beyond `degree` are zero.
pub fn basis(dir: Vec3, degree: usize) -> [f64; SH_BASIS] {
    let [x, y, z] = dir;
    let mut b = [0.0; SH_BASIS];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[9] = SH_C3[0] * y * (3.0 * xx - yy);
        b[10] = SH_C3[1] * x * y * z;
        b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
        b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
        b[14] = SH_C3[5] * z * (xx - yy);
        b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    }
    b
}

/// Partial derivatives of each basis function with respect to `(x, y, z)`.
fn basis_jacobian(dir: Vec3, degree: usize) -> [Vec3; SH_BASIS] {
    let [x, y, z] = dir;
    let mut j = [[0.0; 3]; SH_BASIS];
    if degree >= 1 {
        j[1] = [0.0, -SH_C1, 0.0];
        j[2] = [0.0, 0.0, SH_C1];
        j[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree >= 2 {
        j[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
        j[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
        j[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
        j[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
        j[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        j[9] = [SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
        j[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
        j[11] = [
            SH_C3[2] * (-2.0 * x * y),
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            SH_C3[2] * 8.0 * y * z,
        ];
        j[12] = [
            SH_C3[3] * (-6.0 * x * z),
            SH_C3[3] * (-6.0 * y * z),
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ];
        j[13] = [
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            SH_C3[4] * (-2.0 * x * y),
            SH_C3[4] * 8.0 * x * z,
        ];
        j[14] = [SH_C3[5] * 2.0 * x * z, SH_C3[5] * (-2.0 * y * z), SH_C3[5] * (xx - yy)];
        j[15] = [SH_C3[6] * (3.0 * xx - 3.0 * yy), SH_C3[6] * (-6.0 * x * y), 0.0];
    }
    j
}

/// RGB color seen along `view_dir` (unit) using bands up to `degree`.
pub fn sh_eval(sh: &[[f64; 3]; SH_BASIS], view_dir: Vec3, degree: usize) -> [f64; 3] {
    let b = basis(view_dir, degree);
    let n = basis_count(degree);
    let mut rgb = [0.5; 3];
    for (bk, coeff) in b.iter().zip(sh.iter()).take(n) {
        for c in 0..3 {
            rgb[c] += bk * coeff[c];
        }
    }
    rgb.map(|v| v.max(0.0))
}

/// Backward of [`sh_eval`]: accumulates into `grad_sh` and returns the gradient
/// with respect to the (unit) view direction. Clamped channels pass nothing.
pub fn sh_backward(
    sh: &[[f64; 3]; SH_BASIS],
    view_dir: Vec3,
    degree: usize,
    grad_rgb: [f64; 3],
    grad_sh: &mut [f64],
) -> Vec3 {
    let b = basis(view_dir, degree);
    let n = basis_count(degree);
    let mut raw = [0.5; 3];
    for (bk, coeff) in b.iter().zip(sh.iter()).take(n) {
        for c in 0..3 {
            raw[c] += bk * coeff[c];
        }
    }
    let g = [0, 1, 2].map(|c| if raw[c] > 0.0 { grad_rgb[c] } else { 0.0 });
    for k in 0..n {
        for c in 0..3 {
            grad_sh[3 * k + c] += b[k] * g[c];
        }
    }
    if degree == 0 {
        return [0.0; 3];
    }
    let jac = basis_jacobian(view_dir, degree);
    let mut gd = [0.0; 3];
    for k in 1..n {
        let s = sh[k][0] * g[0] + sh[k][1] * g[1] + sh[k][2] * g[2];
        for a in 0..3 {
            gd[a] += s * jac[k][a];
        }
    }
    gd
}

/// SH coefficients whose DC term reproduces `rgb` (inverse of the `+0.5` offset).
pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

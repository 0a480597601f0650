//! Primitive parameterization, its flat scalar layout, and the surfel frame.

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::math::{self, Mat3, Vec3};
use crate::shape::{sigmoid, FourierShape};

/// Real SH basis functions per channel (degree ≤ 3).
pub const SH_BASIS: usize = 16;

/// Scalar offsets into the flat per-primitive parameter vector.
///
/// Order: center[3], quaternion[4], opacity_raw, sh[48], circumradius_raw,
/// amplitudes_raw[K], phases[K], sharpness_raw. This is also the checkpoint
/// record order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub k: usize,
}

impl ParamLayout {
    pub const CENTER: usize = 0;
    pub const ROTATION: usize = 3;
    pub const OPACITY: usize = 7;
    pub const SH: usize = 8;
    pub const RADIUS: usize = 8 + 3 * SH_BASIS;

    pub fn new(k: usize) -> Self {
        Self { k }
    }
    pub fn amplitudes(&self) -> usize {
        Self::RADIUS + 1
    }
    pub fn phases(&self) -> usize {
        self.amplitudes() + self.k
    }
    pub fn sharpness(&self) -> usize {
        self.phases() + self.k
    }
    /// Scalars per primitive: `58 + 2K` (70 at K = 6).
    pub fn len(&self) -> usize {
        self.sharpness() + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn group_of(&self, idx: usize) -> ParamGroup {
        match idx {
            i if i < Self::ROTATION => ParamGroup::Position,
            i if i < Self::OPACITY => ParamGroup::Rotation,
            i if i == Self::OPACITY => ParamGroup::Opacity,
            i if i < Self::SH + 3 => ParamGroup::ShDc,
            i if i < Self::RADIUS => ParamGroup::ShRest,
            i if i == Self::RADIUS => ParamGroup::Circumradius,
            i if i < self.phases() => ParamGroup::Amplitude,
            i if i < self.sharpness() => ParamGroup::Phase,
            _ => ParamGroup::Sharpness,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Position,
    Rotation,
    Opacity,
    ShDc,
    ShRest,
    Circumradius,
    Amplitude,
    Phase,
    Sharpness,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Position,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::ShDc,
        ParamGroup::ShRest,
        ParamGroup::Circumradius,
        ParamGroup::Amplitude,
        ParamGroup::Phase,
        ParamGroup::Sharpness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Opacity => "opacity",
            ParamGroup::ShDc => "sh_dc",
            ParamGroup::ShRest => "sh_rest",
            ParamGroup::Circumradius => "circumradius",
            ParamGroup::Amplitude => "amplitude",
            ParamGroup::Phase => "phase",
            ParamGroup::Sharpness => "sharpness",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub center: Vec3,
    /// Quaternion `(w, x, y, z)`; renormalized after each optimizer step.
    pub rotation: [f64; 4],
    pub opacity_raw: f64,
    /// `sh[basis][channel]`.
    pub sh: [[f64; 3]; SH_BASIS],
    pub shape: FourierShape,
}

impl Primitive {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_raw)
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.shape.frequencies())
    }

    pub fn frame(&self) -> [Vec3; 3] {
        tangent_frame(self.rotation)
    }

    pub fn surfel_to_world(&self) -> Matrix4<f64> {
        surfel_to_world(self)
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            for q in &mut self.rotation {
                *q /= n;
            }
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }

    pub fn write_flat(&self, out: &mut [f64]) {
        let layout = self.layout();
        debug_assert_eq!(out.len(), layout.len());
        out[..3].copy_from_slice(&self.center);
        out[3..7].copy_from_slice(&self.rotation);
        out[ParamLayout::OPACITY] = self.opacity_raw;
        for (b, rgb) in self.sh.iter().enumerate() {
            out[ParamLayout::SH + 3 * b..ParamLayout::SH + 3 * b + 3].copy_from_slice(rgb);
        }
        out[ParamLayout::RADIUS] = self.shape.circumradius_raw;
        let k = layout.k;
        out[layout.amplitudes()..layout.amplitudes() + k].copy_from_slice(&self.shape.amplitudes_raw);
        out[layout.phases()..layout.phases() + k].copy_from_slice(&self.shape.phases);
        out[layout.sharpness()] = self.shape.sharpness_raw;
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.layout().len()];
        self.write_flat(&mut v);
        v
    }

    pub fn from_flat(flat: &[f64], k: usize) -> Self {
        let layout = ParamLayout::new(k);
        assert_eq!(flat.len(), layout.len());
        let mut sh = [[0.0; 3]; SH_BASIS];
        for (b, rgb) in sh.iter_mut().enumerate() {
            rgb.copy_from_slice(&flat[ParamLayout::SH + 3 * b..ParamLayout::SH + 3 * b + 3]);
        }
        Self {
            center: [flat[0], flat[1], flat[2]],
            rotation: [flat[3], flat[4], flat[5], flat[6]],
            opacity_raw: flat[ParamLayout::OPACITY],
            sh,
            shape: FourierShape::new(
                flat[ParamLayout::RADIUS],
                flat[layout.amplitudes()..layout.amplitudes() + k].to_vec(),
                flat[layout.phases()..layout.phases() + k].to_vec(),
                flat[layout.sharpness()],
            ),
        }
    }

    /// Name of the first non-finite parameter group, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let layout = self.layout();
        let flat = self.to_flat();
        flat.iter()
            .position(|x| !x.is_finite())
            .map(|i| layout.group_of(i).name())
    }
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn rotation_matrix(q: [f64; 4]) -> Mat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Pull a gradient on the rotation matrix back to the raw (unnormalized) quaternion.
pub fn rotation_matrix_backward(q: [f64; 4], grad: &Mat3) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let d_w = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let d_x = [[0.0, y, z], [y, -2.0 * x, -w], [z, w, -2.0 * x]];
    let d_y = [[-2.0 * y, x, w], [x, 0.0, z], [-w, z, -2.0 * y]];
    let d_z = [[-2.0 * z, -w, x], [w, -2.0 * z, y], [x, y, 0.0]];
    let contract = |d: &Mat3| -> f64 {
        let mut s = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                s += d[r][c] * grad[r][c];
            }
        }
        2.0 * s
    };
    let gh = [contract(&d_w), contract(&d_x), contract(&d_y), contract(&d_z)];
    let qh = [w, x, y, z];
    let proj: f64 = gh.iter().zip(&qh).map(|(a, b)| a * b).sum();
    [
        (gh[0] - qh[0] * proj) / n,
        (gh[1] - qh[1] * proj) / n,
        (gh[2] - qh[2] * proj) / n,
        (gh[3] - qh[3] * proj) / n,
    ]
}

/// Right-handed tangent frame `(t_u, t_v, t_w)`: the columns of the rotation.
pub fn tangent_frame(q: [f64; 4]) -> [Vec3; 3] {
    let r = rotation_matrix(q);
    [math::column(&r, 0), math::column(&r, 1), math::column(&r, 2)]
}

/// Unit quaternion rotating `+z` onto `normal`.
pub fn quaternion_facing(normal: Vec3) -> [f64; 4] {
    let n = math::normalize(normal);
    let d = n[2];
    if d < -1.0 + 1e-12 {
        return [0.0, 1.0, 0.0, 0.0];
    }
    // half-angle form: q = (1 + d, z × n) normalized
    let axis = math::cross([0.0, 0.0, 1.0], n);
    let q = [1.0 + d, axis[0], axis[1], axis[2]];
    let len = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    [q[0] / len, q[1] / len, q[2] / len, q[3] / len]
}

/// Homogeneous surfel-to-world matrix with columns `(R t_u, R t_v, 0, p)`.
///
/// Local coordinates are measured in units of the circumradius, so the Fourier
/// boundary is compared against `|z_0| ∈ [0, 1]` and the bounding radius is 1.
pub fn surfel_to_world(p: &Primitive) -> Matrix4<f64> {
    let [tu, tv, _] = p.frame();
    let r = p.shape.radius();
    Matrix4::new(
        r * tu[0], r * tv[0], 0.0, p.center[0],
        r * tu[1], r * tv[1], 0.0, p.center[1],
        r * tu[2], r * tv[2], 0.0, p.center[2],
        0.0, 0.0, 0.0, 1.0,
    )
}

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    #[default]
    Perspective,
    /// Parallel projection: `fx`/`fy` are pixels per world unit.
    Orthographic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Rigid world-to-camera transform, row-major. The camera looks down `+z`.
    pub world_to_camera: [[f64; 4]; 4],
    #[serde(default)]
    pub projection: Projection,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, world_to_camera: Matrix4<f64>) -> Self {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = world_to_camera[(r, c)];
            }
        }
        Self { fx, fy, cx, cy, width, height, world_to_camera: m, projection: Projection::Perspective }
    }

    /// Camera at `eye` looking at `target`, image `y` pointing along `-up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y: f64, width: usize, height: usize) -> Self {
        let forward = math::normalize(math::sub(target, eye));
        let right = math::normalize(math::cross(forward, up));
        let down = math::cross(forward, right);
        let rot = [right, down, forward];
        let t = math::scale(math::mat_vec(&rot, eye), -1.0);
        let fy = 0.5 * height as f64 / (0.5 * fov_y).tan();
        let w2c = Matrix4::new(
            rot[0][0], rot[0][1], rot[0][2], t[0],
            rot[1][0], rot[1][1], rot[1][2], t[1],
            rot[2][0], rot[2][1], rot[2][2], t[2],
            0.0, 0.0, 0.0, 1.0,
        );
        Self::new(fy, fy, 0.5 * width as f64, 0.5 * height as f64, width, height, w2c)
    }

    pub fn orthographic(pixels_per_unit: f64, width: usize, height: usize, world_to_camera: Matrix4<f64>) -> Self {
        let mut c = Self::new(
            pixels_per_unit,
            pixels_per_unit,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
            world_to_camera,
        );
        c.projection = Projection::Orthographic;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let d = math::dot(r[i], r[j]) - if i == j { 1.0 } else { 0.0 };
                if d.abs() > 1e-6 {
                    return Err(Error::Config("world_to_camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn rotation(&self) -> Mat3 {
        let m = &self.world_to_camera;
        [[m[0][0], m[0][1], m[0][2]], [m[1][0], m[1][1], m[1][2]], [m[2][0], m[2][1], m[2][2]]]
    }

    pub fn translation(&self) -> Vec3 {
        let m = &self.world_to_camera;
        [m[0][3], m[1][3], m[2][3]]
    }

    pub fn world_to_camera_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|r, c| self.world_to_camera[r][c])
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3 {
        math::scale(math::mat_t_vec(&self.rotation(), self.translation()), -1.0)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        math::add(math::mat_vec(&self.rotation(), p), self.translation())
    }

    /// Projection matrix applied after `world_to_camera`. Rows 1, 2 and 4 define
    /// the screen planes; row 3 carries camera depth.
    pub fn intrinsic_matrix(&self) -> Matrix4<f64> {
        match self.projection {
            Projection::Perspective => Matrix4::new(
                self.fx, 0.0, self.cx, 0.0,
                0.0, self.fy, self.cy, 0.0,
                0.0, 0.0, 1.0, 0.0,
                0.0, 0.0, 1.0, 0.0,
            ),
            Projection::Orthographic => Matrix4::new(
                self.fx, 0.0, 0.0, self.cx,
                0.0, self.fy, 0.0, self.cy,
                0.0, 0.0, 1.0, 0.0,
                0.0, 0.0, 0.0, 1.0,
            ),
        }
    }

    /// World-to-screen transform `W`.
    pub fn world_to_screen(&self) -> Matrix4<f64> {
        self.intrinsic_matrix() * self.world_to_camera_matrix()
    }

    /// Pixel coordinates and camera depth of a camera-space point.
    pub fn project_camera_point(&self, pc: Vec3) -> (f64, f64) {
        match self.projection {
            Projection::Perspective => (self.fx * pc[0] / pc[2] + self.cx, self.fy * pc[1] / pc[2] + self.cy),
            Projection::Orthographic => (self.fx * pc[0] + self.cx, self.fy * pc[1] + self.cy),
        }
    }

    /// Direction from the camera toward a world point (unit length).
    pub fn view_direction(&self, p: Vec3) -> Vec3 {
        match self.projection {
            Projection::Perspective => math::normalize(math::sub(p, self.position())),
            Projection::Orthographic => self.rotation()[2],
        }
    }

    /// Camera-space ray direction through a pixel (perspective) or the fixed
    /// viewing axis (orthographic).
    pub fn back_project(&self, x: f64, y: f64, depth: f64) -> Vec3 {
        match self.projection {
            Projection::Perspective => [(x - self.cx) / self.fx * depth, (y - self.cy) / self.fy * depth, depth],
            Projection::Orthographic => [(x - self.cx) / self.fx, (y - self.cy) / self.fy, depth],
        }
    }
}

/// Result of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projected {
    Visible { x: f64, y: f64, depth: f64 },
    Invisible,
}

/// Pinhole (or orthographic) projection of a world point; points at or behind
/// the near plane are invisible.
pub fn project_point(camera: &Camera, p: Vec3, near_clip: f64) -> Projected {
    let pc = camera.to_camera(p);
    if pc[2] <= near_clip {
        return Projected::Invisible;
    }
    let (x, y) = camera.project_camera_point(pc);
    Projected::Visible { x, y, depth: pc[2] }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cam() -> Camera {
        Camera::new(100.0, 100.0, 50.0, 50.0, 100, 100, Matrix4::identity())
    }

    #[test]
    fn projection_examples() {
        let cam = identity_cam();
        assert_eq!(project_point(&cam, [0.0, 0.0, 3.0], 0.01), Projected::Visible { x: 50.0, y: 50.0, depth: 3.0 });
        assert_eq!(project_point(&cam, [1.0, 0.0, 2.0], 0.01), Projected::Visible { x: 100.0, y: 50.0, depth: 2.0 });
        assert_eq!(project_point(&cam, [0.0, 0.0, 0.005], 0.01), Projected::Invisible);
        assert_eq!(project_point(&cam, [0.0, 0.0, -1.0], 0.01), Projected::Invisible);
    }

    #[test]
    fn look_at_centers_target() {
        let cam = Camera::look_at([3.0, 1.0, -4.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 0.8, 64, 48);
        cam.validate().unwrap();
        match project_point(&cam, [0.0, 0.0, 0.0], 0.01) {
            Projected::Visible { x, y, depth } => {
                assert!((x - 32.0).abs() < 1e-9 && (y - 24.0).abs() < 1e-9);
                assert!((depth - 26f64.sqrt()).abs() < 1e-9);
            }
            Projected::Invisible => panic!("target must be visible"),
        }
        let pos = cam.position();
        assert!((pos[0] - 3.0).abs() < 1e-12 && (pos[2] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_orthonormal_pose() {
        let mut cam = identity_cam();
        cam.world_to_camera[0][0] = 1.1;
        assert!(cam.validate().is_err());
    }
}

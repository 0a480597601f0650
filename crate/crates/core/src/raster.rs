//! Tile-based forward renderer for Fourier surfels.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Projection};
use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};
use crate::primitive::{rotation_matrix, Primitive};
use crate::scene::SceneModel;
use crate::sh::sh_eval;
use crate::shape::horner;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub tile_size: usize,
    pub near_clip: f64,
    pub background: [f64; 3],
    pub alpha_cutoff: f64,
    pub transmittance_floor: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            near_clip: 0.01,
            background: [0.0; 3],
            alpha_cutoff: 1.0 / 255.0,
            transmittance_floor: 1e-4,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::Config("tile_size must be at least 1".into()));
        }
        if !(self.transmittance_floor > 0.0 && self.transmittance_floor < 1.0) {
            return Err(Error::Config("transmittance_floor must lie in (0, 1)".into()));
        }
        if !(self.near_clip > 0.0) {
            return Err(Error::Config("near_clip must be positive".into()));
        }
        Ok(())
    }
}

/// One compositing event kept for backward and the distortion loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendRecord {
    pub id: u32,
    pub alpha: f64,
    /// Transmittance in front of this record.
    pub transmittance: f64,
    pub depth: f64,
    pub u: f64,
    pub v: f64,
}

impl BlendRecord {
    pub fn weight(&self) -> f64 {
        self.alpha * self.transmittance
    }
}

/// Per-view data of one primitive, derived once per render.
#[derive(Clone, Debug)]
pub struct Splat {
    pub id: u32,
    pub visible: bool,
    /// Camera-space depth of the center (sort key).
    pub center_depth: f64,
    /// Rows 1, 2 and 4 of `W H` on the `(u, v, 1)` columns.
    pub m: [Vec3; 3],
    /// Camera depth row of `V H` on the `(u, v, 1)` columns.
    pub depth_row: Vec3,
    /// `V H` rows on the `(u, v, 1)` columns (camera space).
    pub a: Mat3,
    /// Determinant threshold below which the pixel ray counts as parallel.
    pub det_eps: f64,
    /// Active complex boundary coefficients (length `k_active`).
    pub coeffs: Vec<Complex64>,
    /// `e^{iφ_k}` for the active frequencies.
    pub phase_units: Vec<Complex64>,
    pub opacity: f64,
    pub sigma: f64,
    pub color: [f64; 3],
    /// Camera-space normal facing the camera.
    pub normal: Vec3,
    /// `+1` or `-1`: orientation applied to `t_w` for the normal buffer.
    pub normal_sign: f64,
    /// Inclusive tile rectangle `(x0, y0, x1, y1)`, if any.
    pub tiles: Option<(usize, usize, usize, usize)>,
}

/// Window inputs at one local point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaAux {
    pub rho: f64,
    pub cos_theta: f64,
    pub sin_theta: f64,
    /// Boundary radius in local units (`|z_0|`).
    pub r: f64,
    /// `(r - ρ) / r`.
    pub x: f64,
}

impl Splat {
    /// Ray–plane hit at pixel position `(px, py)`: local `(u, v)` and camera depth.
    #[inline]
    pub fn intersect(&self, px: f64, py: f64, near_clip: f64) -> Option<(f64, f64, f64)> {
        let [m0, m1, m3] = &self.m;
        let e = [px * m3[0] - m0[0], px * m3[1] - m0[1], px * m3[2] - m0[2]];
        let g = [py * m3[0] - m1[0], py * m3[1] - m1[1], py * m3[2] - m1[2]];
        let det = e[0] * g[1] - e[1] * g[0];
        if det.abs() < self.det_eps {
            return None;
        }
        let u = (e[1] * g[2] - e[2] * g[1]) / det;
        let v = (e[2] * g[0] - e[0] * g[2]) / det;
        let z = self.depth_row[0] * u + self.depth_row[1] * v + self.depth_row[2];
        if z <= near_clip {
            return None;
        }
        Some((u, v, z))
    }

    /// Hard-window alpha at local `(u, v)`; `None` outside the bounding circle.
    #[inline]
    pub fn alpha(&self, u: f64, v: f64) -> Option<(f64, AlphaAux)> {
        let rho2 = u * u + v * v;
        if rho2 > 1.0 {
            return None;
        }
        if rho2 == 0.0 {
            let aux = AlphaAux { rho: 0.0, cos_theta: 1.0, sin_theta: 0.0, r: 1.0, x: 1.0 };
            return Some((self.opacity, aux));
        }
        let rho = rho2.sqrt();
        let (c, s) = (u / rho, v / rho);
        let r = horner(&self.coeffs, Complex64::new(c, s)).norm();
        let x = if r > 0.0 { (r - rho) / r } else { f64::NEG_INFINITY };
        let aux = AlphaAux { rho, cos_theta: c, sin_theta: s, r, x };
        let alpha = if x > 0.0 { self.opacity * x.powf(self.sigma) } else { 0.0 };
        Some((alpha, aux))
    }
}

/// Hard-window alpha of `primitive` at local `(u, v)` using `k_active` frequencies.
pub fn pixel_alpha(primitive: &Primitive, u: f64, v: f64, k_active: usize) -> (f64, AlphaAux) {
    let k = k_active.clamp(1, primitive.shape.frequencies());
    let coeffs = primitive.shape.coefficients()[..k].to_vec();
    let rho = u.hypot(v);
    if rho == 0.0 {
        return (primitive.opacity(), AlphaAux { rho: 0.0, cos_theta: 1.0, sin_theta: 0.0, r: 1.0, x: 1.0 });
    }
    let (c, s) = (u / rho, v / rho);
    let r = horner(&coeffs, Complex64::new(c, s)).norm();
    let x = if r > 0.0 { (r - rho) / r } else { f64::NEG_INFINITY };
    let alpha = if x > 0.0 { primitive.opacity() * x.powf(primitive.shape.sharpness()) } else { 0.0 };
    (alpha, AlphaAux { rho, cos_theta: c, sin_theta: s, r, x })
}

/// `V H` restricted to camera rows and the `(u, v, 1)` columns.
fn camera_space_surfel(p: &Primitive, camera: &Camera) -> Mat3 {
    let rot = rotation_matrix(p.rotation);
    let rc = camera.rotation();
    let radius = p.shape.radius();
    let tu = math::mat_vec(&rc, math::column(&rot, 0));
    let tv = math::mat_vec(&rc, math::column(&rot, 1));
    let pc = camera.to_camera(p.center);
    [
        [radius * tu[0], radius * tv[0], pc[0]],
        [radius * tu[1], radius * tv[1], pc[1]],
        [radius * tu[2], radius * tv[2], pc[2]],
    ]
}

/// Screen rows 1, 2, 4 of `P A` for a camera-space surfel `A`.
pub fn screen_rows(camera: &Camera, a: &Mat3) -> [Vec3; 3] {
    match camera.projection {
        Projection::Perspective => [
            [0, 1, 2].map(|c| camera.fx * a[0][c] + camera.cx * a[2][c]),
            [0, 1, 2].map(|c| camera.fy * a[1][c] + camera.cy * a[2][c]),
            a[2],
        ],
        Projection::Orthographic => [
            [camera.fx * a[0][0], camera.fx * a[0][1], camera.fx * a[0][2] + camera.cx],
            [camera.fy * a[1][0], camera.fy * a[1][1], camera.fy * a[1][2] + camera.cy],
            [0.0, 0.0, 1.0],
        ],
    }
}

fn tile_grid(camera: &Camera, tile_size: usize) -> (usize, usize) {
    (camera.width.div_ceil(tile_size), camera.height.div_ceil(tile_size))
}

/// Conservative tile rectangle covering the projected disc, or `None`.
fn tile_rect(p: &Primitive, camera: &Camera, config: &RenderConfig, center_depth: f64) -> Option<(usize, usize, usize, usize)> {
    if center_depth <= config.near_clip {
        return None;
    }
    let [tu, tv, _] = p.frame();
    let radius = p.shape.radius();
    let ext = [0, 1, 2].map(|i| radius * (tu[i] * tu[i] + tv[i] * tv[i]).sqrt());
    let (tx, ty) = tile_grid(camera, config.tile_size);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for corner in 0..8 {
        let q = [0, 1, 2].map(|i| p.center[i] + if corner >> i & 1 == 1 { ext[i] } else { -ext[i] });
        let qc = camera.to_camera(q);
        if camera.projection == Projection::Perspective && qc[2] <= config.near_clip {
            return Some((0, 0, tx - 1, ty - 1));
        }
        let (sx, sy) = camera.project_camera_point(qc);
        x0 = x0.min(sx);
        y0 = y0.min(sy);
        x1 = x1.max(sx);
        y1 = y1.max(sy);
    }
    if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
        return None;
    }
    if x1 < 0.0 || y1 < 0.0 || x0 >= camera.width as f64 || y0 >= camera.height as f64 {
        return None;
    }
    let ts = config.tile_size as f64;
    let clamp = |v: f64, n: usize| ((v / ts).floor().max(0.0) as usize).min(n - 1);
    Some((clamp(x0, tx), clamp(y0, ty), clamp(x1, tx), clamp(y1, ty)))
}

/// Derives per-view splat data for every primitive.
pub fn prepare_splats(scene: &SceneModel, camera: &Camera, config: &RenderConfig, k_active: usize) -> Vec<Splat> {
    let campos = camera.position();
    scene
        .primitives
        .iter()
        .enumerate()
        .map(|(id, p)| {
            let k = k_active.clamp(1, p.shape.frequencies());
            let a = camera_space_surfel(p, camera);
            let center_depth = a[2][2];
            let tiles = tile_rect(p, camera, config, center_depth);
            let rot = rotation_matrix(p.rotation);
            let nc = math::mat_vec(&camera.rotation(), math::column(&rot, 2));
            let toward = match camera.projection {
                Projection::Perspective => [a[0][2], a[1][2], a[2][2]],
                Projection::Orthographic => [0.0, 0.0, 1.0],
            };
            let normal_sign = if math::dot(nc, toward) > 0.0 { -1.0 } else { 1.0 };
            let view_dir = match camera.projection {
                Projection::Perspective => math::normalize(math::sub(p.center, campos)),
                Projection::Orthographic => camera.view_direction(p.center),
            };
            let radius = p.shape.radius();
            Splat {
                id: id as u32,
                det_eps: 1e-12 * camera.fx * camera.fy * radius * radius,
                visible: tiles.is_some(),
                center_depth,
                m: screen_rows(camera, &a),
                depth_row: a[2],
                a,
                coeffs: p.shape.coefficients()[..k].to_vec(),
                phase_units: p.shape.phases[..k].iter().map(|&ph| Complex64::from_polar(1.0, ph)).collect(),
                opacity: p.opacity(),
                sigma: p.shape.sharpness(),
                color: sh_eval(&p.sh, view_dir, scene.sh_degree_active),
                normal: math::scale(nc, normal_sign),
                normal_sign,
                tiles,
            }
        })
        .collect()
}

/// Per-tile primitive lists, each ordered front to back by center depth then id.
#[derive(Clone, Debug, Default)]
pub struct TileBins {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub tile_size: usize,
    pub lists: Vec<Vec<u32>>,
}

pub fn bin_splats(splats: &[Splat], camera: &Camera, tile_size: usize) -> TileBins {
    let (tx, ty) = tile_grid(camera, tile_size);
    let mut order: Vec<&Splat> = splats.iter().filter(|s| s.visible).collect();
    order.sort_by(|a, b| a.center_depth.total_cmp(&b.center_depth).then(a.id.cmp(&b.id)));
    let mut lists = vec![Vec::new(); tx * ty];
    for s in order {
        let Some((x0, y0, x1, y1)) = s.tiles else { continue };
        for y in y0..=y1 {
            for x in x0..=x1 {
                lists[y * tx + x].push(s.id);
            }
        }
    }
    TileBins { tiles_x: tx, tiles_y: ty, tile_size, lists }
}

pub fn bin_tiles(scene: &SceneModel, camera: &Camera, config: &RenderConfig, k_active: usize) -> TileBins {
    bin_splats(&prepare_splats(scene, camera, config, k_active), camera, config.tile_size)
}

impl TileBins {
    /// Pixel rectangle `(x0, y0, x1, y1)` (exclusive ends) of tile `t`.
    pub fn pixel_rect(&self, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (x, y) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = x * self.tile_size;
        let y0 = y * self.tile_size;
        (x0, y0, (x0 + self.tile_size).min(width), (y0 + self.tile_size).min(height))
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major `H × W × 3`.
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
    pub alpha_acc: Vec<f64>,
    pub blend_log: Vec<BlendRecord>,
    /// Pixel `i` owns `blend_log[log_offsets[i]..log_offsets[i + 1]]`.
    pub log_offsets: Vec<usize>,
    pub splats: Vec<Splat>,
    pub bins: TileBins,
    pub config: RenderConfig,
}

impl RenderOutput {
    pub fn records(&self, pixel: usize) -> &[BlendRecord] {
        &self.blend_log[self.log_offsets[pixel]..self.log_offsets[pixel + 1]]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

struct TileResult {
    color: Vec<f64>,
    depth: Vec<f64>,
    normal: Vec<f64>,
    alpha: Vec<f64>,
    counts: Vec<usize>,
    log: Vec<BlendRecord>,
}

fn render_tile(t: usize, splats: &[Splat], bins: &TileBins, camera: &Camera, config: &RenderConfig) -> TileResult {
    let (x0, y0, x1, y1) = bins.pixel_rect(t, camera.width, camera.height);
    let n = (x1 - x0) * (y1 - y0);
    let mut out = TileResult {
        color: Vec::with_capacity(3 * n),
        depth: Vec::with_capacity(n),
        normal: Vec::with_capacity(3 * n),
        alpha: Vec::with_capacity(n),
        counts: Vec::with_capacity(n),
        log: Vec::new(),
    };
    let list = &bins.lists[t];
    for py in y0..y1 {
        for px in x0..x1 {
            let (sx, sy) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut t_acc = 1.0;
            let mut c = [0.0; 3];
            let mut d = 0.0;
            let mut nrm = [0.0; 3];
            let start = out.log.len();
            for &id in list {
                let s = &splats[id as usize];
                let Some((u, v, z)) = s.intersect(sx, sy, config.near_clip) else { continue };
                let Some((alpha, _)) = s.alpha(u, v) else { continue };
                if alpha < config.alpha_cutoff {
                    continue;
                }
                let w = alpha * t_acc;
                for ch in 0..3 {
                    c[ch] += s.color[ch] * w;
                    nrm[ch] += s.normal[ch] * w;
                }
                d += z * w;
                out.log.push(BlendRecord { id, alpha, transmittance: t_acc, depth: z, u, v });
                t_acc *= 1.0 - alpha;
                if t_acc < config.transmittance_floor {
                    break;
                }
            }
            for ch in 0..3 {
                out.color.push(c[ch] + t_acc * config.background[ch]);
            }
            out.normal.extend_from_slice(&nrm);
            out.depth.push(d);
            out.alpha.push(1.0 - t_acc);
            out.counts.push(out.log.len() - start);
        }
    }
    out
}

/// Composites prepared splats; used directly by tests that tamper with splat data.
pub fn render_splats(splats: Vec<Splat>, camera: &Camera, config: &RenderConfig) -> RenderOutput {
    let bins = bin_splats(&splats, camera, config.tile_size);
    let (w, h) = (camera.width, camera.height);
    let tiles: Vec<TileResult> = (0..bins.lists.len())
        .into_par_iter()
        .map(|t| render_tile(t, &splats, &bins, camera, config))
        .collect();

    let mut color = vec![0.0; 3 * w * h];
    let mut depth = vec![0.0; w * h];
    let mut normal = vec![0.0; 3 * w * h];
    let mut alpha_acc = vec![0.0; w * h];
    let mut counts = vec![0usize; w * h];
    for (t, tr) in tiles.iter().enumerate() {
        let (x0, y0, x1, y1) = bins.pixel_rect(t, w, h);
        let mut k = 0;
        for py in y0..y1 {
            for px in x0..x1 {
                let i = py * w + px;
                color[3 * i..3 * i + 3].copy_from_slice(&tr.color[3 * k..3 * k + 3]);
                normal[3 * i..3 * i + 3].copy_from_slice(&tr.normal[3 * k..3 * k + 3]);
                depth[i] = tr.depth[k];
                alpha_acc[i] = tr.alpha[k];
                counts[i] = tr.counts[k];
                k += 1;
            }
        }
    }
    let mut log_offsets = Vec::with_capacity(w * h + 1);
    let mut acc = 0;
    log_offsets.push(0);
    for &c in &counts {
        acc += c;
        log_offsets.push(acc);
    }
    let mut blend_log = vec![BlendRecord { id: 0, alpha: 0.0, transmittance: 0.0, depth: 0.0, u: 0.0, v: 0.0 }; acc];
    for (t, tr) in tiles.iter().enumerate() {
        let (x0, y0, x1, y1) = bins.pixel_rect(t, w, h);
        let mut src = 0;
        for py in y0..y1 {
            for px in x0..x1 {
                let i = py * w + px;
                let n = counts[i];
                blend_log[log_offsets[i]..log_offsets[i] + n].copy_from_slice(&tr.log[src..src + n]);
                src += n;
            }
        }
    }
    RenderOutput {
        width: w,
        height: h,
        color,
        depth,
        normal,
        alpha_acc,
        blend_log,
        log_offsets,
        splats,
        bins,
        config: config.clone(),
    }
}

/// Renders `scene` from `camera` with the first `k_active` frequencies.
pub fn render(scene: &SceneModel, camera: &Camera, config: &RenderConfig, k_active: usize) -> Result<RenderOutput> {
    config.validate()?;
    camera.validate()?;
    scene.check_finite()?;
    let splats = prepare_splats(scene, camera, config, k_active);
    Ok(render_splats(splats, camera, config))
}

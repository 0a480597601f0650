//! Reverse-mode gradients of the compositing renderer.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Projection};
use crate::error::{Error, Result};
use crate::math::{self, Mat3};
use crate::primitive::{rotation_matrix_backward, ParamGroup, ParamLayout, Primitive};
use crate::raster::{render, RenderConfig, RenderOutput, Splat};
use crate::scene::SceneModel;
use crate::sh::sh_backward;
use crate::shape::{sigmoid, softplus};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteConfig {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for SteConfig {
    fn default() -> Self {
        Self { beta: 3.0, gamma: 0.5 }
    }
}

/// Which derivative the window contributes in backward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowGrad {
    /// Exact derivative of the forward window; no gradient outside the boundary.
    Hard,
    /// Smooth surrogate derivative everywhere inside the bounding circle.
    Ste(SteConfig),
}

impl Default for WindowGrad {
    fn default() -> Self {
        WindowGrad::Ste(SteConfig::default())
    }
}

/// Surrogate window and its derivative in `x`.
pub fn ste_window(x: f64, sigma: f64, cfg: SteConfig) -> (f64, f64) {
    let bx = cfg.beta * x;
    let s = sigmoid(bx);
    let ds = cfg.beta * s * (1.0 - s);
    let q = softplus(bx) / cfg.beta;
    let (qs, dqs) = if q >= 1.0 {
        (1.0, 0.0)
    } else if q <= 0.0 {
        (0.0, 0.0)
    } else {
        let qs = q.powf(sigma);
        (qs, sigma * qs / q * s)
    };
    (s * qs + cfg.gamma * s, ds * qs + s * dqs + cfg.gamma * ds)
}

/// Parameter-shaped gradient accumulator; one [`ParamLayout`] row per primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    pub k: usize,
    pub data: Vec<f64>,
    /// Per-primitive absolute screen-space center gradient of this view (NDC units).
    pub abs_grad: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self { k, data: vec![0.0; n * ParamLayout::new(k).len()], abs_grad: vec![0.0; n] }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.k)
    }

    pub fn len(&self) -> usize {
        self.abs_grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.abs_grad.is_empty()
    }

    pub fn primitive(&self, i: usize) -> &[f64] {
        let p = self.layout().len();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn primitive_mut(&mut self, i: usize) -> &mut [f64] {
        let p = self.layout().len();
        &mut self.data[i * p..(i + 1) * p]
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        for (a, b) in self.abs_grad.iter_mut().zip(&other.abs_grad) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
        self.abs_grad.iter_mut().for_each(|v| *v *= s);
    }

    fn check_finite(&self) -> Result<()> {
        let layout = self.layout();
        let p = layout.len();
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { id: i / p, param: layout.group_of(i % p).name() });
        }
        Ok(())
    }
}

/// Upstream gradients of a scalar loss with respect to everything a render produces.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrads {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Direct gradient on each blend record's weight `α T`.
    pub record_weight: Vec<f64>,
    /// Direct gradient on each blend record's depth.
    pub record_depth: Vec<f64>,
}

impl ImageGrads {
    pub fn zeros(output: &RenderOutput) -> Self {
        let n = output.pixel_count();
        let r = output.blend_log.len();
        Self {
            color: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            normal: vec![0.0; 3 * n],
            alpha: vec![0.0; n],
            record_weight: vec![0.0; r],
            record_depth: vec![0.0; r],
        }
    }

    pub fn from_color(output: &RenderOutput, color: Vec<f64>) -> Self {
        Self { color, ..Self::zeros(output) }
    }

    pub fn add_assign(&mut self, other: &ImageGrads) {
        let pairs = [
            (&mut self.color, &other.color),
            (&mut self.depth, &other.depth),
            (&mut self.normal, &other.normal),
            (&mut self.alpha, &other.alpha),
            (&mut self.record_weight, &other.record_weight),
            (&mut self.record_depth, &other.record_depth),
        ];
        for (a, b) in pairs {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

// slot layout of the per-view accumulator
const S_COLOR: usize = 0;
const S_NORMAL: usize = 3;
const S_M0: usize = 6;
const S_M1: usize = 9;
const S_M3: usize = 12;
const S_DEPTH: usize = 15;
const S_OPACITY: usize = 18;
const S_SIGMA: usize = 19;
const S_ABS: usize = 20;
const S_RBAR: usize = 22;

fn slot_len(k: usize) -> usize {
    S_RBAR + 2 * k
}

enum Event {
    Record { rec: usize, slot: usize },
    Near { slot: usize, u: f64, v: f64, z: f64, t: f64 },
}

struct Ctx<'a> {
    splats: &'a [Splat],
    mode: WindowGrad,
    k: usize,
    sl: usize,
}

impl Ctx<'_> {
    /// Chains `dL/dα` (and `dL/dz`) of one event into the slot accumulator.
    #[allow(clippy::too_many_arguments)]
    fn chain(&self, acc: &mut [f64], s: &Splat, px: f64, py: f64, u: f64, v: f64, ga: f64, gz: f64, full: bool) {
        let Some((_, aux)) = s.alpha(u, v) else { return };
        let x = aux.x;
        let o = s.opacity;
        let w_hard = if x > 0.0 { x.powf(s.sigma) } else { 0.0 };
        if full {
            acc[S_OPACITY] += ga * w_hard;
            if x > 0.0 && x < 1.0 {
                acc[S_SIGMA] += ga * o * w_hard * x.ln();
            }
        }
        let dadx = match self.mode {
            WindowGrad::Hard => {
                if x > 0.0 {
                    o * s.sigma * x.powf(s.sigma - 1.0)
                } else {
                    0.0
                }
            }
            WindowGrad::Ste(cfg) => o * ste_window(x, s.sigma, cfg).1,
        };
        let gx = ga * dadx;
        let (mut gu, mut gv) = (0.0, 0.0);
        if gx != 0.0 && aux.rho > 0.0 && aux.r > 0.0 {
            let (r, rho) = (aux.r, aux.rho);
            let gr = gx * rho / (r * r);
            let grho = -gx / r;
            let w = Complex64::new(aux.cos_theta, aux.sin_theta);
            let mut wk = Complex64::new(1.0, 0.0);
            let mut z0 = Complex64::new(0.0, 0.0);
            let mut s1 = Complex64::new(0.0, 0.0);
            for (kk, c) in s.coeffs.iter().enumerate() {
                let t = c * wk;
                z0 += t;
                s1 += t * kk as f64;
                wk *= w;
            }
            let zc = z0.conj();
            let mut wk = Complex64::new(1.0, 0.0);
            for (kk, (c, unit)) in s.coeffs.iter().zip(&s.phase_units).enumerate() {
                let basis = unit * wk;
                acc[S_RBAR + kk] += gr * (zc * basis).re / r;
                acc[S_RBAR + self.k + kk] += gr * -(zc * c * wk).im / r;
                wk *= w;
            }
            if full {
                let gtheta = gr * -(zc * s1).im / r;
                gu = grho * u / rho - gtheta * v / (rho * rho);
                gv = grho * v / rho + gtheta * u / (rho * rho);
            }
        }
        if !full {
            return;
        }
        gu += gz * s.depth_row[0];
        gv += gz * s.depth_row[1];
        if gu == 0.0 && gv == 0.0 && gz == 0.0 {
            return;
        }
        let sv = [u, v, 1.0];
        for c in 0..3 {
            acc[S_DEPTH + c] += gz * sv[c];
        }
        let [m0, m1, m3] = &s.m;
        let e = [px * m3[0] - m0[0], px * m3[1] - m0[1]];
        let g = [py * m3[0] - m1[0], py * m3[1] - m1[1]];
        let det = e[0] * g[1] - e[1] * g[0];
        let le = -(g[1] * gu - g[0] * gv) / det;
        let lg = -(-e[1] * gu + e[0] * gv) / det;
        for c in 0..3 {
            acc[S_M0 + c] -= le * sv[c];
            acc[S_M1 + c] -= lg * sv[c];
            acc[S_M3 + c] += (px * le + py * lg) * sv[c];
        }
        acc[S_ABS] += le.abs();
        acc[S_ABS + 1] += lg.abs();
    }
}

fn backward_tile(t: usize, ctx: &Ctx, output: &RenderOutput, up: &ImageGrads) -> Vec<f64> {
    let bins = &output.bins;
    let list = &bins.lists[t];
    let mut acc = vec![0.0; list.len() * ctx.sl];
    if list.is_empty() {
        return acc;
    }
    let cfg = &output.config;
    let (x0, y0, x1, y1) = bins.pixel_rect(t, output.width, output.height);
    let ste = matches!(ctx.mode, WindowGrad::Ste(_));
    let mut events: Vec<Event> = Vec::new();
    for py in y0..y1 {
        for px in x0..x1 {
            let i = py * output.width + px;
            let (sx, sy) = (px as f64 + 0.5, py as f64 + 0.5);
            let off = output.log_offsets[i];
            let recs = output.records(i);
            let dc = [up.color[3 * i], up.color[3 * i + 1], up.color[3 * i + 2]];
            let dn = [up.normal[3 * i], up.normal[3 * i + 1], up.normal[3 * i + 2]];
            let dd = up.depth[i];
            let da = up.alpha[i];
            let dw_any = recs.iter().enumerate().any(|(r, _)| up.record_weight[off + r] != 0.0 || up.record_depth[off + r] != 0.0);
            if dc == [0.0; 3] && dn == [0.0; 3] && dd == 0.0 && da == 0.0 && !dw_any {
                continue;
            }

            events.clear();
            let mut next = 0;
            let mut tcur = 1.0;
            for (j, &id) in list.iter().enumerate() {
                if next < recs.len() && recs[next].id == id {
                    events.push(Event::Record { rec: next, slot: j });
                    tcur = recs[next].transmittance * (1.0 - recs[next].alpha);
                    next += 1;
                    if tcur < cfg.transmittance_floor {
                        break;
                    }
                    continue;
                }
                if !ste {
                    if next == recs.len() {
                        break;
                    }
                    continue;
                }
                let s = &ctx.splats[id as usize];
                let Some((u, v, z)) = s.intersect(sx, sy, cfg.near_clip) else { continue };
                let Some((_, aux)) = s.alpha(u, v) else { continue };
                if aux.rho == 0.0 || aux.r <= 0.0 {
                    continue;
                }
                events.push(Event::Near { slot: j, u, v, z, t: tcur });
            }

            let bg = cfg.background;
            let mut q = dc[0] * bg[0] + dc[1] * bg[1] + dc[2] * bg[2] - da;
            for ev in events.iter().rev() {
                match *ev {
                    Event::Record { rec, slot } => {
                        let r = &recs[rec];
                        let s = &ctx.splats[r.id as usize];
                        let g = math::dot(dc, s.color) + dd * r.depth + math::dot(dn, s.normal) + up.record_weight[off + rec];
                        let ga = r.transmittance * (g - q);
                        let w = r.weight();
                        let a = &mut acc[slot * ctx.sl..(slot + 1) * ctx.sl];
                        for c in 0..3 {
                            a[S_COLOR + c] += w * dc[c];
                            a[S_NORMAL + c] += w * dn[c];
                        }
                        let gz = w * dd + up.record_depth[off + rec];
                        q = r.alpha * g + (1.0 - r.alpha) * q;
                        ctx.chain(a, s, sx, sy, r.u, r.v, ga, gz, true);
                    }
                    Event::Near { slot, u, v, z, t } => {
                        let s = &ctx.splats[list[slot] as usize];
                        let g = math::dot(dc, s.color) + dd * z + math::dot(dn, s.normal);
                        let ga = t * (g - q);
                        let a = &mut acc[slot * ctx.sl..(slot + 1) * ctx.sl];
                        ctx.chain(a, s, sx, sy, u, v, ga, 0.0, false);
                    }
                }
            }
        }
    }
    acc
}

/// Pulls accumulated per-view quantities back to the raw parameters of `p`.
fn finalize(p: &Primitive, splat: &Splat, camera: &Camera, degree: usize, acc: &[f64], k: usize, out: &mut [f64]) -> f64 {
    let layout = ParamLayout::new(k);
    let o = p.opacity();
    out[ParamLayout::OPACITY] += acc[S_OPACITY] * o * (1.0 - o);
    out[layout.sharpness()] += acc[S_SIGMA] * sigmoid(p.shape.sharpness_raw);

    // color through SH
    let gcol = [acc[S_COLOR], acc[S_COLOR + 1], acc[S_COLOR + 2]];
    if gcol != [0.0; 3] {
        let campos = camera.position();
        let d = math::sub(p.center, campos);
        let dist = math::norm(d);
        let dir = math::scale(d, 1.0 / dist);
        let view_dir = match camera.projection {
            Projection::Perspective => dir,
            Projection::Orthographic => camera.view_direction(p.center),
        };
        let gdir = sh_backward(&p.sh, view_dir, degree, gcol, &mut out[ParamLayout::SH..ParamLayout::SH + 48]);
        if camera.projection == Projection::Perspective && gdir != [0.0; 3] {
            let proj = math::dot(dir, gdir);
            for c in 0..3 {
                out[c] += (gdir[c] - dir[c] * proj) / dist;
            }
        }
    }

    // amplitudes through squared-l1 normalization, phases directly
    let kk = splat.coeffs.len();
    let s_norm = p.shape.norm_denominator();
    if s_norm > 0.0 {
        let rbar: Vec<f64> = p.shape.amplitudes_raw.iter().map(|a| a * a / s_norm).collect();
        let gsum: f64 = if p.shape.is_truncated() {
            0.0
        } else {
            (0..kk).map(|j| acc[S_RBAR + j] * rbar[j]).sum()
        };
        for j in 0..k {
            let gj = if j < kk { acc[S_RBAR + j] } else { 0.0 };
            out[layout.amplitudes() + j] += 2.0 * p.shape.amplitudes_raw[j] / s_norm * (gj - gsum);
        }
    }
    for j in 0..kk {
        out[layout.phases() + j] += acc[S_RBAR + k + j];
    }

    // screen rows -> camera-space surfel
    let gm0 = [acc[S_M0], acc[S_M0 + 1], acc[S_M0 + 2]];
    let gm1 = [acc[S_M1], acc[S_M1 + 1], acc[S_M1 + 2]];
    let gm3 = [acc[S_M3], acc[S_M3 + 1], acc[S_M3 + 2]];
    let gdr = [acc[S_DEPTH], acc[S_DEPTH + 1], acc[S_DEPTH + 2]];
    let ga: Mat3 = match camera.projection {
        Projection::Perspective => [
            math::scale(gm0, camera.fx),
            math::scale(gm1, camera.fy),
            [0, 1, 2].map(|c| camera.cx * gm0[c] + camera.cy * gm1[c] + gm3[c] + gdr[c]),
        ],
        Projection::Orthographic => [math::scale(gm0, camera.fx), math::scale(gm1, camera.fy), gdr],
    };
    let g_a = math::column(&ga, 0);
    let g_b = math::column(&ga, 1);
    let g_c = math::column(&ga, 2);
    let rc = camera.rotation();
    let gp = math::mat_t_vec(&rc, g_c);
    for c in 0..3 {
        out[c] += gp[c];
    }
    let a = math::column(&splat.a, 0);
    let b = math::column(&splat.a, 1);
    out[ParamLayout::RADIUS] += math::dot(a, g_a) + math::dot(b, g_b);
    let radius = p.shape.radius();
    let g_tu = math::scale(math::mat_t_vec(&rc, g_a), radius);
    let g_tv = math::scale(math::mat_t_vec(&rc, g_b), radius);
    let g_tw = math::scale(math::mat_t_vec(&rc, [acc[S_NORMAL], acc[S_NORMAL + 1], acc[S_NORMAL + 2]]), splat.normal_sign);
    let grot = [
        [g_tu[0], g_tv[0], g_tw[0]],
        [g_tu[1], g_tv[1], g_tw[1]],
        [g_tu[2], g_tv[2], g_tw[2]],
    ];
    if grot != [[0.0; 3]; 3] {
        let gq = rotation_matrix_backward(p.rotation, &grot);
        for c in 0..4 {
            out[ParamLayout::ROTATION + c] += gq[c];
        }
    }

    let depth_scale = match camera.projection {
        Projection::Perspective => splat.center_depth,
        Projection::Orthographic => 1.0,
    };
    let ax = acc[S_ABS] * depth_scale * 0.5 * camera.width as f64;
    let ay = acc[S_ABS + 1] * depth_scale * 0.5 * camera.height as f64;
    ax.hypot(ay)
}

/// Gradient of a loss with respect to every primitive parameter, given the
/// loss's gradients on the render outputs.
pub fn backward(scene: &SceneModel, camera: &Camera, output: &RenderOutput, upstream: &ImageGrads, mode: WindowGrad) -> Result<GradBuffer> {
    let n = scene.len();
    if output.splats.len() != n || output.width != camera.width || output.height != camera.height {
        return Err(Error::Contract("render output does not belong to this scene and camera".into()));
    }
    if upstream.color.len() != 3 * output.pixel_count() || upstream.record_weight.len() != output.blend_log.len() {
        return Err(Error::Contract("upstream gradients do not match the render output".into()));
    }
    let k = scene.k;
    let sl = slot_len(k);
    let ctx = Ctx { splats: &output.splats, mode, k, sl };
    let tiles: Vec<Vec<f64>> = (0..output.bins.lists.len())
        .into_par_iter()
        .map(|t| backward_tile(t, &ctx, output, upstream))
        .collect();

    let mut merged = vec![0.0; n * sl];
    let mut touched = vec![false; n];
    for (t, acc) in tiles.iter().enumerate() {
        for (j, &id) in output.bins.lists[t].iter().enumerate() {
            let id = id as usize;
            touched[id] = true;
            for (m, a) in merged[id * sl..(id + 1) * sl].iter_mut().zip(&acc[j * sl..(j + 1) * sl]) {
                *m += a;
            }
        }
    }

    let mut out = GradBuffer::zeros(n, k);
    let p_len = ParamLayout::new(k).len();
    for id in 0..n {
        if !touched[id] {
            continue;
        }
        let row = &mut out.data[id * p_len..(id + 1) * p_len];
        out.abs_grad[id] = finalize(
            &scene.primitives[id],
            &output.splats[id],
            camera,
            scene.sh_degree_active,
            &merged[id * sl..(id + 1) * sl],
            k,
            row,
        );
    }
    out.check_finite()?;
    Ok(out)
}

/// Convenience wrapper for a loss that only reads the color image.
pub fn backward_color(scene: &SceneModel, camera: &Camera, output: &RenderOutput, dl_dimage: &[f64], mode: WindowGrad) -> Result<GradBuffer> {
    backward(scene, camera, output, &ImageGrads::from_color(output, dl_dimage.to_vec()), mode)
}

/// Per-pixel mask of pixels whose loss is safe to difference: no boundary,
/// alpha-cutoff or early-termination discontinuity within one pixel.
pub fn boundary_mask(output: &RenderOutput) -> Vec<bool> {
    let (w, h) = (output.width, output.height);
    let cutoff = output.config.alpha_cutoff;
    let floor = output.config.transmittance_floor;
    let ids = |i: usize| output.records(i).iter().map(|r| r.id).collect::<Vec<_>>();
    let sets: Vec<Vec<u32>> = (0..w * h).map(ids).collect();
    let mut keep = vec![true; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let recs = output.records(i);
            let t_final = 1.0 - output.alpha_acc[i];
            let risky = recs.iter().any(|r| r.alpha < 2.0 * cutoff || r.u.hypot(r.v) < 1e-3)
                || (t_final < 4.0 * floor && t_final > floor / 4.0);
            if risky {
                keep[i] = false;
                continue;
            }
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    let mut a = sets[i].clone();
                    let mut b = sets[j].clone();
                    a.sort_unstable();
                    b.sort_unstable();
                    if a != b {
                        keep[i] = false;
                        break 'nb;
                    }
                }
            }
        }
    }
    keep
}

/// Loss callback: `(render, per-pixel weights) -> (value, dL/dcolor)`.
pub type ColorLoss<'a> = dyn Fn(&RenderOutput, &[f64]) -> (f64, Vec<f64>) + Sync + 'a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub coordinates: usize,
    pub max_abs_err: f64,
    pub max_abs_fd: f64,
    /// `max |analytic − fd| / max |fd|` over the group.
    pub rel_err: f64,
    pub sign_agree: usize,
    pub sign_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub eps: f64,
    pub masked_pixels: usize,
    pub groups: Vec<GroupReport>,
}

impl FdReport {
    pub fn group(&self, g: ParamGroup) -> Option<&GroupReport> {
        self.groups.iter().find(|r| r.group == g.name())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("finite-difference check (eps = {:e}, {} pixels masked)\n", self.eps, self.masked_pixels);
        for g in &self.groups {
            s += &format!(
                "{:<14} n={:<5} rel_err={:.3e} max_fd={:.3e} sign={}/{}\n",
                g.group, g.coordinates, g.rel_err, g.max_abs_fd, g.sign_agree, g.sign_total
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,coordinates,rel_err,max_abs_err,max_abs_fd,sign_agree,sign_total\n");
        for g in &self.groups {
            s += &format!(
                "{},{},{:e},{:e},{:e},{},{}\n",
                g.group, g.coordinates, g.rel_err, g.max_abs_err, g.max_abs_fd, g.sign_agree, g.sign_total
            );
        }
        s
    }
}

/// Compares analytic gradients against central differences of the forward loss.
///
/// With `mask_boundary`, pixels flagged by [`boundary_mask`] on the unperturbed
/// render get zero weight in both the analytic and the differenced loss.
pub fn finite_diff_check(
    scene: &SceneModel,
    camera: &Camera,
    config: &RenderConfig,
    loss_fn: &ColorLoss,
    eps: f64,
    mask_boundary: bool,
    mode: WindowGrad,
) -> Result<FdReport> {
    let k_active = scene.k_active;
    let base = render(scene, camera, config, k_active)?;
    let n_pix = base.pixel_count();
    let weights: Vec<f64> = if mask_boundary {
        boundary_mask(&base).into_iter().map(|m| if m { 1.0 } else { 0.0 }).collect()
    } else {
        vec![1.0; n_pix]
    };
    let masked_pixels = weights.iter().filter(|&&w| w == 0.0).count();
    let (_, dl) = loss_fn(&base, &weights);
    let analytic = backward_color(scene, camera, &base, &dl, mode)?;

    let layout = ParamLayout::new(scene.k);
    let coords: Vec<(usize, usize)> = (0..scene.len())
        .flat_map(|i| (0..layout.len()).map(move |j| (i, j)))
        .filter(|&(_, j)| {
            let g = layout.group_of(j);
            let kk = match g {
                ParamGroup::Amplitude => j - layout.amplitudes(),
                ParamGroup::Phase => j - layout.phases(),
                _ => 0,
            };
            let band_ok = match g {
                ParamGroup::ShRest => (j - ParamLayout::SH) / 3 < crate::sh::basis_count(scene.sh_degree_active),
                _ => true,
            };
            kk < k_active && band_ok
        })
        .collect();

    let eval = |i: usize, j: usize, delta: f64| -> Result<f64> {
        let mut s = scene.clone();
        let mut flat = s.primitives[i].to_flat();
        flat[j] += delta;
        s.primitives[i] = Primitive::from_flat(&flat, scene.k);
        let out = render(&s, camera, config, k_active)?;
        Ok(loss_fn(&out, &weights).0)
    };
    let fds: Vec<Result<(usize, usize, f64)>> = coords
        .par_iter()
        .map(|&(i, j)| Ok((i, j, (eval(i, j, eps)? - eval(i, j, -eps)?) / (2.0 * eps))))
        .collect();

    let mut groups = Vec::new();
    for g in ParamGroup::ALL {
        let mut rep = GroupReport {
            group: g.name().to_string(),
            coordinates: 0,
            max_abs_err: 0.0,
            max_abs_fd: 0.0,
            rel_err: 0.0,
            sign_agree: 0,
            sign_total: 0,
        };
        let mut pairs = Vec::new();
        for r in &fds {
            let (i, j, fd) = *r.as_ref().map_err(|e| Error::Contract(e.to_string()))?;
            if layout.group_of(j) != g {
                continue;
            }
            let an = analytic.primitive(i)[j];
            pairs.push((an, fd));
        }
        if pairs.is_empty() {
            continue;
        }
        rep.coordinates = pairs.len();
        rep.max_abs_fd = pairs.iter().fold(0.0, |m, p| m.max(p.1.abs()));
        rep.max_abs_err = pairs.iter().fold(0.0, |m, p| m.max((p.0 - p.1).abs()));
        rep.rel_err = if rep.max_abs_fd > 0.0 { rep.max_abs_err / rep.max_abs_fd } else { rep.max_abs_err };
        let floor = 1e-3 * rep.max_abs_fd;
        for (an, fd) in pairs {
            if fd.abs() > floor {
                rep.sign_total += 1;
                if an.signum() == fd.signum() {
                    rep.sign_agree += 1;
                }
            }
        }
        groups.push(rep);
    }
    Ok(FdReport { eps, masked_pixels, groups })
}

/// Random scene of `n` K=6 primitives in front of a `size`×`size` pinhole camera,
/// with a target rendered from a copy whose every parameter is jittered by ±0.05.
pub fn gradcheck_fixture(n: usize, size: usize, seed: u64) -> Result<(SceneModel, Camera, Vec<f64>)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut prims = Vec::with_capacity(n);
    for _ in 0..n {
        let mut sh = [[0.0; 3]; crate::primitive::SH_BASIS];
        for c in sh.iter_mut().flatten() {
            *c = rng.random_range(-0.3..0.3);
        }
        sh[0] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let amps = (0..6).map(|k| if k == 0 { 1.0 } else { rng.random_range(-0.5..0.5) }).collect();
        let phases = (0..6).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let sigma: f64 = rng.random_range(0.8..2.0);
        let mut p = Primitive {
            center: [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(3.0..5.0)],
            rotation: [1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-1.0..1.0)],
            opacity_raw: rng.random_range(-1.0..1.0),
            sh,
            shape: crate::shape::FourierShape::new(
                rng.random_range(0.3f64..0.6).ln(),
                amps,
                phases,
                crate::shape::inverse_softplus(sigma - crate::shape::SIGMA_EPS),
            ),
        };
        p.normalize_rotation();
        prims.push(p);
    }
    let mut scene = SceneModel::from_primitives(prims, 6, n);
    scene.sh_degree_active = 3;
    let cam = Camera::look_at([0.0; 3], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0], 0.7, size, size);
    let mut gt = scene.clone();
    for p in &mut gt.primitives {
        let mut f = p.to_flat();
        for v in &mut f {
            *v += rng.random_range(-0.05..0.05);
        }
        *p = Primitive::from_flat(&f, 6);
        p.normalize_rotation();
    }
    let target = render(&gt, &cam, &RenderConfig::default(), 6)?.color;
    Ok((scene, cam, target))
}

/// `0.5 · mean_w |C − target|²` over weighted pixels and channels.
pub fn weighted_mse(target: &[f64]) -> impl Fn(&RenderOutput, &[f64]) -> (f64, Vec<f64>) + Sync + '_ {
    move |out: &RenderOutput, w: &[f64]| {
        let norm = 3.0 * w.iter().sum::<f64>().max(1.0);
        let mut grad = vec![0.0; out.color.len()];
        let mut v = 0.0;
        for (i, wi) in w.iter().enumerate() {
            for c in 0..3 {
                let d = out.color[3 * i + c] - target[3 * i + c];
                v += 0.5 * wi * d * d;
                grad[3 * i + c] = wi * d / norm;
            }
        }
        (v / norm, grad)
    }
}

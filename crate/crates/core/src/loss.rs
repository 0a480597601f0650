//! Training losses and image metrics.
//!
//! Images are row-major `H × W × 3` slices of `f64`.

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Projection};
use crate::error::{Error, Result};
use crate::grad::ImageGrads;
use crate::math;
use crate::raster::RenderOutput;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_dssim: f64,
    pub lambda_dist: f64,
    pub lambda_normal: f64,
    pub regularizer_warmup_iters: u64,
}

impl LossConfig {
    pub fn outdoor() -> Self {
        Self { lambda_dssim: 0.20, lambda_dist: 0.0, lambda_normal: 0.05, regularizer_warmup_iters: 3000 }
    }

    pub fn indoor() -> Self {
        Self { lambda_dssim: 0.25, lambda_dist: 1.0, lambda_normal: 0.0001, regularizer_warmup_iters: 3000 }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.lambda_dssim, self.lambda_dist, self.lambda_normal].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lambda_dssim > 1.0 {
            return Err(Error::Config("lambda_dssim must not exceed 1".into()));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::outdoor()
    }
}

fn check_dims(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<()> {
    if a.len() != b.len() || a.len() != 3 * w * h {
        return Err(Error::Dimension(format!("images of {} and {} values for {w}x{h}", a.len(), b.len())));
    }
    Ok(())
}

fn gaussian_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "same" Gaussian blur of a planar image with zero padding.
/// The kernel is symmetric, so this is also its own adjoint.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = x as i64 + t as i64 - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * row[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = y as i64 + t as i64 - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel(img: &[f64], c: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM over pixels and channels, optionally with its gradient in `pred`.
fn ssim_impl(pred: &[f64], target: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Vec<f64>) {
    let k = gaussian_kernel();
    let n = w * h;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; 3 * n] } else { Vec::new() };
    for c in 0..3 {
        let x = channel(pred, c);
        let y = channel(target, c);
        let mx = blur(&x, w, h, &k);
        let my = blur(&y, w, h, &k);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let sxx = blur(&xx, w, h, &k);
        let syy = blur(&yy, w, h, &k);
        let sxy = blur(&xy, w, h, &k);
        let mut d_mu = vec![0.0; n];
        let mut d_sxx = vec![0.0; n];
        let mut d_sxy = vec![0.0; n];
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * cxy + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = vx + vy + C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                let ds_dux = 2.0 * uy * a2 / (b1 * b2) - s * 2.0 * ux / b1;
                let ds_dvx = -s / b2;
                let ds_dcxy = 2.0 * a1 / (b1 * b2);
                d_mu[i] = ds_dux - 2.0 * ux * ds_dvx - uy * ds_dcxy;
                d_sxx[i] = ds_dvx;
                d_sxy[i] = ds_dcxy;
            }
        }
        if want_grad {
            let g_mu = blur(&d_mu, w, h, &k);
            let g_sxx = blur(&d_sxx, w, h, &k);
            let g_sxy = blur(&d_sxy, w, h, &k);
            let scale = 1.0 / (3 * n) as f64;
            for i in 0..n {
                grad[3 * i + c] = scale * (g_mu[i] + 2.0 * x[i] * g_sxx[i] + y[i] * g_sxy[i]);
            }
        }
    }
    (total / (3 * n) as f64, grad)
}

pub fn ssim(pred: &[f64], target: &[f64], width: usize, height: usize) -> Result<f64> {
    check_dims(pred, target, width, height)?;
    Ok(ssim_impl(pred, target, width, height, false).0)
}

/// `(1 − λ)·mean|pred − target| + λ·(1 − SSIM)/2` and its gradient in `pred`.
pub fn photometric_loss(pred: &[f64], target: &[f64], width: usize, height: usize, lambda_dssim: f64) -> Result<(f64, Vec<f64>)> {
    check_dims(pred, target, width, height)?;
    let m = pred.len() as f64;
    let mut l1 = 0.0;
    let mut grad: Vec<f64> = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            l1 += d.abs();
            (1.0 - lambda_dssim) * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 } / m
        })
        .collect();
    let mut value = (1.0 - lambda_dssim) * l1 / m;
    if lambda_dssim > 0.0 {
        let (s, gs) = ssim_impl(pred, target, width, height, true);
        value += lambda_dssim * (1.0 - s) / 2.0;
        for (g, d) in grad.iter_mut().zip(gs) {
            *g -= 0.5 * lambda_dssim * d;
        }
    }
    Ok((value, grad))
}

/// Per-pixel `Σ_ij ω_i ω_j |z_i − z_j|` averaged over pixels, with gradients on
/// each record's weight and depth.
pub fn depth_distortion_loss(output: &RenderOutput) -> (f64, Vec<f64>, Vec<f64>) {
    let n = output.pixel_count().max(1) as f64;
    let mut d_w = vec![0.0; output.blend_log.len()];
    let mut d_z = vec![0.0; output.blend_log.len()];
    let mut total = 0.0;
    for p in 0..output.pixel_count() {
        let off = output.log_offsets[p];
        let recs = output.records(p);
        for (i, a) in recs.iter().enumerate() {
            let wi = a.weight();
            for (j, b) in recs.iter().enumerate() {
                if i == j {
                    continue;
                }
                let wj = b.weight();
                let dz = a.depth - b.depth;
                total += wi * wj * dz.abs();
                // each unordered pair appears twice
                d_w[off + i] += 2.0 * wj * dz.abs() / n;
                d_z[off + i] += 2.0 * wi * wj * dz.signum() * if dz == 0.0 { 0.0 } else { 1.0 } / n;
            }
        }
    }
    (total / n, d_w, d_z)
}

/// Surface normals from central differences of the rendered depth, facing the
/// camera. `None` on the border and wherever the depth is undefined.
pub fn depth_normals(output: &RenderOutput, camera: &Camera) -> Vec<Option<[f64; 3]>> {
    let (w, h) = (output.width, output.height);
    let point = |x: usize, y: usize| -> Option<[f64; 3]> {
        let i = y * w + x;
        let a = output.alpha_acc[i];
        if a < 1e-3 {
            return None;
        }
        Some(camera.back_project(x as f64 + 0.5, y as f64 + 0.5, output.depth[i] / a))
    };
    let mut out = vec![None; w * h];
    if w < 3 || h < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let (Some(l), Some(r), Some(u), Some(d), Some(c)) =
                (point(x - 1, y), point(x + 1, y), point(x, y - 1), point(x, y + 1), point(x, y))
            else {
                continue;
            };
            let n = math::cross(math::sub(r, l), math::sub(d, u));
            let len = math::norm(n);
            if !(len > 0.0) {
                continue;
            }
            let mut n = math::scale(n, 1.0 / len);
            let toward = match camera.projection {
                Projection::Perspective => c,
                Projection::Orthographic => [0.0, 0.0, 1.0],
            };
            if math::dot(n, toward) > 0.0 {
                n = math::scale(n, -1.0);
            }
            out[y * w + x] = Some(n);
        }
    }
    out
}

/// Per-pixel `Σ_i ω_i (1 − n_iᵀ N)` averaged over pixels, with the depth normal
/// `N` held fixed. Returns gradients on the alpha and normal buffers.
pub fn normal_consistency_loss(output: &RenderOutput, camera: &Camera) -> (f64, Vec<f64>, Vec<f64>) {
    let np = output.pixel_count();
    let n = np.max(1) as f64;
    let normals = depth_normals(output, camera);
    let mut d_alpha = vec![0.0; np];
    let mut d_normal = vec![0.0; 3 * np];
    let mut total = 0.0;
    for (i, dn) in normals.iter().enumerate() {
        let Some(nd) = dn else { continue };
        let nb = [output.normal[3 * i], output.normal[3 * i + 1], output.normal[3 * i + 2]];
        total += output.alpha_acc[i] - math::dot(nb, *nd);
        d_alpha[i] = 1.0 / n;
        for c in 0..3 {
            d_normal[3 * i + c] = -nd[c] / n;
        }
    }
    (total / n, d_alpha, d_normal)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub photometric: f64,
    pub distortion: f64,
    pub normal: f64,
    pub grads: ImageGrads,
}

/// `L_photo + λ_dist L_dist + λ_normal L_normal`; the regularizers are off until
/// `regularizer_warmup_iters`.
pub fn total_loss(output: &RenderOutput, camera: &Camera, target: &[f64], cfg: &LossConfig, iteration: u64) -> Result<LossTerms> {
    let (photometric, g_color) = photometric_loss(&output.color, target, output.width, output.height, cfg.lambda_dssim)?;
    let mut grads = ImageGrads::from_color(output, g_color);
    let active = iteration >= cfg.regularizer_warmup_iters;
    let mut distortion = 0.0;
    let mut normal = 0.0;
    if active && cfg.lambda_dist > 0.0 {
        let (v, dw, dz) = depth_distortion_loss(output);
        distortion = v;
        for (g, d) in grads.record_weight.iter_mut().zip(dw) {
            *g += cfg.lambda_dist * d;
        }
        for (g, d) in grads.record_depth.iter_mut().zip(dz) {
            *g += cfg.lambda_dist * d;
        }
    }
    if active && cfg.lambda_normal > 0.0 {
        let (v, da, dn) = normal_consistency_loss(output, camera);
        normal = v;
        for (g, d) in grads.alpha.iter_mut().zip(da) {
            *g += cfg.lambda_normal * d;
        }
        for (g, d) in grads.normal.iter_mut().zip(dn) {
            *g += cfg.lambda_normal * d;
        }
    }
    let (ld, ln) = if active { (cfg.lambda_dist, cfg.lambda_normal) } else { (0.0, 0.0) };
    Ok(LossTerms { total: photometric + ld * distortion + ln * normal, photometric, distortion, normal, grads })
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at 100 dB.
pub fn psnr(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Dimension(format!("images of {} and {} values", pred.len(), target.len())));
    }
    let mse = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    if mse <= 1e-10 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitive::{Primitive, SH_BASIS};
    use crate::raster::{render, BlendRecord, RenderConfig};
    use crate::scene::SceneModel;
    use crate::shape::FourierShape;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3 * w * h).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn photometric_examples() {
        let a = random_image(8, 8, 1);
        let (v, g) = photometric_loss(&a, &a, 8, 8, 0.2).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x.abs() < 1e-15));
        let zeros = vec![0.0; 3 * 64];
        let ones = vec![1.0; 3 * 64];
        assert!((photometric_loss(&zeros, &ones, 8, 8, 0.0).unwrap().0 - 1.0).abs() < 1e-15);
        assert!(photometric_loss(&zeros, &ones[..10], 8, 8, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = random_image(20, 14, 2);
        let b = random_image(20, 14, 3);
        assert_eq!(ssim(&a, &a, 20, 14).unwrap(), 1.0);
        let ab = ssim(&a, &b, 20, 14).unwrap();
        let ba = ssim(&b, &a, 20, 14).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn photometric_gradient_matches_differences() {
        let (w, h) = (16, 16);
        let a = random_image(w, h, 4);
        let t = random_image(w, h, 5);
        let (_, g) = photometric_loss(&a, &t, w, h, 0.2).unwrap();
        let mut worst: f64 = 0.0;
        for i in (0..a.len()).step_by(7) {
            let eps = 1e-6;
            let mut p = a.clone();
            let mut m = a.clone();
            p[i] += eps;
            m[i] -= eps;
            let fd = (photometric_loss(&p, &t, w, h, 0.2).unwrap().0 - photometric_loss(&m, &t, w, h, 0.2).unwrap().0) / (2.0 * eps);
            worst = worst.max((fd - g[i]).abs());
        }
        assert!(worst < 1e-5, "max abs err {worst}");
    }

    #[test]
    fn psnr_examples() {
        let a = vec![0.3; 30];
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert!((psnr(&vec![0.0; 30], &vec![1.0; 30]).unwrap()).abs() < 1e-12);
        assert!((psnr(&vec![0.0; 30], &vec![0.1; 30]).unwrap() - 20.0).abs() < 1e-9);
    }

    fn fake_output(records: Vec<BlendRecord>) -> RenderOutput {
        let cam = Camera::new(10.0, 10.0, 0.5, 0.5, 1, 1, Matrix4::identity());
        let mut out = render(&SceneModel::new(1, 1), &cam, &RenderConfig::default(), 1).unwrap();
        out.log_offsets = vec![0, records.len()];
        out.blend_log = records;
        out
    }

    fn rec(alpha: f64, t: f64, z: f64) -> BlendRecord {
        BlendRecord { id: 0, alpha, transmittance: t, depth: z, u: 0.0, v: 0.0 }
    }

    #[test]
    fn distortion_examples() {
        assert_eq!(depth_distortion_loss(&fake_output(vec![rec(0.7, 1.0, 2.0)])).0, 0.0);
        let two = fake_output(vec![rec(0.5, 1.0, 1.0), rec(1.0, 0.5, 3.0)]);
        assert!((depth_distortion_loss(&two).0 - 1.0).abs() < 1e-12);
        let same = fake_output(vec![rec(0.5, 1.0, 2.0), rec(1.0, 0.5, 2.0)]);
        assert_eq!(depth_distortion_loss(&same).0, 0.0);
    }

    #[test]
    fn distortion_gradient_matches_differences() {
        let base = vec![rec(0.3, 1.0, 1.0), rec(0.6, 0.7, 2.5), rec(0.2, 0.28, 1.7)];
        let (_, dw, dz) = depth_distortion_loss(&fake_output(base.clone()));
        let value = |recs: Vec<BlendRecord>| depth_distortion_loss(&fake_output(recs)).0;
        for i in 0..3 {
            let eps = 1e-6;
            // perturb the weight through alpha (weight = α T)
            let mut p = base.clone();
            let mut m = base.clone();
            p[i].alpha += eps / p[i].transmittance;
            m[i].alpha -= eps / m[i].transmittance;
            let fd = (value(p) - value(m)) / (2.0 * eps);
            assert!((fd - dw[i]).abs() < 1e-6);
            let mut p = base.clone();
            let mut m = base.clone();
            p[i].depth += eps;
            m[i].depth -= eps;
            let fd = (value(p) - value(m)) / (2.0 * eps);
            assert!((fd - dz[i]).abs() < 1e-6);
        }
    }

    fn wall(rotation: [f64; 4]) -> (RenderOutput, Camera) {
        let cam = Camera::new(30.0, 30.0, 16.0, 16.0, 32, 32, Matrix4::identity());
        let mut sh = [[0.0; 3]; SH_BASIS];
        sh[0] = [0.2; 3];
        let p = Primitive {
            center: [0.0, 0.0, 2.0],
            rotation,
            opacity_raw: 4.0,
            sh,
            shape: FourierShape::circle(3.0, 1, 0.3),
        };
        let mut scene = SceneModel::from_primitives(vec![p], 1, 1);
        scene.primitives[0].normalize_rotation();
        (render(&scene, &cam, &RenderConfig::default(), 1).unwrap(), cam)
    }

    #[test]
    fn aligned_wall_has_small_normal_loss() {
        let (out, cam) = wall([1.0, 0.0, 0.0, 0.0]);
        assert!(normal_consistency_loss(&out, &cam).0 <= 1e-3);
        let (out, cam) = wall([0.97, 0.2, 0.1, 0.0]);
        assert!(normal_consistency_loss(&out, &cam).0 <= 1e-3);
    }

    #[test]
    fn orthogonal_normal_costs_its_weight() {
        let (mut out, cam) = wall([1.0, 0.0, 0.0, 0.0]);
        let i = 16 * 32 + 16;
        let w = out.records(i)[0].weight();
        let nd = depth_normals(&out, &cam)[i].unwrap();
        let perp = math::normalize(math::cross(nd, [1.0, 0.0, 0.0]));
        for c in 0..3 {
            out.normal[3 * i + c] = perp[c] * w;
        }
        let term = out.alpha_acc[i] - math::dot(perp, nd) * w;
        assert!((term - w).abs() < 1e-12);
    }

    #[test]
    fn regularizers_wait_for_warmup() {
        let (out, cam) = wall([0.97, 0.2, 0.1, 0.0]);
        let target = vec![0.5; out.color.len()];
        let cfg = LossConfig { lambda_dssim: 0.2, lambda_dist: 1.0, lambda_normal: 1.0, regularizer_warmup_iters: 100 };
        let early = total_loss(&out, &cam, &target, &cfg, 99).unwrap();
        assert_eq!(early.total, early.photometric);
        let late = total_loss(&out, &cam, &target, &cfg, 100).unwrap();
        assert!((late.total - (late.photometric + late.distortion + late.normal)).abs() < 1e-15);
        let double = LossConfig { lambda_dist: 2.0, ..cfg.clone() };
        let late2 = total_loss(&out, &cam, &target, &double, 100).unwrap();
        assert!((late2.total - late.total - late.distortion).abs() < 1e-15);
        assert!(late.total.is_finite());
    }
}

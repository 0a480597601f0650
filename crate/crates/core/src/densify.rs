//! Primitive lifecycle between optimizer steps: pruning, mass-preserving
//! relocation, and HYDRA splitting.
//!
//! A step returns an origin map so the optimizer can carry Adam moments over
//! for untouched primitives and zero them for everything new or rewritten.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::primitive::Primitive;
use crate::rng::{RngStreams, Stream};
use crate::scene::{AccumStats, SceneModel};
use crate::shape::{boundary_radius, logit, FourierShape};

/// Largest copy count accepted by [`relocation_denominator`].
pub const RELOCATION_CAP: usize = 32;

/// Radial nodes used by the mass oracles.
pub const ORACLE_NODES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub interval: u64,
    pub start_iter: u64,
    pub stop_iter: u64,
    pub tau_o: f64,
    pub tau_i: f64,
    pub v_min: u32,
    pub tau_g: f64,
    pub hydra_from_iter: u64,
    pub birth_rate: f64,
    /// Clone offset scale as a fraction of the donor circumradius.
    pub noise_scale_eta: f64,
    /// Indoor-only death threshold on screen extent (pixels).
    pub max_extent: f64,
    /// Screen extent (pixels) above which HYDRA uses lobe decomposition.
    pub mlp_split_threshold: f64,
    pub lobe_samples: usize,
    pub lobe_segments: usize,
    /// Grace period in iterations; the trainer sets it to one epoch.
    pub grace_iters: u64,
    /// Child offset of the scale-preserving split, as a fraction of `R`.
    pub split_offset: f64,
    pub indoor: bool,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self::outdoor()
    }
}

impl DensifyConfig {
    pub fn outdoor() -> Self {
        Self {
            interval: 500,
            start_iter: 500,
            stop_iter: 25_000,
            tau_o: 0.005,
            tau_i: 0.04,
            v_min: 2,
            tau_g: 0.0004,
            hydra_from_iter: 3000,
            birth_rate: 0.30,
            noise_scale_eta: 0.05,
            max_extent: 1400.0,
            mlp_split_threshold: 100.0,
            lobe_samples: 256,
            lobe_segments: 3,
            grace_iters: 1,
            split_offset: 0.25,
            indoor: false,
        }
    }

    pub fn indoor() -> Self {
        Self { mlp_split_threshold: 50.0, indoor: true, ..Self::outdoor() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau_o", self.tau_o),
            ("tau_i", self.tau_i),
            ("tau_g", self.tau_g),
            ("max_extent", self.max_extent),
            ("mlp_split_threshold", self.mlp_split_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.interval == 0 || self.stop_iter < self.start_iter || (self.stop_iter - self.start_iter) % self.interval != 0 {
            return Err(Error::Config(format!(
                "interval {} must divide the range [{}, {}]",
                self.interval, self.start_iter, self.stop_iter
            )));
        }
        if !(0.0..=1.0).contains(&self.birth_rate) || self.noise_scale_eta < 0.0 || self.split_offset < 0.0 {
            return Err(Error::Config("birth_rate, noise_scale_eta, split_offset out of range".into()));
        }
        if self.lobe_samples < 16 || self.lobe_segments < 2 {
            return Err(Error::Config("lobe_samples must be ≥ 16 and lobe_segments ≥ 2".into()));
        }
        Ok(())
    }

    /// True when `iteration` is a densification (or pruning) step.
    pub fn is_step(&self, iteration: u64) -> bool {
        iteration >= self.start_iter && iteration % self.interval == 0
    }
}

pub fn death_mask(scene: &SceneModel, cfg: &DensifyConfig) -> Vec<bool> {
    scene
        .primitives
        .iter()
        .zip(&scene.stats)
        .zip(&scene.dome_flags)
        .map(|((p, s), &dome)| !dome && is_dead(p.opacity(), s, cfg))
        .collect()
}

fn is_dead(opacity: f64, s: &AccumStats, cfg: &DensifyConfig) -> bool {
    if opacity < cfg.tau_o {
        return true;
    }
    if s.age_iters < cfg.grace_iters {
        return false;
    }
    s.max_blend_weight < cfg.tau_i
        || s.view_count < cfg.v_min
        || (cfg.indoor && s.max_screen_extent > cfg.max_extent)
}

/// Opacity of each of `n` co-located copies: `1 − (1 − o)^{1/n}`.
pub fn new_opacity(o: f64, n: usize) -> f64 {
    -((-o).ln_1p() / n as f64).exp_m1()
}

/// Double binomial sum equating the composited mass of `n` children with the parent.
pub fn relocation_denominator(o_new: f64, n: usize, sigma: f64) -> Result<f64> {
    if n > RELOCATION_CAP {
        return Err(Error::RelocationCap(n));
    }
    let mut binom = vec![1.0_f64];
    let mut d = 0.0;
    for i in 1..=n {
        // binom holds C(i-1, k)
        for (k, &c) in binom.iter().enumerate() {
            let e = sigma * (k + 1) as f64;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            d += c * sign * o_new.powi(k as i32 + 1) / ((e + 1.0) * (e + 2.0));
        }
        let mut next = vec![1.0; i + 1];
        for k in 1..i {
            next[k] = binom[k - 1] + binom[k];
        }
        binom = next;
    }
    Ok(d)
}

/// Circumradius preserving mass; a non-positive `d` leaves `r` unchanged.
pub fn new_circumradius(r: f64, o: f64, sigma: f64, d: f64) -> f64 {
    if !(d > 0.0 && d.is_finite()) {
        return r;
    }
    r * (o / ((sigma + 1.0) * (sigma + 2.0) * d)).sqrt()
}

/// `(o_new, R_new)` for `n` co-located copies of a primitive.
pub fn relocated_params(o: f64, r: f64, sigma: f64, n: usize) -> Result<(f64, f64)> {
    let o_new = new_opacity(o, n);
    let d = relocation_denominator(o_new, n, sigma)?;
    let r_new = new_circumradius(r, o, sigma, d);
    if r_new == r && n > 1 {
        return Ok((o, r));
    }
    Ok((o_new, r_new))
}

fn polar_trapezoid(r: f64, f: impl Fn(f64) -> f64) -> f64 {
    let h = r / (ORACLE_NODES - 1) as f64;
    let mut acc = 0.0;
    for j in 0..ORACLE_NODES {
        let rho = j as f64 * h;
        let w = if j == 0 || j == ORACLE_NODES - 1 { 0.5 } else { 1.0 };
        acc += w * f(rho) * TAU * rho;
    }
    acc * h
}

fn power_window(rho: f64, r: f64, sigma: f64) -> f64 {
    ((r - rho) / r).max(0.0).powf(sigma)
}

/// Quadrature of `o · w(ρ)` over the disc of radius `r`.
pub fn window_mass_oracle(o: f64, r: f64, sigma: f64) -> f64 {
    polar_trapezoid(r, |rho| o * power_window(rho, r, sigma))
}

/// Quadrature of `1 − (1 − o_new w(ρ))^n` over the disc of radius `r_new`.
pub fn composite_mass_oracle(o_new: f64, r_new: f64, sigma: f64, n: usize) -> f64 {
    polar_trapezoid(r_new, |rho| 1.0 - (1.0 - o_new * power_window(rho, r_new, sigma)).powi(n as i32))
}

/// One angular segment of a boundary, between two valleys.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LobeSegment {
    pub theta_min: f64,
    /// Always greater than `theta_min`; may exceed 2π when the segment wraps.
    pub theta_max: f64,
    /// Area centroid in polar form, world units.
    pub centroid_r: f64,
    pub centroid_theta: f64,
}

impl LobeSegment {
    pub fn width(&self) -> f64 {
        self.theta_max - self.theta_min
    }

    pub fn centroid(&self) -> [f64; 2] {
        [self.centroid_r * self.centroid_theta.cos(), self.centroid_r * self.centroid_theta.sin()]
    }
}

/// Valleys of `r(θ)` sampled at `m` angles: `(angle, depth)`, deepest first.
pub fn find_valleys(shape: &FourierShape, m: usize, k_active: usize) -> Vec<(f64, f64)> {
    let step = TAU / m as f64;
    let r: Vec<f64> = (0..m)
        .map(|j| {
            let t = j as f64 * step;
            boundary_radius(shape, t.cos(), t.sin(), k_active)
        })
        .collect();
    let at = |i: isize| r[i.rem_euclid(m as isize) as usize];
    let tol = 1e-9 * r.iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::new();
    for j in 0..m as isize {
        if !(at(j) < at(j - 1)) {
            continue;
        }
        let mut e = j;
        while e - j < m as isize && at(e + 1) == at(j) {
            e += 1;
        }
        if !(at(e + 1) > at(j)) {
            continue;
        }
        let mut l = j - 1;
        while j - l < m as isize && at(l - 1) >= at(l) {
            l -= 1;
        }
        let mut h = e + 1;
        while h - e < m as isize && at(h + 1) >= at(h) {
            h += 1;
        }
        let depth = 0.5 * (at(l) + at(h)) - at(j);
        if depth <= tol {
            continue;
        }
        // parabolic refinement on an isolated sample minimum
        let mut idx = 0.5 * (j + e) as f64;
        if e == j {
            let (a, b, c) = (at(j - 1), at(j), at(j + 1));
            let den = a - 2.0 * b + c;
            if den > 0.0 {
                idx += (0.5 * (a - c) / den).clamp(-0.5, 0.5);
            }
        }
        out.push((idx * step, depth));
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
    out
}

/// Splits the boundary at its `s` deepest valleys.
///
/// Fewer valleys yield fewer segments; a boundary without valleys yields none.
pub fn detect_lobes(shape: &FourierShape, m: usize, s: usize, k_active: usize) -> Vec<LobeSegment> {
    let mut cuts: Vec<f64> = find_valleys(shape, m, k_active).into_iter().take(s).map(|v| v.0.rem_euclid(TAU)).collect();
    cuts.sort_by(f64::total_cmp);
    let n = cuts.len();
    (0..n)
        .map(|i| {
            let lo = cuts[i];
            let hi = if i + 1 < n { cuts[i + 1] } else { cuts[0] + TAU };
            let (cr, ct) = sector_centroid(shape, lo, hi, k_active);
            LobeSegment { theta_min: lo, theta_max: hi, centroid_r: cr, centroid_theta: ct }
        })
        .collect()
}

fn sector_centroid(shape: &FourierShape, lo: f64, hi: f64, k_active: usize) -> (f64, f64) {
    let n = 512;
    let h = (hi - lo) / n as f64;
    let (mut area, mut mx, mut my) = (0.0, 0.0, 0.0);
    for j in 0..=n {
        let t = lo + j as f64 * h;
        let w = if j == 0 || j == n { 0.5 } else { 1.0 };
        let r = boundary_radius(shape, t.cos(), t.sin(), k_active);
        area += w * 0.5 * r * r;
        mx += w * r * r * r / 3.0 * t.cos();
        my += w * r * r * r / 3.0 * t.sin();
    }
    if area <= 0.0 {
        return (0.0, 0.5 * (lo + hi));
    }
    (mx.hypot(my) / area, my.atan2(mx))
}

/// Closed polygon of the segment's wedge: the parent center then the boundary arc.
fn wedge_polygon(shape: &FourierShape, seg: &LobeSegment, k_active: usize) -> Vec<[f64; 2]> {
    let n = 256;
    let mut poly = vec![[0.0, 0.0]];
    for j in 0..=n {
        let t = seg.theta_min + seg.width() * j as f64 / n as f64;
        let r = boundary_radius(shape, t.cos(), t.sin(), k_active);
        poly.push([r * t.cos(), r * t.sin()]);
    }
    poly
}

/// Distance from `o` along `dir` to the first polygon edge, if any.
fn ray_cast(poly: &[[f64; 2]], o: [f64; 2], dir: [f64; 2]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let e = [b[0] - a[0], b[1] - a[1]];
        let den = dir[0] * e[1] - dir[1] * e[0];
        if den.abs() < 1e-15 {
            continue;
        }
        let ao = [a[0] - o[0], a[1] - o[1]];
        let t = (ao[0] * e[1] - ao[1] * e[0]) / den;
        let s = (ao[0] * dir[1] - ao[1] * dir[0]) / den;
        if t > 1e-12 && (-1e-12..=1.0 + 1e-12).contains(&s) {
            best = Some(best.map_or(t, |b: f64| b.min(t)));
        }
    }
    best
}

/// Complex coefficients `d_k` with `|Σ d_k e^{ikψ}| ≈ target(ψ_j)` at `ψ_j = 2πj/len`.
///
/// Levenberg–Marquardt on the real and imaginary parts.
pub fn fit_boundary(target: &[f64], k: usize) -> Vec<Complex64> {
    let m = target.len();
    let w: Vec<Complex64> = (0..m).map(|j| Complex64::from_polar(1.0, TAU * j as f64 / m as f64)).collect();
    let mut d = vec![Complex64::new(0.0, 0.0); k];
    d[0] = Complex64::new(target.iter().sum::<f64>() / m as f64, 0.0);
    let eval = |d: &[Complex64]| -> (Vec<f64>, Vec<Complex64>) {
        let p: Vec<Complex64> = w.iter().map(|&wj| crate::shape::horner(d, wj)).collect();
        let res = p.iter().zip(target).map(|(pj, t)| pj.norm() - t).collect();
        (res, p)
    };
    let cost = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
    let (mut res, mut p) = eval(&d);
    let mut c = cost(&res);
    let mut lambda = 1e-3;
    for _ in 0..200 {
        let mut jac = DMatrix::<f64>::zeros(m, 2 * k);
        for j in 0..m {
            let mag = p[j].norm().max(1e-12);
            let mut wk = Complex64::new(1.0, 0.0);
            for kk in 0..k {
                let g = p[j].conj() * wk;
                jac[(j, 2 * kk)] = g.re / mag;
                jac[(j, 2 * kk + 1)] = -g.im / mag;
                wk *= w[j];
            }
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let grad = &jt * DVector::from_column_slice(&res);
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for i in 0..2 * k {
                a[(i, i)] += lambda * (jtj[(i, i)] + 1e-12);
            }
            let Some(step) = a.lu().solve(&(-&grad)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<Complex64> =
                (0..k).map(|kk| d[kk] + Complex64::new(step[2 * kk], step[2 * kk + 1])).collect();
            let (r2, p2) = eval(&trial);
            let c2 = cost(&r2);
            if c2 < c {
                let gain = c - c2;
                d = trial;
                res = r2;
                p = p2;
                lambda = (lambda / 3.0).max(1e-12);
                improved = gain > 1e-14 * c.max(1e-300);
                c = c2;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    d
}

/// Child primitive covering one lobe of `parent`, or `None` for a degenerate segment.
pub fn lobe_child(parent: &Primitive, seg: &LobeSegment, k_active: usize, samples: usize) -> Option<Primitive> {
    if seg.width() < TAU / samples as f64 {
        return None;
    }
    let shape = &parent.shape;
    let poly = wedge_polygon(shape, seg, k_active);
    let c = seg.centroid();
    let target: Vec<f64> = (0..samples)
        .map(|j| {
            let psi = TAU * j as f64 / samples as f64;
            ray_cast(&poly, c, [psi.cos(), psi.sin()]).unwrap_or(0.0)
        })
        .collect();
    let k = shape.frequencies();
    let kf = k_active.clamp(1, k);
    let d = fit_boundary(&target, kf);
    let radius: f64 = d.iter().map(|z| z.norm()).sum();
    if !(radius > 0.0 && radius.is_finite()) {
        return None;
    }
    let mut amps: Vec<f64> = d.iter().map(|z| (z.norm() / radius).sqrt()).collect();
    let mut phases: Vec<f64> = d.iter().map(|z| z.arg().rem_euclid(TAU)).collect();
    // frequencies outside the active band keep a small seed so they can learn later
    amps.resize(k, 1e-2);
    phases.resize(k, 0.0);
    let mut child = parent.clone();
    child.shape = FourierShape::new(radius.ln(), amps, phases, shape.sharpness_raw);
    let [tu, tv, _] = parent.frame();
    child.center = tangent_offset(parent.center, tu, tv, c);
    Some(child)
}

fn tangent_offset(center: Vec3, tu: Vec3, tv: Vec3, uv: [f64; 2]) -> Vec3 {
    math::add(center, math::add(math::scale(tu, uv[0]), math::scale(tv, uv[1])))
}

fn with_mass(p: &Primitive, o_new: f64, r_new: f64) -> Primitive {
    let mut c = p.clone();
    c.opacity_raw = logit(o_new);
    c.shape.circumradius_raw = r_new.ln();
    c
}

/// Two mass-preserving children offset by `±offset` along angle `angle`.
pub fn scale_split(parent: &Primitive, offset: f64, angle: f64) -> Result<[Primitive; 2]> {
    let (o_new, r_new) = relocated_params(parent.opacity(), parent.shape.radius(), parent.shape.sharpness(), 2)?;
    let [tu, tv, _] = parent.frame();
    let d = offset * parent.shape.radius();
    let uv = [d * angle.cos(), d * angle.sin()];
    let mut a = with_mass(parent, o_new, r_new);
    let mut b = a.clone();
    a.center = tangent_offset(parent.center, tu, tv, uv);
    b.center = tangent_offset(parent.center, tu, tv, [-uv[0], -uv[1]]);
    Ok([a, b])
}

/// Scene plus, per slot, the pre-step index of an untouched primitive.
struct Tracked<'a> {
    scene: &'a mut SceneModel,
    origin: Vec<Option<usize>>,
}

impl<'a> Tracked<'a> {
    fn new(scene: &'a mut SceneModel) -> Self {
        let origin = (0..scene.len()).map(Some).collect();
        Self { scene, origin }
    }

    fn rewrite(&mut self, i: usize, p: Primitive) {
        self.scene.primitives[i] = p;
        self.scene.stats[i] = AccumStats::default();
        self.scene.dome_flags[i] = false;
        self.origin[i] = None;
    }

    fn push(&mut self, p: Primitive) {
        self.scene.push(p, false);
        self.origin.push(None);
    }

    fn remove(&mut self, mask: &[bool]) {
        self.scene.remove_where(mask);
        let mut i = 0;
        self.origin.retain(|_| {
            i += 1;
            !mask[i - 1]
        });
    }
}

/// Outcome of one densification step, also written to the audit log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensifyEvent {
    pub iteration: u64,
    pub deaths: usize,
    pub relocated: usize,
    pub removed: usize,
    pub births: usize,
    pub scale_splits: usize,
    pub lobe_splits: usize,
    pub donor_ids: Vec<usize>,
    pub split_ids: Vec<usize>,
    pub live_before: usize,
    pub live_after: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyReport {
    /// For each post-step primitive, its pre-step index when untouched.
    pub origin: Vec<Option<usize>>,
    pub event: DensifyEvent,
}

/// Donors sampled without replacement, ∝ o on even parity and ∝ 1/σ on odd.
fn sample_donors(scene: &SceneModel, eligible: &[usize], amount: usize, parity: u64, rng: &mut RngStreams) -> Result<Vec<usize>> {
    if amount == 0 {
        return Ok(Vec::new());
    }
    if eligible.is_empty() {
        return Err(Error::NoDonors);
    }
    let weight = |i: usize| {
        let p = &scene.primitives[eligible[i]];
        let w = if parity % 2 == 0 { p.opacity() } else { 1.0 / p.shape.sharpness() };
        if w.is_finite() && w > 0.0 { w } else { f64::MIN_POSITIVE }
    };
    let amount = amount.min(eligible.len());
    let picked = rand::seq::index::sample_weighted(rng.stream(Stream::Relocation), eligible.len(), weight, amount)
        .map_err(|e| Error::Contract(format!("donor sampling failed: {e}")))?;
    Ok(picked.into_iter().map(|i| eligible[i]).collect())
}

fn relocate_tracked(
    t: &mut Tracked<'_>,
    dead: &[bool],
    births: usize,
    cfg: &DensifyConfig,
    rng: &mut RngStreams,
    parity: u64,
    event: &mut DensifyEvent,
) -> Result<()> {
    let dead_ids: Vec<usize> = (0..dead.len()).filter(|&i| dead[i]).collect();
    let eligible: Vec<usize> = (0..dead.len()).filter(|&i| !dead[i] && !t.scene.dome_flags[i]).collect();
    if !dead_ids.is_empty() && eligible.is_empty() {
        return Err(Error::NoDonors);
    }
    let room = t.scene.budget_max.saturating_sub(t.scene.len());
    let births = births.min(room);
    let donors = sample_donors(t.scene, &eligible, dead_ids.len() + births, parity, rng)?;
    let mut removed = vec![false; dead.len()];
    for (j, &slot) in dead_ids.iter().enumerate() {
        if j >= donors.len() {
            removed[slot] = true;
        }
    }
    for (j, &donor) in donors.iter().enumerate() {
        let p = t.scene.primitives[donor].clone();
        let (o_new, r_new) = relocated_params(p.opacity(), p.shape.radius(), p.shape.sharpness(), 2)?;
        let a = with_mass(&p, o_new, r_new);
        let mut b = a.clone();
        let eps: [f64; 2] = {
            let s = rng.stream(Stream::Clone);
            [s.sample(StandardNormal), s.sample(StandardNormal)]
        };
        let eta = cfg.noise_scale_eta * p.shape.radius();
        let [tu, tv, _] = p.frame();
        b.center = tangent_offset(p.center, tu, tv, [eta * eps[0], eta * eps[1]]);
        t.rewrite(donor, a);
        if j < dead_ids.len() {
            t.rewrite(dead_ids[j], b);
            event.relocated += 1;
        } else {
            t.push(b);
            event.births += 1;
        }
    }
    removed.resize(t.scene.len(), false);
    event.removed += removed.iter().filter(|&&r| r).count();
    event.donor_ids.extend(donors);
    t.remove(&removed);
    Ok(())
}

/// Replaces `dead` primitives with relocated children of sampled donors and
/// adds `births` more children, within the budget. Returns the origin map.
pub fn relocate_and_add(
    scene: &mut SceneModel,
    dead: &[bool],
    births: usize,
    cfg: &DensifyConfig,
    rng: &mut RngStreams,
    parity: u64,
) -> Result<DensifyReport> {
    let mut event = DensifyEvent { live_before: scene.len(), deaths: dead.iter().filter(|&&d| d).count(), ..Default::default() };
    let mut t = Tracked::new(scene);
    relocate_tracked(&mut t, dead, births, cfg, rng, parity, &mut event)?;
    event.live_after = t.scene.len();
    let origin = t.origin;
    for s in &mut scene.stats {
        s.reset();
    }
    Ok(DensifyReport { origin, event })
}

fn hydra_tracked(t: &mut Tracked<'_>, candidates: &[usize], cfg: &DensifyConfig, rng: &mut RngStreams, event: &mut DensifyEvent) -> Result<()> {
    let k_active = t.scene.k_active;
    for &id in candidates {
        let room = t.scene.budget_max.saturating_sub(t.scene.len());
        if room == 0 {
            break;
        }
        let parent = t.scene.primitives[id].clone();
        let mut children = Vec::new();
        if t.scene.stats[id].max_screen_extent >= cfg.mlp_split_threshold {
            let segs = detect_lobes(&parent.shape, cfg.lobe_samples, cfg.lobe_segments, k_active);
            if segs.len() >= 2 && segs.len() - 1 <= room {
                children = segs.iter().filter_map(|s| lobe_child(&parent, s, k_active, cfg.lobe_samples)).collect();
            }
        }
        if children.len() >= 2 {
            event.lobe_splits += 1;
        } else {
            let angle = rng.stream(Stream::Clone).random::<f64>() * TAU;
            children = scale_split(&parent, cfg.split_offset, angle)?.to_vec();
            event.scale_splits += 1;
        }
        event.split_ids.push(id);
        let mut it = children.into_iter();
        if let Some(first) = it.next() {
            t.rewrite(id, first);
        }
        for c in it {
            t.push(c);
        }
    }
    Ok(())
}

/// Splits each candidate in order until the budget is reached.
pub fn hydra_split(scene: &mut SceneModel, candidates: &[usize], cfg: &DensifyConfig, rng: &mut RngStreams) -> Result<DensifyReport> {
    let mut event = DensifyEvent { live_before: scene.len(), ..Default::default() };
    let mut t = Tracked::new(scene);
    hydra_tracked(&mut t, candidates, cfg, rng, &mut event)?;
    event.live_after = t.scene.len();
    Ok(DensifyReport { origin: t.origin, event })
}

/// Primitives eligible for HYDRA, highest mean gradient first.
pub fn hydra_candidates(scene: &SceneModel, dead: &[bool], cfg: &DensifyConfig) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scene.len())
        .filter(|&i| !dead[i] && !scene.dome_flags[i] && scene.stats[i].mean_abs_grad() > cfg.tau_g)
        .collect();
    ids.sort_by(|&a, &b| scene.stats[b].mean_abs_grad().total_cmp(&scene.stats[a].mean_abs_grad()).then(a.cmp(&b)));
    ids
}

/// Death, then HYDRA, then relocation and births. Past `stop_iter` only prunes.
pub fn densify_step(scene: &mut SceneModel, cfg: &DensifyConfig, iteration: u64, rng: &mut RngStreams) -> Result<DensifyReport> {
    let n = scene.len();
    let mut event = DensifyEvent { iteration, live_before: n, ..Default::default() };
    if !cfg.is_step(iteration) {
        event.live_after = n;
        return Ok(DensifyReport { origin: (0..n).map(Some).collect(), event });
    }
    let dead = death_mask(scene, cfg);
    event.deaths = dead.iter().filter(|&&d| d).count();
    let mut t = Tracked::new(scene);
    if iteration > cfg.stop_iter {
        event.removed = event.deaths;
        t.remove(&dead);
    } else {
        if iteration >= cfg.hydra_from_iter {
            let cands = hydra_candidates(t.scene, &dead, cfg);
            hydra_tracked(&mut t, &cands, cfg, rng, &mut event)?;
        }
        let mut dead = dead;
        dead.resize(t.scene.len(), false);
        let births = (cfg.birth_rate * t.scene.budget_max.saturating_sub(t.scene.len()) as f64).floor() as usize;
        let parity = iteration / cfg.interval;
        relocate_tracked(&mut t, &dead, births, cfg, rng, parity, &mut event)?;
    }
    event.live_after = t.scene.len();
    let origin = t.origin;
    for s in &mut scene.stats {
        s.reset();
    }
    debug_assert!(scene.len() <= scene.budget_max);
    Ok(DensifyReport { origin, event })
}

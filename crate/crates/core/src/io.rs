//! Checkpoints, images, dataset manifests, initialization and synthetic scenes.
//!
//! A checkpoint is one JSON header line followed by little-endian `f32`
//! records in the flat parameter order of [`ParamLayout`].

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{CheckpointError, Error, Result};
use crate::math::{self, Vec3};
use crate::primitive::{quaternion_facing, ParamLayout, Primitive, SH_BASIS};
use crate::raster::{render, RenderConfig};
use crate::rng::{derive_seed, RngState, RngStreams, Stream};
use crate::scene::SceneModel;
use crate::sh::rgb_to_dc;
use crate::shape::{inverse_softplus, logit, FourierShape, SIGMA_EPS};

pub const CHECKPOINT_FORMAT: &str = "fsplat-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub k: usize,
    pub sh_degree: usize,
    pub count: usize,
    pub k_active: usize,
    pub budget_max: usize,
    pub iteration: u64,
    pub rng: RngState,
    /// Indices of dome primitives.
    #[serde(default)]
    pub dome: Vec<usize>,
    pub record_bytes: usize,
}

/// Bytes per stored primitive: `(58 + 2K) × 4`.
pub fn record_bytes(k: usize) -> usize {
    ParamLayout::new(k).len() * 4
}

/// Rounds every parameter to the nearest `f32`, the precision a checkpoint stores.
pub fn round_to_f32(p: &mut Primitive) {
    let k = p.shape.frequencies();
    let flat: Vec<f64> = p.to_flat().iter().map(|&v| f64::from(v as f32)).collect();
    let truncated = p.shape.is_truncated();
    let mut q = Primitive::from_flat(&flat, k);
    if truncated {
        q.shape = p.shape.clone();
    }
    *p = q;
}

pub fn encode_checkpoint(scene: &SceneModel, rng: &RngState, iteration: u64) -> Result<Vec<u8>> {
    scene.validate()?;
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        k: scene.k,
        sh_degree: scene.sh_degree_active,
        count: scene.len(),
        k_active: scene.k_active,
        budget_max: scene.budget_max,
        iteration,
        rng: rng.clone(),
        dome: (0..scene.len()).filter(|&i| scene.dome_flags[i]).collect(),
        record_bytes: record_bytes(scene.k),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(scene.len() * header.record_bytes);
    let mut flat = vec![0.0; ParamLayout::new(scene.k).len()];
    for (id, p) in scene.primitives.iter().enumerate() {
        if p.shape.is_truncated() {
            return Err(CheckpointError::Unsupported(format!("primitive {id} carries a frozen truncation denominator")).into());
        }
        p.write_flat(&mut flat);
        for &v in &flat {
            let f = v as f32;
            if v.is_finite() && !f.is_finite() {
                return Err(CheckpointError::Unsupported(format!("primitive {id} has a value {v} outside f32 range")).into());
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(SceneModel, CheckpointHeader)> {
    let version_err = |found: String| CheckpointError::Version { found, expected: CHECKPOINT_VERSION };
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| version_err("no header line".into()))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| version_err(format!("unreadable header ({e})")))?;
    let format = value.get("format").and_then(|v| v.as_str());
    let version = value.get("version").and_then(|v| v.as_u64());
    if format != Some(CHECKPOINT_FORMAT) || version != Some(u64::from(CHECKPOINT_VERSION)) {
        return Err(version_err(format!("{:?} v{:?}", format, version)).into());
    }
    let header: CheckpointHeader =
        serde_json::from_value(value).map_err(|e| CheckpointError::SizeMismatch(format!("bad header fields: {e}")))?;
    if header.k == 0 || header.record_bytes != record_bytes(header.k) {
        return Err(CheckpointError::SizeMismatch(format!(
            "record size {} does not match K = {} ({} expected)",
            header.record_bytes,
            header.k,
            record_bytes(header.k)
        ))
        .into());
    }
    let payload = &bytes[nl + 1..];
    let expected = header.count * header.record_bytes;
    if payload.len() < expected {
        return Err(CheckpointError::Truncated { expected, found: payload.len() }.into());
    }
    if payload.len() > expected {
        return Err(CheckpointError::SizeMismatch(format!("{} trailing bytes", payload.len() - expected)).into());
    }
    let mut prims = Vec::with_capacity(header.count);
    let mut flat = vec![0.0; header.record_bytes / 4];
    for rec in payload.chunks_exact(header.record_bytes) {
        for (v, b) in flat.iter_mut().zip(rec.chunks_exact(4)) {
            *v = f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        prims.push(Primitive::from_flat(&flat, header.k));
    }
    let mut scene = SceneModel::from_primitives(prims, header.k_active, header.budget_max);
    scene.k = header.k;
    scene.k_active = header.k_active;
    scene.sh_degree_active = header.sh_degree;
    for &d in &header.dome {
        if d >= scene.len() {
            return Err(CheckpointError::SizeMismatch(format!("dome index {d} out of range")).into());
        }
        scene.dome_flags[d] = true;
    }
    scene.validate().map_err(|e| CheckpointError::SizeMismatch(e.to_string()))?;
    Ok((scene, header))
}

pub fn save_checkpoint(path: &Path, scene: &SceneModel, rng: &RngState, iteration: u64) -> Result<()> {
    let bytes = encode_checkpoint(scene, rng, iteration)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(SceneModel, CheckpointHeader)> {
    decode_checkpoint(&fs::read(path)?)
}

fn srgb_encode(c: f64) -> f64 {
    if c <= 0.003_130_8 { 12.92 * c } else { 1.055 * c.powf(1.0 / 2.4) - 0.055 }
}

fn srgb_decode(c: f64) -> f64 {
    if c <= 0.040_45 { c / 12.92 } else { ((c + 0.055) / 1.055).powf(2.4) }
}

/// Quantizes to 8 bits exactly as [`write_png`] would.
pub fn quantize(rgb: &[f64]) -> Vec<f64> {
    rgb.iter().map(|&c| f64::from(to_u8(c)) / 255.0).collect()
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an interleaved RGB image in `[0, 1]`. With `srgb`, values are treated
/// as linear and encoded; otherwise they are stored as display values.
pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[f64], srgb: bool) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Dimension(format!("{} values for a {width}x{height} image", rgb.len())));
    }
    let bytes: Vec<u8> = rgb.iter().map(|&c| to_u8(if srgb { srgb_encode(c.clamp(0.0, 1.0)) } else { c })).collect();
    image::save_buffer(path, &bytes, width as u32, height as u32, image::ColorType::Rgb8)?;
    Ok(())
}

/// Reads an 8-bit image as interleaved RGB in `[0, 1]`; `srgb` decodes to linear.
pub fn read_png(path: &Path, srgb: bool) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| {
            let c = f64::from(b) / 255.0;
            if srgb { srgb_decode(c) } else { c }
        })
        .collect();
    Ok((w as usize, h as usize, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cameras: Vec<Camera>,
    /// Image paths relative to the manifest's directory.
    pub images: Vec<String>,
    /// Optional `x y z r g b` point file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<String>,
    /// Views excluded from training.
    #[serde(default)]
    pub held_out: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    /// Interleaved RGB per view.
    pub images: Vec<Vec<f64>>,
    pub held_out: Vec<usize>,
    pub points: Option<PointCloud>,
}

impl Dataset {
    pub fn train_views(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|i| !self.held_out.contains(i)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.cameras.len() != m.images.len() {
        return Err(Error::Data(format!("{} cameras but {} images", m.cameras.len(), m.images.len())));
    }
    if let Some(&bad) = m.held_out.iter().find(|&&i| i >= m.cameras.len()) {
        return Err(Error::Data(format!("held-out view {bad} does not exist")));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    for (cam, img) in m.cameras.iter().zip(&m.images) {
        cam.validate()?;
        let p = base.join(img);
        let (w, h) = image::image_dimensions(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        if (w as usize, h as usize) != (cam.width, cam.height) {
            return Err(Error::Data(format!("{} is {w}x{h}, camera expects {}x{}", p.display(), cam.width, cam.height)));
        }
    }
    if let Some(pts) = &m.points {
        if !base.join(pts).is_file() {
            return Err(Error::Data(format!("point file {pts} not found")));
        }
    }
    Ok(m)
}

pub fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(m)?)?;
    Ok(())
}

pub fn load_dataset(manifest_path: &Path, srgb: bool) -> Result<Dataset> {
    let m = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let images = m
        .images
        .iter()
        .map(|img| read_png(&base.join(img), srgb).map(|(_, _, d)| d))
        .collect::<Result<Vec<_>>>()?;
    let points = m.points.as_ref().map(|p| read_points(&base.join(p))).transpose()?;
    Ok(Dataset { cameras: m.cameras, images, held_out: m.held_out, points })
}

pub fn read_points(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let mut pc = PointCloud::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if v.len() != 6 || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("{}:{}: expected six finite numbers", path.display(), n + 1)));
        }
        pc.positions.push([v[0], v[1], v[2]]);
        pc.colors.push([v[3], v[4], v[5]]);
    }
    Ok(pc)
}

pub fn write_points(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (p, c) in pc.positions.iter().zip(&pc.colors) {
        writeln!(f, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2])?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub k: usize,
    pub budget_max: usize,
    pub seed: u64,
    pub dc_amplitude_raw: f64,
    pub high_amplitude_raw: f64,
    pub opacity: f64,
    pub sharpness: f64,
    pub rotation: [f64; 4],
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            k: 6,
            budget_max: 0,
            seed: 0,
            dc_amplitude_raw: 1.0,
            high_amplitude_raw: 1e-2,
            opacity: 0.5,
            sharpness: 1.16,
            rotation: [1.0, 0.0, 0.0, 0.0],
        }
    }
}

/// Distance from every point to its nearest neighbour (sweep over sorted `x`).
pub fn nearest_neighbor_distances(points: &[Vec3]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]).then(a.cmp(&b)));
    let mut best = vec![f64::INFINITY; points.len()];
    for (pos, &i) in order.iter().enumerate() {
        let p = points[i];
        let mut b2 = f64::INFINITY;
        for &j in order[pos + 1..].iter() {
            let dx = points[j][0] - p[0];
            if dx * dx >= b2 {
                break;
            }
            b2 = b2.min(math::dot(math::sub(points[j], p), math::sub(points[j], p)));
        }
        for &j in order[..pos].iter().rev() {
            let dx = p[0] - points[j][0];
            if dx * dx >= b2 {
                break;
            }
            b2 = b2.min(math::dot(math::sub(points[j], p), math::sub(points[j], p)));
        }
        best[i] = b2.sqrt();
    }
    best
}

fn point_seed(global: u64, p: Vec3, c: [f64; 3]) -> u64 {
    let words: Vec<u64> = p.iter().chain(c.iter()).map(|v| v.to_bits()).collect();
    derive_seed(global, &words)
}

/// One circular surfel per point, `R = √(nearest-neighbour distance)`.
pub fn init_from_points(pc: &PointCloud, cfg: &InitConfig) -> Result<SceneModel> {
    let n = pc.positions.len();
    if n < 2 || pc.colors.len() != n {
        return Err(Error::Data(format!("need at least two coloured points, got {n}")));
    }
    if cfg.k == 0 || !(cfg.opacity > 0.0 && cfg.opacity < 1.0) || !(cfg.sharpness > SIGMA_EPS) {
        return Err(Error::Config("invalid initialization constants".into()));
    }
    let nn = nearest_neighbor_distances(&pc.positions);
    let mut prims = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(point_seed(cfg.seed, pc.positions[i], pc.colors[i]));
        let radius = nn[i].sqrt().max(1e-6);
        let mut amps = vec![cfg.high_amplitude_raw; cfg.k];
        amps[0] = cfg.dc_amplitude_raw;
        let phases = (0..cfg.k).map(|_| rng.random::<f64>() * TAU).collect();
        let shape = FourierShape::new(radius.ln(), amps, phases, inverse_softplus(cfg.sharpness - SIGMA_EPS));
        let mut sh = [[0.0; 3]; SH_BASIS];
        sh[0] = rgb_to_dc(pc.colors[i]);
        let mut p = Primitive { center: pc.positions[i], rotation: cfg.rotation, opacity_raw: logit(cfg.opacity), sh, shape };
        p.normalize_rotation();
        round_to_f32(&mut p);
        prims.push(p);
    }
    let mut scene = SceneModel::from_primitives(prims, 1, cfg.budget_max.max(n));
    scene.k = cfg.k;
    Ok(scene)
}

/// Golden-angle spiral of `n` surfels on a sphere, facing its center.
pub fn fibonacci_dome(n: usize, radius: f64, center: Vec3, k: usize) -> Vec<Primitive> {
    let golden = PI * (3.0 - 5f64.sqrt());
    let size = radius * (4.0 / n.max(1) as f64).sqrt() * 0.75;
    (0..n)
        .map(|i| {
            let y = if n == 1 { 1.0 } else { 1.0 - 2.0 * i as f64 / (n - 1) as f64 };
            let ring = (1.0 - y * y).max(0.0).sqrt();
            let phi = golden * i as f64;
            let dir = [ring * phi.cos(), y, ring * phi.sin()];
            let pos = math::add(center, math::scale(dir, radius));
            let mut sh = [[0.0; 3]; SH_BASIS];
            sh[0] = rgb_to_dc([1.0; 3]);
            let mut p = Primitive {
                center: pos,
                rotation: quaternion_facing(math::scale(dir, -1.0)),
                opacity_raw: logit(0.5),
                sh,
                shape: FourierShape::circle(size, k, 1.16),
            };
            round_to_f32(&mut p);
            p
        })
        .collect()
}

/// Appends a dome holding 5% of the budget.
pub fn add_dome(scene: &mut SceneModel, radius: f64, center: Vec3) {
    let n = scene.budget_max / 20;
    let room = scene.budget_max.saturating_sub(scene.len());
    for p in fibonacci_dome(n.min(room), radius, center, scene.k) {
        scene.push(p, true);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Circles,
    Lobed,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub primitives: usize,
    pub k: usize,
    pub family: ShapeFamily,
    pub views: usize,
    pub held_out: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Points sampled on the ground truth for initialization.
    pub points: usize,
    pub point_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            primitives: 64,
            k: 6,
            family: ShapeFamily::Mixed,
            views: 8,
            held_out: 1,
            width: 128,
            height: 128,
            seed: 0,
            points: 512,
            point_noise: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub scene: SceneModel,
    pub dataset: Dataset,
}

fn random_shape(rng: &mut ChaCha8Rng, k: usize, family: ShapeFamily, radius: f64, sigma: f64) -> FourierShape {
    let lobed = match family {
        ShapeFamily::Circles => false,
        ShapeFamily::Lobed => true,
        ShapeFamily::Mixed => rng.random_bool(0.75),
    };
    let mut amps = vec![0.0; k];
    amps[0] = 1.0;
    if lobed && k > 1 {
        let main = rng.random_range(1..k.min(5));
        let share: f64 = rng.random_range(0.25..0.45);
        let mut r = vec![0.0; k];
        r[0] = 1.0 - share;
        r[main] = share * 0.8;
        for v in r.iter_mut().skip(1) {
            *v += share * 0.2 / (k - 1) as f64;
        }
        amps = r.iter().map(|v| v.sqrt()).collect();
    }
    let phases = (0..k).map(|_| rng.random::<f64>() * TAU).collect();
    FourierShape::new(radius.ln(), amps, phases, inverse_softplus(sigma - SIGMA_EPS))
}

fn orbit_camera(index: usize, count: usize, offset: f64, spec: &SynthSpec) -> Camera {
    let span = 1.6;
    let t = if count > 1 { (index as f64 + offset) / (count - 1) as f64 } else { 0.5 };
    let az = -0.5 * span + span * t;
    let el = 0.35 * ((index as f64 + offset) * 1.7).sin();
    let dist = 4.0;
    let eye = [dist * az.sin() * el.cos(), dist * el.sin(), -dist * az.cos() * el.cos()];
    Camera::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], 0.75, spec.width, spec.height)
}

/// Random ground-truth scene, its rendered views, and noisy surface points.
pub fn synth_scene(spec: &SynthSpec) -> Result<SynthData> {
    if spec.primitives == 0 || spec.views == 0 || spec.k == 0 || spec.width == 0 || spec.height == 0 {
        return Err(Error::Config("synthetic scene needs primitives, views, K and a size".into()));
    }
    let mut streams = RngStreams::new(spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(streams.stream(Stream::Synth).random());
    let mut prims = Vec::with_capacity(spec.primitives);
    for _ in 0..spec.primitives {
        let center = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.6..0.6)];
        let tilt = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -1.0];
        let radius = rng.random_range(0.2..0.45);
        let sigma = rng.random_range(0.4..1.5);
        let shape = random_shape(&mut rng, spec.k, spec.family, radius, sigma);
        let rgb = [rng.random_range(0.05..1.0), rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)];
        let mut sh = [[0.0; 3]; SH_BASIS];
        sh[0] = rgb_to_dc(rgb);
        let mut p = Primitive {
            center,
            rotation: quaternion_facing(tilt),
            opacity_raw: logit(rng.random_range(0.75..0.98)),
            sh,
            shape,
        };
        round_to_f32(&mut p);
        prims.push(p);
    }
    let mut scene = SceneModel::from_primitives(prims, spec.k, spec.primitives);
    scene.k_active = spec.k;
    let total = spec.views + spec.held_out;
    let cameras: Vec<Camera> = (0..total)
        .map(|i| {
            if i < spec.views {
                orbit_camera(i, spec.views, 0.0, spec)
            } else {
                let j = i - spec.views;
                let offset = (j as f64 + 0.5) / spec.held_out as f64;
                orbit_camera((j * spec.views) / spec.held_out.max(1), spec.views, offset, spec)
            }
        })
        .collect();
    let cfg = RenderConfig::default();
    let images = cameras
        .iter()
        .map(|c| render(&scene, c, &cfg, scene.k_active).map(|o| quantize(&o.color)))
        .collect::<Result<Vec<_>>>()?;
    let points = sample_surface_points(&scene, spec.points, spec.point_noise, &mut rng);
    let dataset = Dataset { cameras, images, held_out: (spec.views..total).collect(), points: Some(points) };
    Ok(SynthData { scene, dataset })
}

/// Points drawn uniformly over ground-truth shapes, jittered by `noise`.
pub fn sample_surface_points(scene: &SceneModel, n: usize, noise: f64, rng: &mut ChaCha8Rng) -> PointCloud {
    let mut pc = PointCloud::default();
    if scene.is_empty() {
        return pc;
    }
    let areas: Vec<f64> = scene.primitives.iter().map(|p| p.shape.radius().powi(2)).collect();
    let total: f64 = areas.iter().sum();
    let mut accepted = 0;
    while accepted < n {
        let mut pick = rng.random::<f64>() * total;
        let mut id = 0;
        while id + 1 < areas.len() && pick >= areas[id] {
            pick -= areas[id];
            id += 1;
        }
        let p = &scene.primitives[id];
        let (u, v) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rho = f64::hypot(u, v);
        if rho > 1.0 {
            continue;
        }
        let r = if rho > 0.0 {
            crate::shape::boundary_radius(&p.shape, u / rho, v / rho, scene.k_active) / p.shape.radius()
        } else {
            1.0
        };
        if rho > r {
            continue;
        }
        let [tu, tv, _] = p.frame();
        let radius = p.shape.radius();
        let mut pos = math::add(p.center, math::add(math::scale(tu, u * radius), math::scale(tv, v * radius)));
        for c in &mut pos {
            *c += noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let dc = p.sh[0];
        pc.positions.push(pos);
        pc.colors.push(dc.map(|d| (d * crate::sh::SH_C0 + 0.5).clamp(0.0, 1.0)));
        accepted += 1;
    }
    pc
}

/// Writes the dataset (manifest, PNGs, points) and the ground-truth checkpoint.
pub fn write_synth(dir: &Path, data: &SynthData) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut images = Vec::new();
    for (i, (cam, img)) in data.dataset.cameras.iter().zip(&data.dataset.images).enumerate() {
        let name = format!("view_{i:03}.png");
        write_png(&dir.join(&name), cam.width, cam.height, img, false)?;
        images.push(name);
    }
    let points = match &data.dataset.points {
        Some(pc) => {
            write_points(&dir.join("points.txt"), pc)?;
            Some("points.txt".to_string())
        }
        None => None,
    };
    let manifest = DatasetManifest {
        cameras: data.dataset.cameras.clone(),
        images,
        points,
        held_out: data.dataset.held_out.clone(),
    };
    let path = dir.join("manifest.json");
    write_manifest(&path, &manifest)?;
    save_checkpoint(&dir.join("ground_truth.ckpt"), &data.scene, &RngStreams::new(0).state(), 0)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::psnr;

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec { primitives: 6, views: 2, held_out: 1, width: 32, height: 32, seed, points: 40, ..SynthSpec::default() }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let data = synth_scene(&small_spec(4)).unwrap();
        let mut scene = data.scene.clone();
        scene.dome_flags[2] = true;
        let mut rng = RngStreams::new(99);
        let _: u64 = rng.stream(Stream::Sgld).random();
        let bytes = encode_checkpoint(&scene, &rng.state(), 1234).unwrap();
        let (back, header) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.primitives, scene.primitives);
        assert_eq!(back.dome_flags, scene.dome_flags);
        assert_eq!(header.iteration, 1234);
        assert_eq!(header.rng, rng.state());
        assert_eq!(encode_checkpoint(&back, &header.rng, 1234).unwrap(), bytes);
        let payload = bytes.len() - bytes.iter().position(|&b| b == b'\n').unwrap() - 1;
        assert_eq!(payload, scene.len() * 280);
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let data = synth_scene(&small_spec(5)).unwrap();
        let bytes = encode_checkpoint(&data.scene, &RngStreams::new(0).state(), 0).unwrap();
        let is = |r: Result<(SceneModel, CheckpointHeader)>, want: &str| match r {
            Err(Error::Checkpoint(e)) => assert!(format!("{e:?}").starts_with(want), "{e:?}"),
            other => panic!("expected {want}, got {:?}", other.map(|_| ())),
        };
        is(decode_checkpoint(&bytes[..bytes.len() - 3]), "Truncated");
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 4]);
        is(decode_checkpoint(&longer), "SizeMismatch");
        let text = String::from_utf8_lossy(&bytes).replacen("\"version\":1", "\"version\":7", 1);
        is(decode_checkpoint(text.as_bytes()), "Version");
        let mut corrupt = bytes.clone();
        corrupt[0] = b'#';
        is(decode_checkpoint(&corrupt), "Version");
        let mut scene = data.scene.clone();
        scene.primitives[0].shape = crate::shape::truncate_shape(&scene.primitives[0].shape, 2);
        assert!(matches!(
            encode_checkpoint(&scene, &RngStreams::new(0).state(), 0),
            Err(Error::Checkpoint(CheckpointError::Unsupported(_)))
        ));
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img: Vec<f64> = (0..3 * 7 * 5).map(|i| (i as f64 * 0.37).fract()).collect();
        for srgb in [false, true] {
            let path = dir.path().join("x.png");
            write_png(&path, 7, 5, &img, srgb).unwrap();
            let (w, h, back) = read_png(&path, srgb).unwrap();
            assert_eq!((w, h), (7, 5));
            let tol = if srgb { 0.02 } else { 0.5 / 255.0 + 1e-12 };
            assert!(img.iter().zip(&back).all(|(a, b)| (a - b).abs() <= tol));
        }
    }

    #[test]
    fn init_examples() {
        let pc = PointCloud { positions: vec![[0.0; 3], [4.0, 0.0, 0.0]], colors: vec![[0.5; 3], [1.0, 0.0, 0.5]] };
        let scene = init_from_points(&pc, &InitConfig { budget_max: 10, ..InitConfig::default() }).unwrap();
        assert_eq!(scene.len(), 2);
        assert_eq!(scene.k_active, 1);
        for p in &scene.primitives {
            assert!((p.shape.radius() - 2.0).abs() < 1e-6);
            assert!((p.shape.sharpness() - 1.16).abs() < 1e-6);
            assert_eq!(p.opacity(), 0.5);
        }
        assert_eq!(scene.primitives[0].sh[0], [0.0; 3]);
        let again = init_from_points(&pc, &InitConfig { budget_max: 10, ..InitConfig::default() }).unwrap();
        assert_eq!(scene, again);
        let one = PointCloud { positions: vec![[0.0; 3]], colors: vec![[0.5; 3]] };
        assert!(init_from_points(&one, &InitConfig::default()).is_err());
    }

    #[test]
    fn init_is_permutation_equivariant() {
        let data = synth_scene(&small_spec(8)).unwrap();
        let pc = data.dataset.points.unwrap();
        let mut rev = pc.clone();
        rev.positions.reverse();
        rev.colors.reverse();
        let cfg = InitConfig { seed: 3, ..InitConfig::default() };
        let key = |p: &Primitive| p.center.map(f64::to_bits);
        let mut a = init_from_points(&pc, &cfg).unwrap().primitives;
        let mut b = init_from_points(&rev, &cfg).unwrap().primitives;
        a.sort_by_key(key);
        b.sort_by_key(key);
        assert_eq!(a, b);
    }

    #[test]
    fn nearest_neighbors_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec3> = (0..300).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let fast = nearest_neighbor_distances(&pts);
        for (i, p) in pts.iter().enumerate() {
            let brute = pts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| math::norm(math::sub(*q, *p)))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(fast[i], brute);
        }
    }

    #[test]
    fn dome_examples() {
        let center = [1.0, -2.0, 0.5];
        let dome = fibonacci_dome(1000, 50.0, center, 6);
        assert!(dome.iter().all(|p| (math::norm(math::sub(p.center, center)) - 50.0).abs() < 1e-4 * 50.0));
        for p in &dome {
            let inward = math::normalize(math::sub(center, p.center));
            assert!(math::dot(p.frame()[2], inward) > 0.999);
        }
        let pts: Vec<Vec3> = dome.iter().map(|p| p.center).collect();
        let nn = nearest_neighbor_distances(&pts);
        let mean = nn.iter().sum::<f64>() / nn.len() as f64;
        let sd = (nn.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / nn.len() as f64).sqrt();
        assert!(sd / mean < 0.3, "cv {}", sd / mean);
        let pole = fibonacci_dome(1, 2.0, [0.0; 3], 6);
        assert!((pole[0].center[1] - 2.0).abs() < 1e-6);
        let unit = fibonacci_dome(10, 1.0, [0.0; 3], 6);
        assert!(unit.iter().all(|p| (math::norm(p.center) - 1.0).abs() < 1e-6));
    }

    #[test]
    fn synth_is_deterministic_and_self_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let a = synth_scene(&small_spec(1)).unwrap();
        let b = synth_scene(&small_spec(1)).unwrap();
        let pa = write_synth(&dir.path().join("a"), &a).unwrap();
        let pb = write_synth(&dir.path().join("b"), &b).unwrap();
        for name in ["manifest.json", "view_000.png", "view_002.png", "points.txt", "ground_truth.ckpt"] {
            assert_eq!(fs::read(pa.with_file_name(name)).unwrap(), fs::read(pb.with_file_name(name)).unwrap(), "{name}");
        }
        let ds = load_dataset(&pa, false).unwrap();
        assert_eq!(ds.images, a.dataset.images);
        let (gt, _) = load_checkpoint(&pa.with_file_name("ground_truth.ckpt")).unwrap();
        let cfg = RenderConfig::default();
        let img = quantize(&render(&gt, &ds.cameras[0], &cfg, gt.k_active).unwrap().color);
        assert_eq!(psnr(&img, &ds.images[0]).unwrap(), 100.0);
        let mut off = gt.clone();
        off.primitives[0].center[0] += 0.2;
        let img = render(&off, &ds.cameras[0], &cfg, off.k_active).unwrap().color;
        assert!(psnr(&img, &ds.images[0]).unwrap() < 100.0);
    }

    #[test]
    fn manifest_checks_image_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_synth(dir.path(), &synth_scene(&small_spec(2)).unwrap()).unwrap();
        write_png(&dir.path().join("view_001.png"), 8, 8, &vec![0.0; 3 * 64], false).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Data(_))));
        fs::remove_file(dir.path().join("view_001.png")).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Data(_))));
    }
}

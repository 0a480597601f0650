//! The optimization loop: per-group Adam, schedules, shape-space SGLD noise,
//! densification hook and checkpoint cadence.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::densify::{densify_step, DensifyConfig};
use crate::error::{Error, Result};
use crate::grad::{backward, GradBuffer, WindowGrad};
use crate::io::{load_checkpoint, round_to_f32, save_checkpoint, Dataset};
use crate::loss::{psnr, total_loss, LossConfig};
use crate::primitive::{ParamGroup, ParamLayout};
use crate::raster::{render, RenderConfig, RenderOutput};
use crate::rng::{RngStreams, Stream};
use crate::scene::{AccumStats, SceneModel};
use crate::sh::basis_count;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub amplitude: f64,
    pub phase: f64,
    pub circumradius: f64,
    pub rotation: f64,
    pub sharpness: f64,
    pub opacity: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            sh_dc: 2.5e-3,
            sh_rest: 1.25e-4,
            amplitude: 5e-2,
            phase: 5e-3,
            circumradius: 5e-3,
            rotation: 1e-3,
            sharpness: 8e-4,
            opacity: 0.014,
        }
    }
}

impl LearningRates {
    pub fn indoor() -> Self {
        Self { opacity: 0.05, ..Self::default() }
    }

    fn all(&self) -> [(&'static str, f64); 10] {
        [
            ("position_init", self.position_init),
            ("position_final", self.position_final),
            ("sh_dc", self.sh_dc),
            ("sh_rest", self.sh_rest),
            ("amplitude", self.amplitude),
            ("phase", self.phase),
            ("circumradius", self.circumradius),
            ("rotation", self.rotation),
            ("sharpness", self.sharpness),
            ("opacity", self.opacity),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr: LearningRates,
    /// Multiplier on the position learning rate (scene extent).
    pub position_lr_scale: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub sgld_lr: f64,
    pub freq_unfreeze_iter: u64,
    pub sh_interval: u64,
    pub seed: u64,
    /// Weight of an L1 penalty on circumradius; off by default.
    pub lambda_scale: f64,
    pub checkpoint_every: u64,
    pub window_grad: WindowGrad,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            lr: LearningRates::default(),
            position_lr_scale: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-15,
            sgld_lr: 1e-5,
            freq_unfreeze_iter: 600,
            sh_interval: 1000,
            seed: 0,
            lambda_scale: 0.0,
            checkpoint_every: 5000,
            window_grad: WindowGrad::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        for (name, v) in self.lr.all() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("learning rate {name} must be positive, got {v}")));
            }
        }
        if !(self.position_lr_scale > 0.0) || !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("position_lr_scale and adam_epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.sgld_lr < 0.0 || self.lambda_scale < 0.0 || self.sh_interval == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("sgld_lr, lambda_scale ≥ 0; sh_interval, checkpoint_every ≥ 1".into()));
        }
        Ok(())
    }

    /// Exponential interpolation from `position_init` to `position_final`.
    pub fn position_lr(&self, iteration: u64) -> f64 {
        let t = (iteration as f64 / self.iterations as f64).clamp(0.0, 1.0);
        let (a, b) = (self.lr.position_init.ln(), self.lr.position_final.ln());
        self.position_lr_scale * (a + (b - a) * t).exp()
    }

    pub fn group_lr(&self, group: ParamGroup, iteration: u64) -> f64 {
        match group {
            ParamGroup::Position => self.position_lr(iteration),
            ParamGroup::Rotation => self.lr.rotation,
            ParamGroup::Opacity => self.lr.opacity,
            ParamGroup::ShDc => self.lr.sh_dc,
            ParamGroup::ShRest => self.lr.sh_rest,
            ParamGroup::Circumradius => self.lr.circumradius,
            ParamGroup::Amplitude => self.lr.amplitude,
            ParamGroup::Phase => self.lr.phase,
            ParamGroup::Sharpness => self.lr.sharpness,
        }
    }

    pub fn k_active_at(&self, iteration: u64, k: usize) -> usize {
        if iteration >= self.freq_unfreeze_iter { k } else { 1 }
    }

    pub fn sh_degree_at(&self, iteration: u64) -> usize {
        (iteration / self.sh_interval).min(3) as usize
    }
}

/// True when flat index `idx` is trainable at the given schedule state.
pub fn is_active(layout: ParamLayout, idx: usize, k_active: usize, sh_degree: usize) -> bool {
    match layout.group_of(idx) {
        ParamGroup::Amplitude => idx - layout.amplitudes() < k_active,
        ParamGroup::Phase => idx - layout.phases() < k_active,
        ParamGroup::ShRest => (idx - ParamLayout::SH) / 3 < basis_count(sh_degree),
        _ => true,
    }
}

/// Bias-corrected Adam moments with a step counter per scalar, so frozen and
/// newly created parameters start their own correction schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub k: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: Vec<u32>,
}

impl AdamState {
    pub fn zeros(n: usize, k: usize) -> Self {
        let len = n * ParamLayout::new(k).len();
        Self { k, m: vec![0.0; len], v: vec![0.0; len], t: vec![0; len] }
    }

    pub fn primitives(&self) -> usize {
        self.m.len() / ParamLayout::new(self.k).len()
    }

    /// Keeps moments of untouched primitives and zeroes everything else.
    pub fn remap(&self, origin: &[Option<usize>]) -> Self {
        let p = ParamLayout::new(self.k).len();
        let mut out = Self::zeros(origin.len(), self.k);
        for (i, o) in origin.iter().enumerate() {
            if let Some(j) = *o {
                out.m[i * p..(i + 1) * p].copy_from_slice(&self.m[j * p..(j + 1) * p]);
                out.v[i * p..(i + 1) * p].copy_from_slice(&self.v[j * p..(j + 1) * p]);
                out.t[i * p..(i + 1) * p].copy_from_slice(&self.t[j * p..(j + 1) * p]);
            }
        }
        out
    }
}

/// One Adam update of scalar `x`.
#[inline]
pub fn adam_update(x: &mut f64, g: f64, m: &mut f64, v: &mut f64, t: &mut u32, lr: f64, b1: f64, b2: f64, eps: f64) {
    *t += 1;
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    let mh = *m / (1.0 - b1.powi(*t as i32));
    let vh = *v / (1.0 - b2.powi(*t as i32));
    *x -= lr * mh / (vh.sqrt() + eps);
}

/// Adam step over every active scalar of every primitive.
pub fn adam_step(scene: &mut SceneModel, grads: &GradBuffer, state: &mut AdamState, cfg: &TrainConfig, iteration: u64) {
    let layout = ParamLayout::new(scene.k);
    let p = layout.len();
    let lrs: Vec<f64> = (0..p).map(|i| cfg.group_lr(layout.group_of(i), iteration)).collect();
    let active: Vec<bool> = (0..p).map(|i| is_active(layout, i, scene.k_active, scene.sh_degree_active)).collect();
    let mut flat = vec![0.0; p];
    for (id, prim) in scene.primitives.iter_mut().enumerate() {
        prim.write_flat(&mut flat);
        let g = grads.primitive(id);
        for i in (0..p).filter(|&i| active[i]) {
            let s = id * p + i;
            adam_update(
                &mut flat[i],
                g[i],
                &mut state.m[s],
                &mut state.v[s],
                &mut state.t[s],
                lrs[i],
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_epsilon,
            );
        }
        let shape = prim.shape.clone();
        *prim = crate::primitive::Primitive::from_flat(&flat, scene.k);
        if shape.is_truncated() {
            prim.shape = shape;
        }
    }
}

/// Gaussian noise of standard deviation `sgld_lr` on active amplitudes and phases.
pub fn sgld_shape_noise(scene: &mut SceneModel, sgld_lr: f64, rng: &mut RngStreams) {
    if sgld_lr == 0.0 {
        return;
    }
    let k = scene.k_active;
    let stream = rng.stream(Stream::Sgld);
    for p in &mut scene.primitives {
        for j in 0..k {
            p.shape.amplitudes_raw[j] += sgld_lr * stream.sample::<f64, _>(StandardNormal);
            p.shape.phases[j] += sgld_lr * stream.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Folds one view's render and gradient into the densification statistics.
pub fn accumulate_stats(scene: &mut SceneModel, output: &RenderOutput, grads: &GradBuffer, camera: &crate::camera::Camera) {
    let n = scene.len();
    let mut best = vec![0.0_f64; n];
    for r in &output.blend_log {
        let w = r.weight();
        let b = &mut best[r.id as usize];
        if w > *b {
            *b = w;
        }
    }
    for (i, s) in scene.stats.iter_mut().enumerate() {
        let splat = &output.splats[i];
        if best[i] > s.max_blend_weight {
            s.max_blend_weight = best[i];
        }
        if best[i] > 1e-4 {
            s.view_count += 1;
            s.abs_grad_accum += grads.abs_grad[i];
        }
        if splat.visible {
            let radius = scene.primitives[i].shape.radius();
            let extent = match camera.projection {
                crate::camera::Projection::Perspective => 2.0 * radius * camera.fx / splat.center_depth.max(1e-9),
                crate::camera::Projection::Orthographic => 2.0 * radius * camera.fx,
            };
            s.max_screen_extent = s.max_screen_extent.max(extent);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub view: usize,
    pub loss: f64,
    pub photometric: f64,
    pub distortion: f64,
    pub normal: f64,
    pub psnr: f64,
    pub live: usize,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "iter,view,loss,photometric,distortion,normal,psnr,live";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration, self.view, self.loss, self.photometric, self.distortion, self.normal, self.psnr, self.live
        )
    }
}

/// Everything besides the scene and RNG that a resumed run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub iteration: u64,
    pub adam: AdamState,
    pub view_queue: Vec<usize>,
    pub stats: Vec<AccumStats>,
}

pub struct Trainer<'a> {
    pub scene: SceneModel,
    pub dataset: &'a Dataset,
    pub cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub densify_cfg: Option<DensifyConfig>,
    pub render_cfg: RenderConfig,
    pub rng: RngStreams,
    pub adam: AdamState,
    pub iteration: u64,
    pub log: Vec<LogRow>,
    view_queue: Vec<usize>,
    train_views: Vec<usize>,
    out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        mut scene: SceneModel,
        dataset: &'a Dataset,
        cfg: TrainConfig,
        loss_cfg: LossConfig,
        densify_cfg: Option<DensifyConfig>,
    ) -> Result<Self> {
        cfg.validate()?;
        loss_cfg.validate()?;
        scene.validate()?;
        let train_views = dataset.train_views();
        if train_views.is_empty() || dataset.images.len() != dataset.cameras.len() {
            return Err(Error::Data("dataset has no training views".into()));
        }
        for (c, img) in dataset.cameras.iter().zip(&dataset.images) {
            if img.len() != 3 * c.width * c.height {
                return Err(Error::Data("image size does not match its camera".into()));
            }
        }
        if scene.is_empty() {
            return Err(Error::Data("scene has no primitives".into()));
        }
        let densify_cfg = match densify_cfg {
            Some(d) => {
                d.validate()?;
                Some(DensifyConfig { grace_iters: train_views.len() as u64, ..d })
            }
            None => None,
        };
        for p in &mut scene.primitives {
            round_to_f32(p);
        }
        let adam = AdamState::zeros(scene.len(), scene.k);
        let rng = RngStreams::new(cfg.seed);
        Ok(Self {
            scene,
            dataset,
            cfg,
            loss_cfg,
            densify_cfg,
            render_cfg: RenderConfig::default(),
            rng,
            adam,
            iteration: 0,
            log: Vec::new(),
            view_queue: Vec::new(),
            train_views,
            out_dir: None,
        })
    }

    /// Writes checkpoints, the CSV log and the densification audit log under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    fn next_view(&mut self) -> usize {
        if self.view_queue.is_empty() {
            let mut order = self.train_views.clone();
            order.shuffle(self.rng.stream(Stream::Views));
            order.reverse();
            self.view_queue = order;
        }
        self.view_queue.pop().expect("queue refilled above")
    }

    /// One optimization iteration.
    pub fn step(&mut self) -> Result<LogRow> {
        match self.step_inner() {
            Err(e @ Error::NonFinite { .. }) => {
                if let Some(dir) = &self.out_dir {
                    let _ = save_checkpoint(&dir.join("diagnostic.ckpt"), &self.scene, &self.rng.state(), self.iteration);
                }
                Err(e)
            }
            other => other,
        }
    }

    fn step_inner(&mut self) -> Result<LogRow> {
        let it = self.iteration;
        self.scene.k_active = self.cfg.k_active_at(it, self.scene.k);
        self.scene.sh_degree_active = self.cfg.sh_degree_at(it);
        let view = self.next_view();
        let camera = &self.dataset.cameras[view];
        let target = &self.dataset.images[view];
        let out = render(&self.scene, camera, &self.render_cfg, self.scene.k_active)?;
        let terms = total_loss(&out, camera, target, &self.loss_cfg, it)?;
        let mut grads = backward(&self.scene, camera, &out, &terms.grads, self.cfg.window_grad)?;
        accumulate_stats(&mut self.scene, &out, &grads, camera);
        let mut loss = terms.total;
        if self.cfg.lambda_scale > 0.0 {
            let n = self.scene.len() as f64;
            for (i, p) in self.scene.primitives.iter().enumerate() {
                let r = p.shape.radius();
                loss += self.cfg.lambda_scale * r / n;
                grads.primitive_mut(i)[ParamLayout::RADIUS] += self.cfg.lambda_scale * r / n;
            }
        }
        adam_step(&mut self.scene, &grads, &mut self.adam, &self.cfg, it);
        sgld_shape_noise(&mut self.scene, self.cfg.sgld_lr, &mut self.rng);
        for (p, s) in self.scene.primitives.iter_mut().zip(&mut self.scene.stats) {
            p.normalize_rotation();
            round_to_f32(p);
            s.age_iters += 1;
        }
        self.scene.check_finite()?;
        self.iteration += 1;

        if let Some(dcfg) = &self.densify_cfg {
            if dcfg.is_step(self.iteration) {
                let report = densify_step(&mut self.scene, dcfg, self.iteration, &mut self.rng)?;
                for (p, o) in self.scene.primitives.iter_mut().zip(&report.origin) {
                    if o.is_none() {
                        round_to_f32(p);
                    }
                }
                self.adam = self.adam.remap(&report.origin);
                if let Some(dir) = &self.out_dir {
                    let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join("densify.jsonl"))?;
                    writeln!(f, "{}", serde_json::to_string(&report.event)?)?;
                }
            }
        }
        if self.scene.len() > self.scene.budget_max {
            return Err(Error::Contract(format!(
                "{} primitives exceed the budget {} at iteration {}",
                self.scene.len(),
                self.scene.budget_max,
                self.iteration
            )));
        }

        let row = LogRow {
            iteration: self.iteration,
            view,
            loss,
            photometric: terms.photometric,
            distortion: terms.distortion,
            normal: terms.normal,
            psnr: psnr(&out.color, target)?,
            live: self.scene.len(),
        };
        self.log.push(row.clone());
        if let Some(dir) = self.out_dir.clone() {
            if self.iteration % self.cfg.checkpoint_every == 0 || self.iteration == self.cfg.iterations {
                self.save(&dir.join(format!("iter_{:06}.ckpt", self.iteration)))?;
                self.write_log(&dir.join("train_log.csv"))?;
            }
        }
        Ok(row)
    }

    /// Runs until `cfg.iterations`.
    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            self.step()?;
        }
        Ok(())
    }

    pub fn resume_state(&self) -> ResumeState {
        ResumeState {
            iteration: self.iteration,
            adam: self.adam.clone(),
            view_queue: self.view_queue.clone(),
            stats: self.scene.stats.clone(),
        }
    }

    /// Checkpoint at `path` plus a `.state.json` sidecar for exact resumption.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.scene, &self.rng.state(), self.iteration)?;
        fs::write(sidecar_path(path), serde_json::to_vec(&self.resume_state())?)?;
        Ok(())
    }

    /// Restores the scene, RNG and optimizer state written by [`Trainer::save`].
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let (mut scene, header) = load_checkpoint(path)?;
        let state: ResumeState = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        if state.stats.len() != scene.len() || state.adam.primitives() != scene.len() || state.iteration != header.iteration {
            return Err(Error::Data("resume sidecar does not match its checkpoint".into()));
        }
        scene.stats = state.stats;
        self.scene = scene;
        self.rng = RngStreams::from_state(&header.rng).ok_or_else(|| Error::Data("unreadable RNG state".into()))?;
        self.adam = state.adam;
        self.view_queue = state.view_queue;
        self.iteration = state.iteration;
        Ok(())
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        writeln!(f, "{}", LogRow::CSV_HEADER)?;
        for r in &self.log {
            writeln!(f, "{}", r.to_csv())?;
        }
        f.flush()?;
        Ok(())
    }
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".state.json");
    PathBuf::from(s)
}

/// Trains `scene` on `dataset` and returns the final scene with its log.
pub fn train(
    scene: SceneModel,
    dataset: &Dataset,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    densify_cfg: Option<DensifyConfig>,
) -> Result<(SceneModel, Vec<LogRow>)> {
    let mut t = Trainer::new(scene, dataset, cfg, loss_cfg, densify_cfg)?;
    t.run()?;
    Ok((t.scene, t.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;
    use crate::io::{init_from_points, synth_scene, InitConfig, SynthSpec};
    use crate::primitive::Primitive;
    use crate::shape::{logit, FourierShape};
    use nalgebra::Matrix4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert!((cfg.position_lr(0) - 1.6e-4).abs() < 1e-18);
        assert!((cfg.position_lr(cfg.iterations) - 1.6e-6).abs() < 1e-18);
        assert!(cfg.position_lr(15_000) < 1.6e-4 && cfg.position_lr(15_000) > 1.6e-6);
        assert_eq!(cfg.sh_degree_at(999), 0);
        assert_eq!(cfg.sh_degree_at(2500), 2);
        assert_eq!(cfg.sh_degree_at(90_000), 3);
        assert_eq!(cfg.k_active_at(599, 6), 1);
        assert_eq!(cfg.k_active_at(600, 6), 6);
    }

    #[test]
    fn adam_closed_form() {
        let (mut x, mut m, mut v, mut t) = (1.0, 0.0, 0.0, 0);
        adam_update(&mut x, 0.0, &mut m, &mut v, &mut t, 0.1, 0.9, 0.999, 1e-15);
        assert_eq!(x, 1.0);
        let (mut x, mut m, mut v, mut t) = (0.0, 0.0, 0.0, 0);
        for step in 1..=50 {
            let before = x;
            adam_update(&mut x, 3.0, &mut m, &mut v, &mut t, 0.01, 0.9, 0.999, 1e-15);
            assert!(((before - x) - 0.01).abs() < 1e-12, "step {step}");
        }
    }

    #[test]
    fn sgld_noise_statistics_and_routing() {
        let shape = FourierShape::circle(1.0, 6, 1.0);
        let p = Primitive { center: [0.1, 0.2, 0.3], rotation: [1.0, 0.0, 0.0, 0.0], opacity_raw: 0.0, sh: [[0.0; 3]; 16], shape };
        let mut scene = SceneModel::from_primitives(vec![p.clone(); 1], 2, 1);
        let mut rng = RngStreams::new(5);
        sgld_shape_noise(&mut scene, 0.0, &mut rng);
        assert_eq!(scene.primitives[0], p);
        let mut sum2 = 0.0;
        let draws = 250_000;
        for _ in 0..draws {
            let before = scene.primitives[0].shape.clone();
            sgld_shape_noise(&mut scene, 1e-5, &mut rng);
            let after = &scene.primitives[0].shape;
            for j in 0..2 {
                sum2 += (after.amplitudes_raw[j] - before.amplitudes_raw[j]).powi(2);
                sum2 += (after.phases[j] - before.phases[j]).powi(2);
            }
            assert_eq!(&after.amplitudes_raw[2..], &before.amplitudes_raw[2..]);
        }
        let sd = (sum2 / (4 * draws) as f64).sqrt();
        assert!((sd / 1e-5 - 1.0).abs() < 0.05, "sd {sd}");
        assert_eq!(scene.primitives[0].center, p.center);
        assert_eq!(scene.primitives[0].rotation, p.rotation);
    }

    fn single_view() -> (SceneModel, Dataset) {
        let cam = Camera::orthographic(16.0, 32, 32, Matrix4::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let _ = rng.random::<u8>();
        let target: Vec<f64> = (0..32 * 32)
            .flat_map(|i| {
                let (x, y) = ((i % 32) as f64 - 15.5, (i / 32) as f64 - 15.5);
                if x * x + y * y < 100.0 { [0.9, 0.4, 0.1] } else { [0.0; 3] }
            })
            .collect();
        let shape = FourierShape::circle(0.4, 6, 1.16);
        let p = Primitive { center: [0.1, -0.1, 2.0], rotation: [1.0, 0.0, 0.0, 0.0], opacity_raw: logit(0.5), sh: [[0.0; 3]; 16], shape };
        let scene = SceneModel::from_primitives(vec![p], 1, 1);
        (scene, Dataset { cameras: vec![cam], images: vec![target], held_out: vec![], points: None })
    }

    #[test]
    fn single_primitive_loss_decreases() {
        let (scene, ds) = single_view();
        let cfg = TrainConfig {
            iterations: 200,
            position_lr_scale: 100.0,
            sgld_lr: 0.0,
            ..TrainConfig::default()
        };
        let loss = LossConfig { lambda_dssim: 0.0, lambda_dist: 0.0, lambda_normal: 0.0, regularizer_warmup_iters: 0 };
        let (_, log) = train(scene, &ds, cfg, loss, None).unwrap();
        let l: Vec<f64> = log.iter().map(|r| r.loss).collect();
        for w in (0..l.len() - 50).step_by(10) {
            assert!(l[w + 50] < l[w], "no decrease over [{w}, {}]: {} -> {}", w + 50, l[w], l[w + 50]);
        }
        assert!(l[199] < 0.75 * l[0], "{} -> {}", l[0], l[199]);
    }

    fn tiny_fit() -> (SceneModel, Dataset) {
        let spec = SynthSpec { primitives: 5, views: 3, held_out: 0, width: 32, height: 32, seed: 2, points: 30, ..SynthSpec::default() };
        let data = synth_scene(&spec).unwrap();
        let scene = init_from_points(data.dataset.points.as_ref().unwrap(), &InitConfig { budget_max: 40, ..InitConfig::default() }).unwrap();
        (scene, data.dataset)
    }

    #[test]
    fn frozen_frequencies_stay_at_init() {
        let (scene, ds) = tiny_fit();
        let init = scene.clone();
        let cfg = TrainConfig { iterations: 60, freq_unfreeze_iter: u64::MAX, ..TrainConfig::default() };
        let (out, _) = train(scene, &ds, cfg, LossConfig::outdoor(), None).unwrap();
        for (a, b) in out.primitives.iter().zip(&init.primitives) {
            assert_eq!(&a.shape.amplitudes_raw[1..], &b.shape.amplitudes_raw[1..]);
            assert_eq!(&a.shape.phases[1..], &b.shape.phases[1..]);
            assert_eq!(&a.sh[1..], &b.sh[1..]);
            assert_ne!(a.shape.amplitudes_raw[0], b.shape.amplitudes_raw[0]);
        }
    }

    #[test]
    fn same_seed_same_checkpoint_and_resume_matches() {
        let (scene, ds) = tiny_fit();
        let cfg = TrainConfig { iterations: 40, freq_unfreeze_iter: 10, sh_interval: 15, ..TrainConfig::default() };
        let dcfg = DensifyConfig { interval: 10, start_iter: 10, stop_iter: 30, hydra_from_iter: 20, ..DensifyConfig::outdoor() };
        let run = || {
            let mut t = Trainer::new(scene.clone(), &ds, cfg.clone(), LossConfig::outdoor(), Some(dcfg.clone())).unwrap();
            t.run().unwrap();
            crate::io::encode_checkpoint(&t.scene, &t.rng.state(), t.iteration).unwrap()
        };
        let a = run();
        assert_eq!(a, run());

        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(scene.clone(), &ds, cfg.clone(), LossConfig::outdoor(), Some(dcfg.clone())).unwrap();
        for _ in 0..25 {
            t.step().unwrap();
        }
        let mid = dir.path().join("mid.ckpt");
        t.save(&mid).unwrap();
        let mut r = Trainer::new(scene.clone(), &ds, cfg.clone(), LossConfig::outdoor(), Some(dcfg)).unwrap();
        r.resume(&mid).unwrap();
        r.run().unwrap();
        assert_eq!(crate::io::encode_checkpoint(&r.scene, &r.rng.state(), r.iteration).unwrap(), a);
    }

    #[test]
    fn remap_keeps_only_survivors() {
        let mut s = AdamState::zeros(3, 1);
        let p = ParamLayout::new(1).len();
        for i in 0..3 {
            s.m[i * p] = i as f64 + 1.0;
            s.t[i * p] = 7;
        }
        let r = s.remap(&[Some(2), None, Some(0), None]);
        assert_eq!(r.primitives(), 4);
        assert_eq!(r.m[0], 3.0);
        assert_eq!(r.m[p], 0.0);
        assert_eq!(r.t[p], 0);
        assert_eq!(r.m[2 * p], 1.0);
    }

    #[test]
    fn nan_aborts_with_diagnostic_checkpoint() {
        let (mut scene, ds) = single_view();
        scene.primitives[0].sh[0][0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(scene, &ds, TrainConfig::default(), LossConfig::outdoor(), None).unwrap().with_output(dir.path()).unwrap();
        assert!(matches!(t.step(), Err(Error::NonFinite { .. })));
        assert!(dir.path().join("diagnostic.ckpt").is_file());
    }
}

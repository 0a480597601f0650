use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use fourier_splat::densify::DensifyConfig;
use fourier_splat::grad::{finite_diff_check, gradcheck_fixture, weighted_mse, SteConfig, WindowGrad};
use fourier_splat::io::{
    add_dome, init_from_points, load_checkpoint, load_dataset, read_png, read_points, synth_scene, write_png, write_synth,
    InitConfig, ShapeFamily, SynthSpec,
};
use fourier_splat::lod::lod_sweep;
use fourier_splat::loss::{psnr, ssim, LossConfig};
use fourier_splat::raster::{render, RenderConfig};
use fourier_splat::train::{TrainConfig, Trainer};
use fourier_splat::Error;

#[derive(Parser)]
#[command(name = "fsplat", version, about = "Fourier-boundary surfel renderer and trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its ground-truth checkpoint.
    Synth(SynthArgs),
    /// Optimize a scene against a dataset.
    Train(TrainArgs),
    /// Render one view of a checkpoint to PNG.
    Render(RenderArgs),
    /// Render every view at several frequency counts and report PSNR/SSIM/bytes.
    LodSweep(LodArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradArgs),
    /// PSNR and SSIM between images, or between a checkpoint and a dataset.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    primitives: usize,
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long, default_value_t = 1)]
    held_out: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 6)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Family::Mixed)]
    family: Family,
    #[arg(long, default_value_t = 512)]
    points: usize,
    #[arg(long, default_value_t = 0.05)]
    point_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Circles,
    Lobed,
    Mixed,
}

#[derive(Args)]
struct SceneType {
    /// Indoor column of the hyperparameter table.
    #[arg(long, conflicts_with = "outdoor")]
    indoor: bool,
    /// Outdoor column (default).
    #[arg(long)]
    outdoor: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with optional `train`, `loss`, `densify`, `init` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting checkpoint, or an `x y z r g b` point file. Defaults to the dataset's points.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Dataset directory holding `manifest.json`.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    /// Resume from a checkpoint written by a previous run (needs its `.state.json`).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    scene_type: SceneType,
    /// Decode PNGs from sRGB to linear.
    #[arg(long)]
    srgb: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 0)]
    camera_index: usize,
    /// Active frequency count; defaults to the checkpoint's.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    srgb: bool,
}

#[derive(Args)]
struct LodArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    /// Comma-separated k values; defaults to 1..=K.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    srgb: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradMode {
    Hard,
    Ste,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 16)]
    primitives: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, value_enum, default_value_t = GradMode::Hard)]
    mode: GradMode,
    /// Zero the loss on pixels next to a discontinuity.
    #[arg(long)]
    mask: bool,
    /// Exit with status 4 when any group's relative error exceeds this.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Write the report as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long, requires = "target")]
    pred: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, requires = "images")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    train: TrainConfig,
    loss: LossConfig,
    densify: DensifyConfig,
    init: InitConfig,
    /// Add a background dome holding 5% of the budget.
    dome: bool,
    densify_enabled: Option<bool>,
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn load_config(path: Option<&Path>, indoor: bool) -> Result<FileConfig> {
    let mut base = FileConfig::default();
    if indoor {
        base.loss = LossConfig::indoor();
        base.densify = DensifyConfig::indoor();
        base.train.lr = fourier_splat::train::LearningRates::indoor();
    }
    let mut value = serde_json::to_value(&base)?;
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        let overlay: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        merge(&mut value, overlay);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")).into())
}

fn manifest_path(dir: &Path) -> PathBuf {
    if dir.is_file() { dir.to_path_buf() } else { dir.join("manifest.json") }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        primitives: a.primitives,
        k: a.k,
        family: match a.family {
            Family::Circles => ShapeFamily::Circles,
            Family::Lobed => ShapeFamily::Lobed,
            Family::Mixed => ShapeFamily::Mixed,
        },
        views: a.views,
        held_out: a.held_out,
        width: a.size,
        height: a.size,
        seed: a.seed,
        points: a.points,
        point_noise: a.point_noise,
    };
    let data = synth_scene(&spec)?;
    let path = write_synth(&a.out, &data)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), a.scene_type.indoor)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.init.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    let dataset = load_dataset(&manifest_path(&a.images), a.srgb)?;
    let scene = match &a.scene {
        Some(p) if p.extension().is_some_and(|e| e == "txt") => init_from_points(&read_points(p)?, &cfg.init)?,
        Some(p) => load_checkpoint(p)?.0,
        None => {
            let pc = dataset.points.as_ref().ok_or_else(|| Error::Data("dataset has no point file; pass --scene".into()))?;
            init_from_points(pc, &cfg.init)?
        }
    };
    let mut scene = scene;
    if cfg.dome {
        let centers: Vec<[f64; 3]> = dataset.cameras.iter().map(|c| c.position()).collect();
        let n = centers.len() as f64;
        let c = centers.iter().fold([0.0; 3], |s, p| [s[0] + p[0] / n, s[1] + p[1] / n, s[2] + p[2] / n]);
        let extent = centers.iter().map(|p| fourier_splat::math::norm(fourier_splat::math::sub(*p, c))).fold(1.0, f64::max);
        add_dome(&mut scene, 10.0 * extent, c);
    }
    let densify = cfg.densify_enabled.unwrap_or(true).then_some(cfg.densify.clone());
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mut trainer = Trainer::new(scene, &dataset, cfg.train.clone(), cfg.loss.clone(), densify)?.with_output(&a.out)?;
    if let Some(r) = &a.resume {
        trainer.resume(r)?;
    }
    let every = (trainer.cfg.iterations / 20).max(1);
    while trainer.iteration < trainer.cfg.iterations {
        let row = trainer.step()?;
        if row.iteration % every == 0 {
            println!("iter {:>6}  loss {:.5}  psnr {:6.2}  live {}", row.iteration, row.loss, row.psnr, row.live);
        }
    }
    trainer.save(&a.out.join("final.ckpt"))?;
    trainer.write_log(&a.out.join("train_log.csv"))?;
    for &v in &dataset.held_out {
        let out = render(&trainer.scene, &dataset.cameras[v], &RenderConfig::default(), trainer.scene.k_active)?;
        println!("held-out view {v}: psnr {:.3}", psnr(&out.color, &dataset.images[v])?);
    }
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let (scene, _) = load_checkpoint(&a.checkpoint)?;
    let m = fourier_splat::io::read_manifest(&manifest_path(&a.images))?;
    let cam = m
        .cameras
        .get(a.camera_index)
        .ok_or_else(|| Error::Config(format!("camera index {} out of range ({} cameras)", a.camera_index, m.cameras.len())))?;
    let k = a.k.unwrap_or(scene.k_active);
    if k == 0 || k > scene.k {
        bail!(Error::Config(format!("k = {k} outside [1, {}]", scene.k)));
    }
    let out = render(&scene, cam, &RenderConfig::default(), k)?;
    write_png(&a.out, cam.width, cam.height, &out.color, a.srgb)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn lod(a: LodArgs) -> Result<()> {
    let (scene, _) = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&manifest_path(&a.images), a.srgb)?;
    let ks = if a.k.is_empty() { (1..=scene.k).collect() } else { a.k.clone() };
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > scene.k) {
        bail!(Error::Config(format!("k = {bad} outside [1, {}]", scene.k)));
    }
    let report = lod_sweep(&scene, &ds.cameras, &ds.images, &ks)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("lod.csv"), report.to_csv())?;
    for row in &report.rows {
        for (v, cam) in ds.cameras.iter().enumerate() {
            let out = render(&scene, cam, &RenderConfig::default(), row.k_active)?;
            write_png(&a.out.join(format!("k{}_view{:03}.png", row.k_active, v)), cam.width, cam.height, &out.color, a.srgb)?;
        }
    }
    print!("{}", report.to_csv());
    Ok(())
}

fn gradcheck(a: GradArgs) -> Result<ExitCode> {
    if a.primitives == 0 || a.size == 0 || !(a.eps > 0.0) {
        bail!(Error::Config("primitives, size and eps must be positive".into()));
    }
    let (scene, cam, target) = gradcheck_fixture(a.primitives, a.size, a.seed)?;
    let mode = match a.mode {
        GradMode::Hard => WindowGrad::Hard,
        GradMode::Ste => WindowGrad::Ste(SteConfig::default()),
    };
    let loss = weighted_mse(&target);
    let rep = finite_diff_check(&scene, &cam, &RenderConfig::default(), &loss, a.eps, a.mask, mode)?;
    print!("{}", rep.to_text());
    if let Some(p) = &a.csv {
        fs::write(p, rep.to_csv())?;
    }
    if let Some(tol) = a.tolerance {
        if let Some(g) = rep.groups.iter().find(|g| !(g.rel_err <= tol)) {
            eprintln!("group {} relative error {:.3e} exceeds {tol:e}", g.group, g.rel_err);
            return Ok(ExitCode::from(4));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn metrics(a: MetricsArgs) -> Result<()> {
    match (a.pred, a.target, a.checkpoint, a.images) {
        (Some(p), Some(t), None, None) => {
            let (w, h, pred) = read_png(&p, false)?;
            let (w2, h2, target) = read_png(&t, false)?;
            if (w, h) != (w2, h2) {
                return Err(Error::Data(format!("image sizes differ: {w}x{h} vs {w2}x{h2}")).into());
            }
            println!("psnr {:.4}  ssim {:.5}", psnr(&pred, &target)?, ssim(&pred, &target, w, h)?);
        }
        (None, None, Some(c), Some(i)) => {
            let (scene, _) = load_checkpoint(&c)?;
            let ds = load_dataset(&manifest_path(&i), false)?;
            let k = a.k.unwrap_or(scene.k_active);
            if k == 0 || k > scene.k {
                bail!(Error::Config(format!("k = {k} outside [1, {}]", scene.k)));
            }
            println!("view,held_out,psnr,ssim");
            for (v, (cam, img)) in ds.cameras.iter().zip(&ds.images).enumerate() {
                let out = render(&scene, cam, &RenderConfig::default(), k)?;
                let s = ssim(&out.color, img, cam.width, cam.height)?;
                println!("{v},{},{:.4},{:.5}", ds.held_out.contains(&v), psnr(&out.color, img)?, s);
            }
        }
        _ => bail!(Error::Config("pass either --pred/--target or --checkpoint/--images".into())),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::NonFinite { .. } | Error::DegenerateShape | Error::RelocationCap(_) | Error::NoDonors | Error::Contract(_)) => 4,
        Some(_) => 3,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None if err.downcast_ref::<serde_json::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => train(a).map(|_| ExitCode::SUCCESS),
        Command::Render(a) => render_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::LodSweep(a) => lod(a).map(|_| ExitCode::SUCCESS),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Metrics(a) => metrics(a).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}


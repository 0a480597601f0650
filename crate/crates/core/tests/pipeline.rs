use fourier_splat::densify::DensifyConfig;
use fourier_splat::io::*;
use fourier_splat::lod::lod_sweep;
use fourier_splat::loss::{psnr, LossConfig};
use fourier_splat::raster::{render, RenderConfig};
use fourier_splat::train::{TrainConfig, Trainer};

fn small_spec() -> SynthSpec {
    SynthSpec { primitives: 12, views: 4, held_out: 1, width: 40, height: 40, points: 64, seed: 5, ..Default::default() }
}

fn densify_cfg() -> DensifyConfig {
    DensifyConfig { interval: 40, start_iter: 40, hydra_from_iter: 80, grace_iters: 20, ..DensifyConfig::outdoor() }
}

fn train_cfg(iterations: u64) -> TrainConfig {
    TrainConfig { iterations, freq_unfreeze_iter: 30, sh_interval: 50, checkpoint_every: 60, seed: 9, ..Default::default() }
}

#[test]
fn synth_round_trips_through_disk() {
    let data = synth_scene(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synth(dir.path(), &data).unwrap();
    let ds = load_dataset(&manifest, false).unwrap();
    assert_eq!(ds.cameras, data.dataset.cameras);
    assert_eq!(ds.images, data.dataset.images);
    assert_eq!(ds.held_out, data.dataset.held_out);
    assert_eq!(ds.points.as_ref().unwrap().positions.len(), 64);
    let (gt, _) = load_checkpoint(&dir.path().join("ground_truth.ckpt")).unwrap();
    assert_eq!(gt.len(), 12);
    // the stored images are the ground truth rendered and quantized
    let out = render(&gt, &ds.cameras[0], &RenderConfig::default(), gt.k_active).unwrap();
    assert!(psnr(&out.color, &ds.images[0]).unwrap() > 45.0);
}

#[test]
fn training_with_densification_writes_logs_and_resumes_exactly() {
    let data = synth_scene(&small_spec()).unwrap();
    let pc = data.dataset.points.clone().unwrap();
    let init = init_from_points(&pc, &InitConfig { budget_max: 96, seed: 2, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mut full = Trainer::new(init.clone(), &data.dataset, train_cfg(120), LossConfig::outdoor(), Some(densify_cfg()))
        .unwrap()
        .with_output(dir.path())
        .unwrap();
    full.run().unwrap();
    let rows = &full.log;
    assert_eq!(rows.len(), 120);
    assert!(rows.iter().all(|r| r.live <= 96));
    let first: f64 = rows[..20].iter().map(|r| r.loss).sum();
    let last: f64 = rows[100..].iter().map(|r| r.loss).sum();
    assert!(last < first, "loss {first} -> {last}");
    assert!(full.scene.len() > 64, "births should grow the scene");

    let audit = std::fs::read_to_string(dir.path().join("densify.jsonl")).unwrap();
    assert!(audit.lines().count() >= 2);
    let mid = dir.path().join("iter_000060.ckpt");
    assert!(mid.exists());

    let mut resumed = Trainer::new(init, &data.dataset, train_cfg(120), LossConfig::outdoor(), Some(densify_cfg())).unwrap();
    resumed.resume(&mid).unwrap();
    resumed.run().unwrap();
    let rng = full.rng.state();
    assert_eq!(
        encode_checkpoint(&resumed.scene, &resumed.rng.state(), resumed.iteration).unwrap(),
        encode_checkpoint(&full.scene, &rng, full.iteration).unwrap()
    );
}

#[test]
fn lod_sweep_of_ground_truth_is_exact_at_full_k() {
    let data = synth_scene(&SynthSpec { family: ShapeFamily::Lobed, ..small_spec() }).unwrap();
    let rep = lod_sweep(&data.scene, &data.dataset.cameras, &data.dataset.images, &[1, 6]).unwrap();
    let full: f64 = data
        .dataset
        .cameras
        .iter()
        .zip(&data.dataset.images)
        .map(|(c, t)| psnr(&render(&data.scene, c, &RenderConfig::default(), 6).unwrap().color, t).unwrap())
        .sum::<f64>()
        / data.dataset.cameras.len() as f64;
    assert_eq!(rep.rows[1].psnr, full);
    assert!(rep.rows[0].psnr < rep.rows[1].psnr);
    assert_eq!(rep.rows[0].bytes_per_primitive, 240);
    assert_eq!(rep.rows[1].bytes_per_primitive, 280);
}

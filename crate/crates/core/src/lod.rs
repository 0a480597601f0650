//! Level of detail by rendering with fewer Fourier frequencies.

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::io::record_bytes;
use crate::loss::{psnr, ssim};
use crate::raster::{render, RenderConfig};
use crate::scene::SceneModel;
use crate::shape::truncate_shape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodRow {
    pub k_active: usize,
    /// Mean over views.
    pub psnr: f64,
    pub ssim: f64,
    pub bytes_per_primitive: usize,
    pub payload_bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LodReport {
    pub rows: Vec<LodRow>,
}

impl LodReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k_active,psnr_db,ssim,bytes_per_primitive,payload_bytes\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.6},{:.6},{},{}\n", r.k_active, r.psnr, r.ssim, r.bytes_per_primitive, r.payload_bytes));
        }
        s
    }
}

/// Copy of `scene` with every boundary cut to its first `k` frequencies.
pub fn truncate_scene(scene: &SceneModel, k: usize) -> SceneModel {
    let mut out = scene.clone();
    for p in &mut out.primitives {
        p.shape = truncate_shape(&p.shape, k);
    }
    out
}

/// Metrics of `scene` rendered with each `k` in `k_values` against `targets`.
pub fn lod_sweep(scene: &SceneModel, cameras: &[Camera], targets: &[Vec<f64>], k_values: &[usize]) -> Result<LodReport> {
    if cameras.is_empty() || cameras.len() != targets.len() {
        return Err(Error::Dimension(format!("{} cameras and {} targets", cameras.len(), targets.len())));
    }
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > scene.k) {
        return Err(Error::Config(format!("k = {bad} outside [1, {}]", scene.k)));
    }
    let cfg = RenderConfig::default();
    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let (mut p, mut s) = (0.0, 0.0);
        for (cam, target) in cameras.iter().zip(targets) {
            let out = render(scene, cam, &cfg, k)?;
            p += psnr(&out.color, target)?;
            s += ssim(&out.color, target, cam.width, cam.height)?;
        }
        let n = cameras.len() as f64;
        let per = record_bytes(k);
        rows.push(LodRow { k_active: k, psnr: p / n, ssim: s / n, bytes_per_primitive: per, payload_bytes: per * scene.len() });
    }
    Ok(LodReport { rows })
}

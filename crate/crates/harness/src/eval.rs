//! Held-out evaluation, view rendering and latent export. All three run the
//! model with the latent mean, so their outputs depend only on the
//! parameters and the dataset.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slpt_core::diffcore::checkpoint::save_tensor;
use slpt_core::diffcore::{ParamStore, Tensor};
use slpt_core::model::{self, ModelConfig, Representation, SceneInput};
use slpt_core::plvae::SampleMode;
use slpt_core::{Error, Result};

use crate::io::{write_json, write_ppm, Dataset};
use crate::train::{check_dataset, check_layout};

/// PSNR reported for a pixel-perfect image.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub view: usize,
    pub psnr_rgb: f64,
    /// Mean absolute depth error over pixels with ground-truth geometry.
    pub l1_depth_masked: f64,
    pub l1_sem: f64,
    pub depth_pixels: usize,
}

/// Per-view metrics and their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr_rgb: f64,
    pub l1_depth_masked: f64,
    pub l1_sem: f64,
    pub views: Vec<ViewReport>,
}

/// `10·log10(1 / MSE)` for values in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &[f64], target: &[f64]) -> f64 {
    let mse = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len().max(1) as f64;
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn mean_abs(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len().max(1) as f64
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn prepare(params: &ParamStore<f32>, cfg: &ModelConfig, data: &Dataset) -> Result<SceneInput<f32>> {
    check_layout(cfg, params)?;
    check_dataset(cfg, data)?;
    SceneInput::new(&data.cloud, &cfg.codec)
}

fn check_views(data: &Dataset, views: &[usize]) -> Result<()> {
    match views.iter().find(|&&k| k >= data.cameras.len()) {
        Some(k) => Err(Error::Input(format!("view {k} does not exist; the dataset has {}", data.cameras.len()))),
        None => Ok(()),
    }
}

/// Renders `views` and scores them against the dataset.
pub fn evaluate(params: &ParamStore<f32>, cfg: &ModelConfig, data: &Dataset, views: &[usize]) -> Result<EvalReport> {
    check_views(data, views)?;
    if views.is_empty() {
        return Err(Error::Input("no views to evaluate".into()));
    }
    let input = prepare(params, cfg, data)?;
    let cameras: Vec<_> = views.iter().map(|&k| data.cameras[k].clone()).collect();
    let rendered = model::render_cameras(params, cfg, &input, &cameras)?;
    let mut reports = Vec::with_capacity(views.len());
    for (&k, r) in views.iter().zip(&rendered) {
        let gt = &data.views[k];
        let depth = to_f64(&r.depth);
        let (mut err, mut count) = (0.0, 0);
        for (d, &g) in depth.iter().zip(gt.depth.data()) {
            if g > 0.0 {
                err += (d - g).abs();
                count += 1;
            }
        }
        reports.push(ViewReport {
            view: k,
            psnr_rgb: psnr(&to_f64(&r.rgb), gt.rgb.data()),
            l1_depth_masked: if count > 0 { err / count as f64 } else { 0.0 },
            l1_sem: mean_abs(&to_f64(&r.sem), gt.sem.data()),
            depth_pixels: count,
        });
    }
    let n = reports.len() as f64;
    Ok(EvalReport {
        psnr_rgb: reports.iter().map(|r| r.psnr_rgb).sum::<f64>() / n,
        l1_depth_masked: reports.iter().map(|r| r.l1_depth_masked).sum::<f64>() / n,
        l1_sem: reports.iter().map(|r| r.l1_sem).sum::<f64>() / n,
        views: reports,
    })
}

/// Writes `view_{k}_rgb.ppm` plus raw `depth [H,W]`, `alpha [H,W]`,
/// `feature [H,W,K]` and `sem [H,W,S]` tensors for view `k`.
pub fn render_view_files(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    data: &Dataset,
    k: usize,
    out: &Path,
) -> Result<()> {
    check_views(data, &[k])?;
    let input = prepare(params, cfg, data)?;
    let cam = &data.cameras[k];
    let r = model::render_cameras(params, cfg, &input, std::slice::from_ref(cam))?.remove(0);
    let (h, w) = (cam.height, cam.width);
    fs::create_dir_all(out)?;
    write_ppm(out.join(format!("view_{k}_rgb.ppm")), w, h, &r.rgb)?;
    save_tensor(out.join(format!("view_{k}_depth.bin")), &r.depth.reshape(&[h, w])?)?;
    save_tensor(out.join(format!("view_{k}_alpha.bin")), &r.alpha.reshape(&[h, w])?)?;
    let kf = r.features.cols();
    save_tensor(out.join(format!("view_{k}_feature.bin")), &r.features.reshape(&[h, w, kf])?)?;
    let s = r.sem.cols();
    save_tensor(out.join(format!("view_{k}_sem.bin")), &r.sem.reshape(&[h, w, s])?)?;
    Ok(())
}

/// Sidecar of an exported latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMeta {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "Z_f")]
    pub z_f: usize,
    pub seed: Option<u64>,
    pub mode: String,
}

/// Writes `z_f.bin`, `z_p.bin`, the posterior means `mu_f.bin`, `mu_p.bin`
/// and `latent.json` into `out`.
pub fn export_latent(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    data: &Dataset,
    mode: SampleMode,
    out: &Path,
) -> Result<Representation<f32>> {
    if !cfg.plvae_enabled {
        return Err(Error::Config("the latent VAE is disabled in this model".into()));
    }
    let input = prepare(params, cfg, data)?;
    let rep = model::extract_representation(params, cfg, &input, mode)?;
    fs::create_dir_all(out)?;
    save_tensor(out.join("z_f.bin"), &rep.z_f)?;
    save_tensor(out.join("z_p.bin"), &rep.z_p)?;
    save_tensor(out.join("mu_f.bin"), &rep.mu_f)?;
    save_tensor(out.join("mu_p.bin"), &rep.mu_p)?;
    let (seed, mode) = match mode {
        SampleMode::Stochastic { seed } => (Some(seed), "stochastic"),
        SampleMode::Deterministic => (None, "deterministic"),
    };
    let meta = LatentMeta {
        m: rep.z_f.rows(),
        z_f: rep.z_f.cols(),
        seed,
        mode: mode.into(),
    };
    write_json(out.join("latent.json"), &meta)?;
    Ok(rep)
}

//! End-to-end orchestration: render views, enhance depth, run the
//! consensus-aligned edit loop, refit the scene to the edited views, and
//! report metrics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cimln;
use crate::diffusion::{
    make_schedule, run_edit_loop, toy_predictor, Condition, LatentState, ToyEditKind,
};
use crate::error::{Error, Result};
use crate::rten;
use crate::splat::{cameras_from_json_bytes, refit_scene, render, Camera, GaussianScene, RenderOutput};
use crate::tensor::Tensor;
use crate::wavelet::AttentionParams;

/// 10*log10(peak^2 / MSE), capped at 100 dB when MSE < peak^2 * 1e-10.
pub fn compute_psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument("psnr peak must be > 0".into()));
    }
    let ad = a.data();
    let bd = b.data();
    let mse = ad
        .iter()
        .zip(bd.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / ad.len().max(1) as f64;
    if mse < peak * peak * 1e-10 {
        return Ok(100.0);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn compute_rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let ad = a.data();
    let bd = b.data();
    let mse = ad
        .iter()
        .zip(bd.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / ad.len().max(1) as f64;
    Ok(mse.sqrt())
}

/// Spread of per-view global mean color: population std across views of
/// each channel's mean, reduced by L2 norm. Lower is more consistent.
pub fn cross_view_consistency(views: &[Tensor]) -> Result<f64> {
    if views.len() < 2 {
        return Err(Error::InvalidArgument("consistency needs >= 2 views".into()));
    }
    let shape = views[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::DimMismatch(format!("views must be [C,H,W], got {:?}", shape)));
    }
    for v in views {
        if v.shape() != shape {
            return Err(Error::ShapeMismatch { left: v.shape().to_vec(), right: shape });
        }
    }
    let (c, npix) = (shape[0], shape[1] * shape[2]);
    let mut means = vec![vec![0.0f64; c]; views.len()];
    for (vi, v) in views.iter().enumerate() {
        let d = v.data();
        for ch in 0..c {
            means[vi][ch] =
                d[ch * npix..(ch + 1) * npix].iter().map(|&x| x as f64).sum::<f64>() / npix as f64;
        }
    }
    let n = views.len() as f64;
    let mut total = 0.0f64;
    for ch in 0..c {
        let mean: f64 = means.iter().map(|m| m[ch]).sum::<f64>() / n;
        let var: f64 = means.iter().map(|m| (m[ch] - mean).powi(2)).sum::<f64>() / n;
        total += var;
    }
    Ok(total.sqrt())
}

fn default_refit_steps() -> usize {
    300
}

fn default_refit_lr() -> f32 {
    0.05
}

fn default_diffusion() -> DiffusionConfig {
    DiffusionConfig::default()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> DiffusionConfig {
        DiffusionConfig { steps: 50, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// One full edit request; mirrors the job JSON schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditJob {
    pub scene: PathBuf,
    pub cameras: PathBuf,
    pub edit_tag: String,
    pub strength: f32,
    pub reference_ids: Vec<usize>,
    pub lambda: f32,
    #[serde(default = "default_diffusion")]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_refit_steps")]
    pub refit_steps: usize,
    #[serde(default = "default_refit_lr")]
    pub refit_lr: f32,
}

impl EditJob {
    pub fn from_json_bytes(bytes: &[u8]) -> Result<EditJob> {
        let job: EditJob =
            serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("job json: {}", e)))?;
        job.validate_fields()?;
        Ok(job)
    }

    /// Field-level checks that need no filesystem access.
    pub fn validate_fields(&self) -> Result<()> {
        if self.reference_ids.is_empty() {
            return Err(Error::InvalidArgument("job needs >= 1 reference view".into()));
        }
        if !(self.lambda.is_finite() && (0.0..=1.0).contains(&self.lambda)) {
            return Err(Error::InvalidArgument(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if !self.strength.is_finite() {
            return Err(Error::InvalidArgument("strength must be finite".into()));
        }
        if self.diffusion.steps == 0 || self.diffusion.steps > 10_000 {
            return Err(Error::InvalidArgument(format!(
                "diffusion steps {} out of range",
                self.diffusion.steps
            )));
        }
        if !(self.diffusion.beta_start > 0.0
            && self.diffusion.beta_end < 1.0
            && self.diffusion.beta_start <= self.diffusion.beta_end)
        {
            return Err(Error::InvalidArgument("bad beta range".into()));
        }
        self.edit_tag.parse::<ToyEditKind>()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr_db: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema: u32,
    /// Mean over views, re-rendered edited scene vs edited targets.
    pub psnr_db: f64,
    pub rmse: f64,
    pub cross_view_std: f64,
    pub per_view: Vec<ViewMetrics>,
}

/// Round-half-up quantization of a [3,H,W] tensor in [0,1] to an 8-bit PNG.
pub fn write_png(path: &Path, rgb: &Tensor) -> Result<()> {
    let s = rgb.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::DimMismatch(format!("png source must be [3,H,W], got {:?}", s)));
    }
    let (h, w) = (s[1], s[2]);
    let d = rgb.data();
    let mut pixels = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            pixels.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::InvalidArgument("png buffer size mismatch".into()))?;
    let tmp = path.with_extension("png.tmp");
    img.save_with_format(&tmp, image::ImageFormat::Png)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load an 8-bit PNG as a [3,H,W] tensor in [0,1].
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub struct EditOutcome {
    pub scene: GaussianScene,
    pub report: MetricReport,
    /// Edited target images, one per view.
    pub edited_views: Vec<Tensor>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Run the whole edit pipeline and write every artifact under `out_dir`:
/// original renders, (enhanced) depths, edited views, refit scene, report.
pub fn edit_scene(job: &EditJob) -> Result<EditOutcome> {
    stage("load", job.validate_fields())?;
    let scene = stage(
        "load",
        std::fs::read(&job.scene)
            .map_err(Error::from)
            .and_then(|b| GaussianScene::from_json_bytes(&b)),
    )?;
    let cameras = stage(
        "load",
        std::fs::read(&job.cameras)
            .map_err(Error::from)
            .and_then(|b| cameras_from_json_bytes(&b)),
    )?;
    if cameras.is_empty() {
        return Err(Error::InvalidArgument("no cameras".into()).in_stage("load"));
    }
    for &r in &job.reference_ids {
        if r >= cameras.len() {
            return Err(Error::InvalidArgument(format!(
                "reference id {} out of range for {} cameras",
                r,
                cameras.len()
            ))
            .in_stage("load"));
        }
    }
    let model = match &job.checkpoint {
        Some(dir) => Some(stage("load", cimln::load_checkpoint(dir))?),
        None => None,
    };
    std::fs::create_dir_all(&job.out_dir).map_err(|e| Error::from(e).in_stage("load"))?;

    // Stage 1: render every view.
    let renders: Vec<RenderOutput> = cameras.iter().map(|c| render(&scene, c)).collect();
    for (i, r) in renders.iter().enumerate() {
        stage("render", write_png(&job.out_dir.join(format!("orig_{:03}.png", i)), &r.rgb))?;
    }

    // Stage 2: depth conditioning, enhanced when a checkpoint is given.
    let mut depths = Vec::with_capacity(renders.len());
    for r in &renders {
        let d = match &model {
            Some(m) => stage("enhance", cimln::enhance_depth(m, &r.depth, &r.rgb))?,
            None => r.depth.clone(),
        };
        depths.push(d);
    }
    for (i, d) in depths.iter().enumerate() {
        stage("enhance", rten::write_file(&job.out_dir.join(format!("depth_{:03}.rten", i)), d))?;
    }

    // Stage 3: DDIM inversion + consensus-aligned denoising on the renders.
    let kind: ToyEditKind = job.edit_tag.parse().map_err(|e: Error| e.in_stage("edit"))?;
    let edited = {
        let sched = stage(
            "edit",
            make_schedule(job.diffusion.steps, job.diffusion.beta_start, job.diffusion.beta_end),
        )?;
        let predictor = stage("edit", toy_predictor(kind, job.strength))?;
        let latents = stage(
            "edit",
            LatentState::new(renders.iter().map(|r| r.rgb.clone()).collect()),
        )?;
        let conditions: Vec<Condition> = depths
            .iter()
            .map(|d| Condition { depth: d.clone(), edit_tag: job.edit_tag.clone() })
            .collect();
        let attn = AttentionParams::identity(3);
        stage(
            "edit",
            run_edit_loop(&latents, &job.reference_ids, &predictor, &conditions, &sched, job.lambda, &attn),
        )?
    };
    let edited_views: Vec<Tensor> =
        edited.latents.iter().map(|z| z.clamp(0.0, 1.0).expect("clamp").detach()).collect();
    for (i, v) in edited_views.iter().enumerate() {
        stage("edit", write_png(&job.out_dir.join(format!("view_{:03}.png", i)), v))?;
        stage("edit", rten::write_file(&job.out_dir.join(format!("edited_{:03}.rten", i)), v))?;
    }

    // Stage 4: refit the scene's colors and opacities to the edited views.
    let views: Vec<(Camera, Tensor)> =
        cameras.iter().cloned().zip(edited_views.iter().cloned()).collect();
    let (refit, _stats) = stage("refit", refit_scene(&scene, &views, job.refit_steps, job.refit_lr))?;
    stage(
        "refit",
        rten::write_atomic(&job.out_dir.join("scene_edited.json"), &refit.to_json_bytes()),
    )?;

    // Stage 5: re-render and score against the edited targets.
    let mut per_view = Vec::with_capacity(cameras.len());
    let mut finals = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let rr = render(&refit, cam);
        per_view.push(ViewMetrics {
            view: i,
            psnr_db: stage("metrics", compute_psnr(&rr.rgb, &edited_views[i], 1.0))?,
            rmse: stage("metrics", compute_rmse(&rr.rgb, &edited_views[i]))?,
        });
        finals.push(rr.rgb);
    }
    let n = per_view.len() as f64;
    let report = MetricReport {
        schema: 1,
        psnr_db: per_view.iter().map(|v| v.psnr_db).sum::<f64>() / n,
        rmse: per_view.iter().map(|v| v.rmse).sum::<f64>() / n,
        cross_view_std: if finals.len() >= 2 {
            stage("metrics", cross_view_consistency(&finals))?
        } else {
            0.0
        },
        per_view,
    };
    stage(
        "metrics",
        rten::write_atomic(&job.out_dir.join("report.json"), &serde_json::to_vec_pretty(&report)?),
    )?;
    Ok(EditOutcome { scene: refit, report, edited_views })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_cap_and_analytic_value() {
        let a = random_image(&[3, 8, 8], 1);
        assert_eq!(compute_psnr(&a, &a, 1.0).unwrap(), 100.0);
        // MSE 0.01 at peak 1 is exactly 20 dB
        let b = a.add_scalar(0.1).unwrap();
        let p = compute_psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "{}", p);
        assert!(compute_psnr(&a, &random_image(&[3, 4, 4], 2), 1.0).is_err());
        assert!(compute_psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn rmse_oracle_and_symmetry() {
        let a = random_image(&[3, 6, 6], 3);
        let b = random_image(&[3, 6, 6], 4);
        assert_eq!(compute_rmse(&a, &a).unwrap(), 0.0);
        let shifted = a.add_scalar(0.5).unwrap();
        assert!((compute_rmse(&a, &shifted).unwrap() - 0.5).abs() < 1e-6);
        let r = compute_rmse(&a, &b).unwrap();
        let mut acc = 0.0f64;
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            acc += (*x as f64 - *y as f64).powi(2);
        }
        let oracle = (acc / 108.0).sqrt();
        assert!((r - oracle).abs() <= 1e-7);
        assert_eq!(r, compute_rmse(&b, &a).unwrap());
    }

    #[test]
    fn consistency_zero_and_hand_case() {
        let a = random_image(&[3, 4, 4], 5);
        assert_eq!(cross_view_consistency(&[a.clone(), a.clone()]).unwrap(), 0.0);
        // means (0,0,0) and (1,1,1): per-channel std 0.5, L2 norm sqrt(3)*0.5
        let z = Tensor::zeros(&[3, 4, 4]);
        let o = Tensor::full(&[3, 4, 4], 1.0);
        let c = cross_view_consistency(&[z, o]).unwrap();
        assert!((c - 3.0f64.sqrt() * 0.5).abs() < 1e-7, "{}", c);
        assert!(cross_view_consistency(&[a]).is_err());
    }

    #[test]
    fn png_round_trip_is_lossless_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        // values already on the 8-bit grid survive the round trip exactly
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f32> = (0..3 * 16)
            .map(|_| rng.gen_range(0u32..256) as f32 / 255.0)
            .collect();
        let t = Tensor::new(&[3, 4, 4], data).unwrap();
        write_png(&path, &t).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(t.to_vec(), back.to_vec());
    }

    #[test]
    fn job_json_defaults_and_validation() {
        let job = EditJob::from_json_bytes(
            br#"{"scene":"s.json","cameras":"c.json","edit_tag":"darken","strength":0.5,
                 "reference_ids":[0],"lambda":0.5,"out_dir":"out"}"#,
        )
        .unwrap();
        assert_eq!(job.diffusion.steps, 50);
        assert_eq!(job.refit_steps, 300);
        assert_eq!(job.seed, 0);
        assert!(EditJob::from_json_bytes(b"{}").is_err());
        let bad = br#"{"scene":"s","cameras":"c","edit_tag":"nope","strength":0.5,
                       "reference_ids":[0],"lambda":0.5,"out_dir":"o"}"#;
        assert!(EditJob::from_json_bytes(bad).is_err());
        let bad_lambda = br#"{"scene":"s","cameras":"c","edit_tag":"darken","strength":0.5,
                             "reference_ids":[0],"lambda":1.5,"out_dir":"o"}"#;
        assert!(EditJob::from_json_bytes(bad_lambda).is_err());
    }

    #[test]
    fn missing_scene_reports_load_stage() {
        let dir = tempfile::tempdir().unwrap();
        let job = EditJob {
            scene: dir.path().join("missing.json"),
            cameras: dir.path().join("missing_cams.json"),
            edit_tag: "identity".into(),
            strength: 0.0,
            reference_ids: vec![0],
            lambda: 1.0,
            diffusion: DiffusionConfig::default(),
            checkpoint: None,
            out_dir: dir.path().join("out"),
            seed: 0,
            refit_steps: 1,
            refit_lr: 0.01,
        };
        match edit_scene(&job) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "load"),
            other => panic!("expected stage error, got {:?}", other.map(|_| ())),
        }
    }
}

//! `gsedit`: one binary exposing every pipeline stage as a subcommand.
//! Exit codes: 0 success, 1 runtime error, 2 usage error. Runtime errors
//! print one line to stderr: `ERROR <stage>: <message>`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use gsedit_core::cimln;
use gsedit_core::diffusion::ToyEditKind;
use gsedit_core::pipeline::{
    compute_psnr, compute_rmse, cross_view_consistency, edit_scene, read_png, write_png,
    DiffusionConfig, EditJob,
};
use gsedit_core::rten;
use gsedit_core::splat::{
    cameras_from_json_bytes, cameras_to_json_bytes, make_synthetic_scene_with, render,
    GaussianScene, Layout, SyntheticConfig,
};
use gsedit_core::tensor::{grad_check_params_ref, grad_check_ref};
use gsedit_core::wavelet::{dwt2, idwt2, WaveletPyramid};
use gsedit_core::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "gsedit", version, about = "3D Gaussian scene editing toolkit")]
struct Cli {
    /// Seed for every random choice in this invocation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Log verbosity: quiet, info, or debug.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian scene plus an orbit of cameras.
    GenScene(GenSceneArgs),
    /// Render RGB and depth for every camera of a scene.
    Render(RenderArgs),
    /// Self-supervised training of the depth enhancement network.
    TrainCimln(TrainArgs),
    /// Run a trained enhancement checkpoint on one depth map.
    EnhanceDepth(EnhanceArgs),
    /// Single-level 2D wavelet analysis of a tensor.
    Dwt(DwtArgs),
    /// Inverse of `dwt`: reassemble a tensor from its four bands.
    Idwt(IdwtArgs),
    /// Full edit pipeline: render, enhance, invert, denoise, refit.
    Edit(EditArgs),
    /// Compare two images with psnr or rmse, or score view consistency.
    Metrics(MetricsArgs),
    /// Finite-difference check of the differentiable operations.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    /// Number of Gaussians.
    #[arg(long, default_value_t = 300)]
    n: usize,
    /// Spatial arrangement: cluster, shell, or boxes.
    #[arg(long, default_value = "cluster")]
    layout: String,
    /// Number of orbit cameras.
    #[arg(long, default_value_t = 6)]
    cameras: usize,
    /// Image width in pixels.
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Output directory for scene.json and cameras.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene JSON path.
    #[arg(long)]
    scene: PathBuf,
    /// Camera list JSON path.
    #[arg(long)]
    cameras: PathBuf,
    /// Render only this view index instead of all views.
    #[arg(long)]
    view: Option<usize>,
    /// Output directory for view_NNN.png and depth_NNN.rten.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene JSON path providing the training renders.
    #[arg(long)]
    scene: PathBuf,
    /// Camera list JSON path.
    #[arg(long)]
    cameras: PathBuf,
    /// Optimization steps.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 0.004)]
    lr: f32,
    /// Feature width of both branches.
    #[arg(long, default_value_t = 16)]
    feat: usize,
    /// Mutual-learning window size (odd).
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// Depth degradation factor for the self-supervised pairs.
    #[arg(long, default_value_t = 2)]
    factor: usize,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Trained checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input depth tensor (.rten, shape [1,H,W]).
    #[arg(long)]
    depth: PathBuf,
    /// Aligned RGB image (.png).
    #[arg(long)]
    rgb: PathBuf,
    /// Output path for the enhanced depth (.rten).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DwtArgs {
    /// Input tensor (.rten, shape [C,H,W] with even H and W).
    #[arg(long)]
    input: PathBuf,
    /// Output directory for ll.rten, lh.rten, hl.rten, hh.rten.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IdwtArgs {
    /// Directory holding ll.rten, lh.rten, hl.rten, hh.rten.
    #[arg(long)]
    input: PathBuf,
    /// Output tensor path (.rten).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EditArgs {
    /// Job JSON path; other flags are ignored when set.
    #[arg(long)]
    job: Option<PathBuf>,
    /// Scene JSON path.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Camera list JSON path.
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// Edit to apply, as kind or kind:strength (e.g. hue_shift:0.3).
    #[arg(long)]
    edit: Option<String>,
    /// Comma-separated reference view ids, e.g. 0,3.
    #[arg(long, default_value = "0")]
    refs: String,
    /// Blend weight for self vs reference attention, in [0,1].
    #[arg(long, default_value_t = 0.5)]
    lambda: f32,
    /// Diffusion timesteps.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// First noise variance of the linear schedule.
    #[arg(long, default_value_t = 1e-4)]
    beta_start: f64,
    /// Last noise variance of the linear schedule.
    #[arg(long, default_value_t = 0.02)]
    beta_end: f64,
    /// Optional depth enhancement checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scene refit steps.
    #[arg(long, default_value_t = 300)]
    refit_steps: usize,
    /// Scene refit learning rate.
    #[arg(long, default_value_t = 0.05)]
    refit_lr: f32,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// First image (.png or .rten).
    #[arg(long)]
    a: PathBuf,
    /// Second image (.png or .rten).
    #[arg(long)]
    b: PathBuf,
    /// Metric: psnr, rmse, or consistency.
    #[arg(long)]
    metric: String,
    /// Peak signal value for psnr.
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-3)]
    h: f64,
    /// Failure threshold on the max relative error.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version on stdout with exit 0, usage errors on
            // stderr with exit 2
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let verbose = cli.log_level != "quiet";
    let (stage, result) = dispatch(&cli, verbose);
    match result {
        Ok(()) => 0,
        Err(e) => {
            let (stage, msg) = match &e {
                Error::Stage { stage, source } => (stage.as_str(), source.to_string()),
                other => (stage, other.to_string()),
            };
            eprintln!("ERROR {}: {}", stage, msg);
            1
        }
    }
}

fn dispatch(cli: &Cli, verbose: bool) -> (&'static str, Result<()>) {
    match &cli.command {
        Command::GenScene(a) => ("gen-scene", cmd_gen_scene(a, cli.seed, verbose)),
        Command::Render(a) => ("render", cmd_render(a, verbose)),
        Command::TrainCimln(a) => ("train", cmd_train(a, cli.seed, verbose)),
        Command::EnhanceDepth(a) => ("enhance", cmd_enhance(a)),
        Command::Dwt(a) => ("dwt", cmd_dwt(a)),
        Command::Idwt(a) => ("idwt", cmd_idwt(a)),
        Command::Edit(a) => ("edit", cmd_edit(a, cli.seed, verbose)),
        Command::Metrics(a) => ("metrics", cmd_metrics(a)),
        Command::Gradcheck(a) => ("gradcheck", cmd_gradcheck(a, cli.seed, verbose)),
    }
}

fn load_image(path: &PathBuf) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("rten") => rten::read_file(path),
        _ => read_png(path),
    }
}

fn cmd_gen_scene(a: &GenSceneArgs, seed: u64, verbose: bool) -> Result<()> {
    let layout: Layout = a.layout.parse()?;
    let mut cfg = SyntheticConfig::new(seed, a.n, layout);
    cfg.cameras = a.cameras;
    cfg.width = a.width;
    cfg.height = a.height;
    let (scene, cams) = make_synthetic_scene_with(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    rten::write_atomic(&a.out.join("scene.json"), &scene.to_json_bytes())?;
    rten::write_atomic(&a.out.join("cameras.json"), &cameras_to_json_bytes(&cams))?;
    if verbose {
        println!("wrote {} gaussians, {} cameras to {}", scene.len(), cams.len(), a.out.display());
    }
    Ok(())
}

fn cmd_render(a: &RenderArgs, verbose: bool) -> Result<()> {
    let scene = GaussianScene::from_json_bytes(&std::fs::read(&a.scene)?)?;
    let cams = cameras_from_json_bytes(&std::fs::read(&a.cameras)?)?;
    let views: Vec<usize> = match a.view {
        Some(v) if v >= cams.len() => {
            return Err(Error::InvalidArgument(format!(
                "view {} out of range for {} cameras",
                v,
                cams.len()
            )))
        }
        Some(v) => vec![v],
        None => (0..cams.len()).collect(),
    };
    std::fs::create_dir_all(&a.out)?;
    for i in views {
        let out = render(&scene, &cams[i]);
        write_png(&a.out.join(format!("view_{:03}.png", i)), &out.rgb)?;
        rten::write_file(&a.out.join(format!("depth_{:03}.rten", i)), &out.depth)?;
        if verbose {
            println!("rendered view {:03}", i);
        }
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, seed: u64, verbose: bool) -> Result<()> {
    let scene = GaussianScene::from_json_bytes(&std::fs::read(&a.scene)?)?;
    let cams = cameras_from_json_bytes(&std::fs::read(&a.cameras)?)?;
    let pairs: Vec<cimln::RenderPair> = cams
        .iter()
        .map(|c| {
            let out = render(&scene, c);
            cimln::RenderPair { depth: out.depth, rgb: out.rgb }
        })
        .collect();
    let model_cfg = cimln::CimlnConfig { feat: a.feat, window: a.window };
    let train_cfg = cimln::TrainConfig {
        steps: a.steps,
        lr: a.lr,
        downsample_factor: a.factor,
        seed,
        ..cimln::TrainConfig::default()
    };
    let (model, stats) = cimln::train_self_supervised(&pairs, &model_cfg, &train_cfg)?;
    cimln::save_checkpoint(&a.out, &model)?;
    if verbose {
        println!("loss {:.6} -> {:.6}, checkpoint in {}", stats.initial_loss, stats.best_loss, a.out.display());
    }
    Ok(())
}

fn cmd_enhance(a: &EnhanceArgs) -> Result<()> {
    let model = cimln::load_checkpoint(&a.checkpoint)?;
    let depth = rten::read_file(&a.depth)?;
    let rgb = load_image(&a.rgb)?;
    let out = cimln::enhance_depth(&model, &depth, &rgb)?;
    rten::write_file(&a.out, &out)
}

fn cmd_dwt(a: &DwtArgs) -> Result<()> {
    let x = rten::read_file(&a.input)?;
    let p = dwt2(&x)?;
    std::fs::create_dir_all(&a.out)?;
    for (name, band) in [("ll", &p.ll), ("lh", &p.lh), ("hl", &p.hl), ("hh", &p.hh)] {
        rten::write_file(&a.out.join(format!("{}.rten", name)), band)?;
    }
    Ok(())
}

fn cmd_idwt(a: &IdwtArgs) -> Result<()> {
    let band = |name: &str| rten::read_file(&a.input.join(format!("{}.rten", name)));
    let ll = band("ll")?;
    let source_shape = vec![ll.shape()[0], ll.shape()[1] * 2, ll.shape()[2] * 2];
    let p = WaveletPyramid { ll, lh: band("lh")?, hl: band("hl")?, hh: band("hh")?, source_shape };
    rten::write_file(&a.out, &idwt2(&p)?)
}

fn cmd_edit(a: &EditArgs, seed: u64, verbose: bool) -> Result<()> {
    let job = match &a.job {
        Some(path) => EditJob::from_json_bytes(&std::fs::read(path)?)?,
        None => {
            let missing = |f: &str| Error::InvalidArgument(format!("--{} required without --job", f));
            let edit = a.edit.clone().ok_or_else(|| missing("edit"))?;
            let (tag, strength) = match edit.split_once(':') {
                Some((t, s)) => (
                    t.to_string(),
                    s.parse::<f32>()
                        .map_err(|_| Error::InvalidArgument(format!("bad strength {:?}", s)))?,
                ),
                None => (edit, 0.3),
            };
            tag.parse::<ToyEditKind>()?;
            let reference_ids: Vec<usize> = a
                .refs
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::InvalidArgument(format!("bad reference id {:?}", s)))
                })
                .collect::<Result<_>>()?;
            EditJob {
                scene: a.scene.clone().ok_or_else(|| missing("scene"))?,
                cameras: a.cameras.clone().ok_or_else(|| missing("cameras"))?,
                edit_tag: tag,
                strength,
                reference_ids,
                lambda: a.lambda,
                diffusion: DiffusionConfig {
                    steps: a.steps,
                    beta_start: a.beta_start,
                    beta_end: a.beta_end,
                },
                checkpoint: a.checkpoint.clone(),
                out_dir: a.out.clone().ok_or_else(|| missing("out"))?,
                seed,
                refit_steps: a.refit_steps,
                refit_lr: a.refit_lr,
            }
        }
    };
    let outcome = edit_scene(&job)?;
    if verbose {
        println!(
            "psnr {:.2} dB, rmse {:.5}, cross-view std {:.5}",
            outcome.report.psnr_db, outcome.report.rmse, outcome.report.cross_view_std
        );
    }
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let x = load_image(&a.a)?;
    let y = load_image(&a.b)?;
    let value = match a.metric.as_str() {
        "psnr" => compute_psnr(&x, &y, a.peak)?,
        "rmse" => compute_rmse(&x, &y)?,
        "consistency" => cross_view_consistency(&[x, y])?,
        other => return Err(Error::InvalidArgument(format!("unknown metric {:?}", other))),
    };
    println!("{:?}", value);
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, seed: u64, verbose: bool) -> Result<()> {
    use gsedit_core::cimln::reference;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0f32)).collect()).expect("tensor")
    };
    let mut worst = 0.0f64;
    let mut check = |name: &str, err: f64| {
        if verbose {
            println!("{:<24} max rel err {:.3e}", name, err);
        }
        worst = worst.max(err);
    };

    let x = rand_t(&[3, 6, 6]);
    check(
        "silu",
        grad_check_ref(
            |x| x.silu()?.sum(),
            |buf| buf.iter().map(|&v| v / (1.0 + (-v).exp())).sum(),
            &x,
            a.h,
        )?,
    );
    let probe = rand_t(&[3, 6, 6]).detach();
    let probe64: Vec<f64> = probe.to_vec().iter().map(|&v| v as f64).collect();
    check(
        "softmax",
        grad_check_ref(
            |x| x.softmax(0)?.mul(&probe)?.sum(),
            |buf| {
                // softmax over the 3 channels at each of 36 positions
                let mut acc = 0.0f64;
                for p in 0..36 {
                    let vals = [buf[p], buf[36 + p], buf[72 + p]];
                    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps = vals.map(|v| (v - max).exp());
                    let sum: f64 = exps.iter().sum();
                    for c in 0..3 {
                        acc += exps[c] / sum * probe64[c * 36 + p];
                    }
                }
                acc
            },
            &x,
            a.h,
        )?,
    );
    let k = rand_t(&[2, 3, 3, 3]);
    let k64: Vec<f64> = k.to_vec().iter().map(|&v| v as f64).collect();
    check(
        "conv2d",
        grad_check_ref(
            |x| {
                let y = x.conv2d(&k, None, 1, 1, 1)?;
                y.mul(&y)?.sum()
            },
            |buf| {
                let x64 = reference::T64::new(3, 6, 6, buf.to_vec());
                let y = reference::conv2d(&x64, &k64, &[0.0, 0.0], 2, 3, 3, 1, 1);
                y.d.iter().map(|v| v * v).sum()
            },
            &x,
            a.h,
        )?,
    );

    // whole enhancement network, tiny config, random nonzero head
    let cfg = cimln::CimlnConfig { feat: 4, window: 3 };
    let model = cimln::CimlnModel::init(&cfg, seed)?;
    let depth = rand_t(&[1, 8, 8]).detach();
    let rgb = rand_t(&[3, 8, 8]).detach();
    let target = rand_t(&[1, 8, 8]).detach();
    for p in model.param_tensors() {
        let n = p.numel();
        p.set_data(&(0..n).map(|_| rng.gen_range(-0.2..0.2f32)).collect::<Vec<_>>());
    }
    let params = model.param_tensors();
    let d64 = reference::T64::from_f32(1, 8, 8, &depth.to_vec());
    let r64 = reference::T64::from_f32(3, 8, 8, &rgb.to_vec());
    let t64 = reference::T64::from_f32(1, 8, 8, &target.to_vec());
    check(
        "cimln forward+loss",
        grad_check_params_ref(
            || {
                let out = cimln::forward(&model, &depth, &rgb)?;
                cimln::loss_total(&out, &target, 1.0, 0.1)
            },
            |bufs| reference::loss(&cfg, bufs, &d64, &r64, &t64, 1.0, 0.1),
            &params,
            a.h,
        )?,
    );

    if worst > a.tol {
        return Err(Error::NonFinite(format!(
            "max relative error {:.3e} exceeds tolerance {:.1e}",
            worst, a.tol
        )));
    }
    println!("gradcheck ok, max rel err {:.3e}", worst);
    Ok(())
}

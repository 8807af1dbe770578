//! Complementary-information mutual learning for depth enhancement: a
//! depth (source) branch and an RGB (guide) branch built from simplified
//! state-space blocks, a bidirectional pixel mutual learning exchange, and
//! a residual prediction head. Training is self-supervised on
//! (downsample-then-upsample depth -> original depth) pairs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rten;
use crate::tensor::{zero_grad, Adam, AdamConfig, GradientAxis, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CimlnConfig {
    /// Feature width of both branches.
    pub feat: usize,
    /// Pixel-mutual-learning window (odd).
    pub window: usize,
}

impl Default for CimlnConfig {
    fn default() -> CimlnConfig {
        CimlnConfig { feat: 16, window: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub lambda_l1: f32,
    pub gamma_ba: f32,
    pub downsample_factor: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 200,
            lr: 4e-3,
            lambda_l1: 1.0,
            gamma_ba: 0.1,
            downsample_factor: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidArgument("training needs steps >= 1".into()));
        }
        if self.lambda_l1 < 0.0 || self.gamma_ba < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        if self.downsample_factor < 2 {
            return Err(Error::InvalidArgument("downsample factor must be >= 2".into()));
        }
        Ok(())
    }
}

/// One conv layer's parameters.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: Tensor,
    pub b: Tensor,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv {
    fn init(
        c_out: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
        pad_h: usize,
        pad_w: usize,
        rng: &mut ChaCha8Rng,
    ) -> Conv {
        let fan_in = (c_in * kh * kw) as f32;
        let limit = (1.0 / fan_in).sqrt();
        let w: Vec<f32> = (0..c_out * c_in * kh * kw)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Conv {
            w: Tensor::param(&[c_out, c_in, kh, kw], w).expect("conv weight"),
            b: Tensor::param(&[c_out], vec![0.0; c_out]).expect("conv bias"),
            pad_h,
            pad_w,
        }
    }

    fn zeros(c_out: usize, c_in: usize, kh: usize, kw: usize, pad_h: usize, pad_w: usize) -> Conv {
        Conv {
            w: Tensor::param(&[c_out, c_in, kh, kw], vec![0.0; c_out * c_in * kh * kw])
                .expect("conv weight"),
            b: Tensor::param(&[c_out], vec![0.0; c_out]).expect("conv bias"),
            pad_h,
            pad_w,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.w, Some(&self.b), 1, self.pad_h, self.pad_w)
    }
}

/// Parameters of one simplified state-space block (per branch).
#[derive(Debug, Clone)]
pub struct SsmBlock {
    pub conv2: Conv,
    pub conv1_x: Conv,
    pub conv1_y: Conv,
    /// Raw recurrence parameter; effective decay a = exp(-softplus(r)) in (0,1).
    pub r: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub linear: Conv,
}

impl SsmBlock {
    fn init(feat: usize, rng: &mut ChaCha8Rng) -> SsmBlock {
        // r = -2.2 gives a decay around 0.9
        SsmBlock {
            conv2: Conv::init(feat, feat, 3, 3, 1, 1, rng),
            conv1_x: Conv::init(feat, feat, 1, 3, 0, 1, rng),
            conv1_y: Conv::init(feat, feat, 1, 3, 0, 1, rng),
            r: Tensor::param(&[feat], (0..feat).map(|_| -2.2 + rng.gen_range(-0.3..0.3)).collect())
                .expect("ssm r"),
            b: Tensor::param(&[feat], (0..feat).map(|_| rng.gen_range(0.2..0.8)).collect())
                .expect("ssm b"),
            c: Tensor::param(&[feat], (0..feat).map(|_| rng.gen_range(0.2..0.8)).collect())
                .expect("ssm c"),
            ln_gamma: Tensor::param(&[feat], vec![1.0; feat]).expect("ln gamma"),
            ln_beta: Tensor::param(&[feat], vec![0.0; feat]).expect("ln beta"),
            linear: Conv::init(feat, feat, 1, 1, 0, 0, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub c1: Conv,
    pub c2: Conv,
}

/// Full parameter set of the enhancement network.
#[derive(Debug, Clone)]
pub struct CimlnModel {
    pub cfg: CimlnConfig,
    pub source_stem: Conv,
    pub guide_stem: Conv,
    pub source_ssm: SsmBlock,
    pub guide_ssm: SsmBlock,
    /// Projections for the two mutual-learning directions.
    pub proj_source_q: Conv,
    pub proj_guide_kv: Conv,
    pub proj_guide_q: Conv,
    pub proj_source_kv: Conv,
    pub head_in: Conv,
    pub head_res1: ResBlock,
    pub head_res2: ResBlock,
    /// Zero-initialized, so a fresh model is exactly the identity on depth.
    pub head_out: Conv,
}

impl CimlnModel {
    pub fn init(cfg: &CimlnConfig, seed: u64) -> Result<CimlnModel> {
        if cfg.feat == 0 || cfg.window % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "bad cimln config: feat {}, window {}",
                cfg.feat, cfg.window
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = cfg.feat;
        Ok(CimlnModel {
            cfg: cfg.clone(),
            source_stem: Conv::init(f, 1, 3, 3, 1, 1, &mut rng),
            guide_stem: Conv::init(f, 3, 3, 3, 1, 1, &mut rng),
            source_ssm: SsmBlock::init(f, &mut rng),
            guide_ssm: SsmBlock::init(f, &mut rng),
            proj_source_q: Conv::init(f, f, 1, 1, 0, 0, &mut rng),
            proj_guide_kv: Conv::init(f, f, 1, 1, 0, 0, &mut rng),
            proj_guide_q: Conv::init(f, f, 1, 1, 0, 0, &mut rng),
            proj_source_kv: Conv::init(f, f, 1, 1, 0, 0, &mut rng),
            head_in: Conv::init(f, 2 * f, 3, 3, 1, 1, &mut rng),
            head_res1: ResBlock {
                c1: Conv::init(f, f, 3, 3, 1, 1, &mut rng),
                c2: Conv::init(f, f, 3, 3, 1, 1, &mut rng),
            },
            head_res2: ResBlock {
                c1: Conv::init(f, f, 3, 3, 1, 1, &mut rng),
                c2: Conv::init(f, f, 3, 3, 1, 1, &mut rng),
            },
            head_out: Conv::zeros(1, f, 3, 3, 1, 1),
        })
    }

    /// Named parameter list; the order is the checkpoint layout.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let conv = |name: &str, c: &Conv, out: &mut Vec<(String, Tensor)>| {
            out.push((format!("{}.w", name), c.w.clone()));
            out.push((format!("{}.b", name), c.b.clone()));
        };
        conv("source_stem", &self.source_stem, &mut out);
        conv("guide_stem", &self.guide_stem, &mut out);
        for (prefix, blk) in [("source_ssm", &self.source_ssm), ("guide_ssm", &self.guide_ssm)] {
            conv(&format!("{}.conv2", prefix), &blk.conv2, &mut out);
            conv(&format!("{}.conv1_x", prefix), &blk.conv1_x, &mut out);
            conv(&format!("{}.conv1_y", prefix), &blk.conv1_y, &mut out);
            out.push((format!("{}.r", prefix), blk.r.clone()));
            out.push((format!("{}.b", prefix), blk.b.clone()));
            out.push((format!("{}.c", prefix), blk.c.clone()));
            out.push((format!("{}.ln_gamma", prefix), blk.ln_gamma.clone()));
            out.push((format!("{}.ln_beta", prefix), blk.ln_beta.clone()));
            conv(&format!("{}.linear", prefix), &blk.linear, &mut out);
        }
        conv("proj_source_q", &self.proj_source_q, &mut out);
        conv("proj_guide_kv", &self.proj_guide_kv, &mut out);
        conv("proj_guide_q", &self.proj_guide_q, &mut out);
        conv("proj_source_kv", &self.proj_source_kv, &mut out);
        conv("head_in", &self.head_in, &mut out);
        conv("head_res1.c1", &self.head_res1.c1, &mut out);
        conv("head_res1.c2", &self.head_res1.c2, &mut out);
        conv("head_res2.c1", &self.head_res2.c1, &mut out);
        conv("head_res2.c2", &self.head_res2.c2, &mut out);
        conv("head_out", &self.head_out, &mut out);
        out
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params().into_iter().map(|(_, t)| t).collect()
    }
}

/// The state-space block: F_t = conv2d(F); X = SiLU(conv1d(F_t));
/// Y = SiLU(conv1d(F_t)); X_t = LN(SSM(X)); out = Linear(X_t (.) Y).
/// The scan runs over the row-major pixel sequence per channel.
pub fn ssm_block(feat: &Tensor, params: &SsmBlock) -> Result<Tensor> {
    let s = feat.shape();
    if s.len() != 3 {
        return Err(Error::DimMismatch(format!("ssm_block expects [F,H,W], got {:?}", s)));
    }
    let (f, h, w) = (s[0], s[1], s[2]);
    let f_t = params.conv2.forward(feat)?;
    let seq = f_t.reshape(&[f, 1, h * w])?;
    let x = params.conv1_x.forward(&seq)?.silu()?;
    let y = params.conv1_y.forward(&seq)?.silu()?;
    let a = params.r.softplus()?.neg()?.exp()?;
    let x_scan = x.reshape(&[f, h * w])?.ssm_scan(&a, &params.b, &params.c)?;
    let x_t = x_scan.layernorm(0, &params.ln_gamma, &params.ln_beta, 1e-5)?;
    let gated = x_t.mul(&y.reshape(&[f, h * w])?)?;
    params.linear.forward(&gated.reshape(&[f, 1, h * w])?)?.reshape(&[f, h, w])
}

/// Correlation-softmax exchange after learned projections; `direction`
/// picks which branch queries the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmlDirection {
    GuideToSource,
    SourceToGuide,
}

pub fn pixel_mutual_learning(
    model: &CimlnModel,
    source_feat: &Tensor,
    guide_feat: &Tensor,
    direction: PmlDirection,
) -> Result<Tensor> {
    match direction {
        PmlDirection::GuideToSource => {
            let q = model.proj_source_q.forward(source_feat)?;
            let kv = model.proj_guide_kv.forward(guide_feat)?;
            q.pixel_mutual_learning(&kv, model.cfg.window)
        }
        PmlDirection::SourceToGuide => {
            let q = model.proj_guide_q.forward(guide_feat)?;
            let kv = model.proj_source_kv.forward(source_feat)?;
            q.pixel_mutual_learning(&kv, model.cfg.window)
        }
    }
}

fn res_block(x: &Tensor, blk: &ResBlock) -> Result<Tensor> {
    x.add(&blk.c2.forward(&blk.c1.forward(x)?.silu()?)?)
}

/// Full forward pass: predicted depth = input depth + learned residual.
pub fn forward(model: &CimlnModel, depth: &Tensor, rgb: &Tensor) -> Result<Tensor> {
    let ds = depth.shape();
    let rs = rgb.shape();
    if ds.len() != 3 || ds[0] != 1 {
        return Err(Error::DimMismatch(format!("depth must be [1,H,W], got {:?}", ds)));
    }
    if rs.len() != 3 || rs[0] != 3 || rs[1..] != ds[1..] {
        return Err(Error::ShapeMismatch { left: rs.to_vec(), right: vec![3, ds[1], ds[2]] });
    }
    let s0 = model.source_stem.forward(depth)?.silu()?;
    let g0 = model.guide_stem.forward(rgb)?.silu()?;
    let s1 = s0.add(&ssm_block(&s0, &model.source_ssm)?)?;
    let g1 = g0.add(&ssm_block(&g0, &model.guide_ssm)?)?;
    let s2 = pixel_mutual_learning(model, &s1, &g1, PmlDirection::GuideToSource)?;
    let g2 = pixel_mutual_learning(model, &s1, &g1, PmlDirection::SourceToGuide)?;
    let fused = s1.add(&s2)?.concat(&g1.add(&g2)?, 0)?;
    let h = model.head_in.forward(&fused)?.silu()?;
    let h = res_block(&h, &model.head_res1)?;
    let h = res_block(&h, &model.head_res2)?;
    let residual = model.head_out.forward(&h)?;
    depth.add(&residual)
}

/// Combined objective: lambda * MSE + gamma * boundary-aware term
/// mean(|dx out - dx target| (.) |dy out - dy target|).
pub fn loss_total(out: &Tensor, target: &Tensor, lambda: f32, gamma: f32) -> Result<Tensor> {
    if out.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            left: out.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let diff = out.sub(target)?;
    let mse = diff.mul(&diff)?.mean()?;
    let bx = out
        .spatial_gradient(GradientAxis::X)?
        .sub(&target.spatial_gradient(GradientAxis::X)?)?
        .abs()?;
    let by = out
        .spatial_gradient(GradientAxis::Y)?
        .sub(&target.spatial_gradient(GradientAxis::Y)?)?
        .abs()?;
    let ba = bx.mul(&by)?.mean()?;
    mse.scale(lambda)?.add(&ba.scale(gamma)?)
}

/// One training example: a rendered depth map with its aligned RGB view.
#[derive(Debug, Clone)]
pub struct RenderPair {
    pub depth: Tensor,
    pub rgb: Tensor,
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub initial_loss: f64,
    pub best_loss: f64,
    pub losses: Vec<f64>,
}

/// Build the degraded network input for one pair: depth down-averaged by
/// `factor` then bilinearly upsampled back to full resolution.
pub fn degrade_depth(depth: &Tensor, factor: usize) -> Result<Tensor> {
    depth.down_average(factor)?.up_bilinear(factor)
}

/// Self-supervised training: inputs are degraded depths, targets the
/// original rendered depths. Returns the lowest-loss model seen.
pub fn train_self_supervised(
    renders: &[RenderPair],
    model_cfg: &CimlnConfig,
    cfg: &TrainConfig,
) -> Result<(CimlnModel, TrainStats)> {
    cfg.validate()?;
    if renders.is_empty() {
        return Err(Error::InvalidArgument("training needs >= 1 render pair".into()));
    }
    let mut inputs = Vec::with_capacity(renders.len());
    for r in renders {
        inputs.push((degrade_depth(&r.depth, cfg.downsample_factor)?, r.rgb.clone(), r.depth.clone()));
    }

    let model = CimlnModel::init(model_cfg, cfg.seed)?;
    let params = model.param_tensors();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));

    let batch_loss = |subset: &[usize]| -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for &i in subset {
            let (input, rgb, target) = &inputs[i];
            let out = forward(&model, input, rgb)?;
            let l = loss_total(&out, target, cfg.lambda_l1, cfg.gamma_ba)?;
            acc = Some(match acc {
                Some(a) => a.add(&l)?,
                None => l,
            });
        }
        acc.unwrap().scale(1.0 / subset.len() as f32)
    };
    let all: Vec<usize> = (0..inputs.len()).collect();

    let initial_loss = batch_loss(&all)?.item() as f64;
    let mut best_loss = initial_loss;
    let mut best: Vec<Vec<f32>> = params.iter().map(|p| p.to_vec()).collect();
    let mut losses = Vec::with_capacity(cfg.steps);

    // cycle a small deterministic minibatch; track the best full-batch loss
    let batch = 2.min(inputs.len());
    for step in 0..cfg.steps {
        let subset: Vec<usize> = (0..batch).map(|k| (step * batch + k) % inputs.len()).collect();
        zero_grad(&params);
        let loss = batch_loss(&subset)?;
        let lv = loss.item() as f64;
        if !lv.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        losses.push(lv);
        loss.backward()?;
        opt.step(&params)?;

        if step % 10 == 9 || step + 1 == cfg.steps {
            let full = batch_loss(&all)?.item() as f64;
            if full < best_loss {
                best_loss = full;
                best = params.iter().map(|p| p.to_vec()).collect();
            }
        }
    }
    for (p, b) in params.iter().zip(&best) {
        p.set_data(b);
    }
    Ok((model, TrainStats { initial_loss, best_loss, losses }))
}

/// Inference: forward pass on detached parameters, output clamped to
/// [0, 1.05 * max(input depth)].
pub fn enhance_depth(model: &CimlnModel, depth: &Tensor, rgb: &Tensor) -> Result<Tensor> {
    let out = forward(model, &depth.detach(), &rgb.detach())?;
    let max_depth = depth.data().iter().cloned().fold(0.0f32, f32::max) * 1.05;
    Ok(out.clamp(0.0, max_depth.max(0.0))?.detach())
}

// ── checkpoints ──────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub config: CimlnConfig,
    pub params: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn from_bytes(bytes: &[u8]) -> Result<Manifest> {
        let m: Manifest = serde_json::from_slice(bytes)
            .map_err(|e| Error::Parse(format!("checkpoint manifest: {}", e)))?;
        if m.schema != 1 {
            return Err(Error::Parse(format!("unsupported manifest schema {}", m.schema)));
        }
        if m.config.feat == 0 || m.config.feat > 1024 || m.config.window % 2 == 0 || m.config.window > 31 {
            return Err(Error::Parse("manifest config out of range".into()));
        }
        for e in &m.params {
            if e.name.is_empty()
                || e.name.len() > 256
                || !e.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_')
            {
                return Err(Error::Parse(format!("bad parameter name {:?}", e.name)));
            }
            let numel: usize = e.shape.iter().product();
            if e.shape.len() > 8 || numel > (1 << 26) {
                return Err(Error::Parse(format!("parameter {} shape too large", e.name)));
            }
        }
        Ok(m)
    }
}

/// Write the model as a directory of .rten tensors plus manifest.json.
pub fn save_checkpoint(dir: &Path, model: &CimlnModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let params = model.params();
    let manifest = Manifest {
        schema: 1,
        config: model.cfg.clone(),
        params: params
            .iter()
            .map(|(name, t)| ManifestEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    rten::write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    for (name, t) in &params {
        rten::write_file(&dir.join(format!("{}.rten", name)), t)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<CimlnModel> {
    let manifest = Manifest::from_bytes(&std::fs::read(dir.join("manifest.json"))?)?;
    let model = CimlnModel::init(&manifest.config, 0)?;
    let params = model.params();
    if manifest.params.len() != params.len() {
        return Err(Error::Parse(format!(
            "manifest lists {} parameters, model has {}",
            manifest.params.len(),
            params.len()
        )));
    }
    for ((name, tensor), entry) in params.iter().zip(&manifest.params) {
        if name != &entry.name {
            return Err(Error::Parse(format!(
                "manifest parameter {:?} does not match expected {:?}",
                entry.name, name
            )));
        }
        let loaded = rten::read_file(&dir.join(format!("{}.rten", name)))?;
        if loaded.shape() != tensor.shape() || loaded.shape() != entry.shape {
            return Err(Error::Parse(format!("parameter {:?} has wrong shape", name)));
        }
        tensor.set_data(&loaded.data());
    }
    Ok(model)
}

pub mod reference {
    //! Independent 64-bit forward of the network and loss, written against
    //! plain slices instead of the tape. The finite-difference gradient
    //! oracle evaluates this (an f32 forward drowns h=1e-3 differences in
    //! rounding noise), and tests cross-check it against the tape forward.

    use super::CimlnConfig;

    /// Row-major [C,H,W] buffer.
    #[derive(Clone)]
    pub struct T64 {
        pub c: usize,
        pub h: usize,
        pub w: usize,
        pub d: Vec<f64>,
    }

    impl T64 {
        pub fn new(c: usize, h: usize, w: usize, d: Vec<f64>) -> T64 {
            assert_eq!(d.len(), c * h * w);
            T64 { c, h, w, d }
        }

        pub fn from_f32(c: usize, h: usize, w: usize, d: &[f32]) -> T64 {
            T64::new(c, h, w, d.iter().map(|&v| v as f64).collect())
        }
    }

    fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    fn silu(x: &mut T64) {
        for v in &mut x.d {
            *v *= sigmoid(*v);
        }
    }

    fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    pub fn conv2d(
        x: &T64,
        w: &[f64],
        b: &[f64],
        c_out: usize,
        kh: usize,
        kw: usize,
        ph: usize,
        pw: usize,
    ) -> T64 {
        let (ci, h, wd) = (x.c, x.h, x.w);
        assert_eq!(w.len(), c_out * ci * kh * kw);
        let oh = h + 2 * ph + 1 - kh;
        let ow = wd + 2 * pw + 1 - kw;
        let mut out = vec![0.0f64; c_out * oh * ow];
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for cin in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy + ky;
                                let ix = ox + kx;
                                if iy < ph || ix < pw {
                                    continue;
                                }
                                let (iy, ix) = (iy - ph, ix - pw);
                                if iy >= h || ix >= wd {
                                    continue;
                                }
                                acc += w[((co * ci + cin) * kh + ky) * kw + kx]
                                    * x.d[(cin * h + iy) * wd + ix];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        T64::new(c_out, oh, ow, out)
    }

    fn add(a: &T64, b: &T64) -> T64 {
        let d = a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect();
        T64::new(a.c, a.h, a.w, d)
    }

    /// Consumes parameter buffers in the fixed checkpoint order.
    struct Feed<'a> {
        v: &'a [Vec<f64>],
        i: usize,
    }

    impl<'a> Feed<'a> {
        fn next(&mut self) -> &'a [f64] {
            let out = &self.v[self.i];
            self.i += 1;
            out
        }
    }

    fn ssm_block(feat: &T64, p: &mut Feed, f: usize) -> T64 {
        let (h, w) = (feat.h, feat.w);
        let l = h * w;
        let f_t = conv2d(feat, p.next(), p.next(), f, 3, 3, 1, 1);
        let seq = T64::new(f, 1, l, f_t.d.clone());
        let mut x = conv2d(&seq, p.next(), p.next(), f, 1, 3, 0, 1);
        let mut y = conv2d(&seq, p.next(), p.next(), f, 1, 3, 0, 1);
        silu(&mut x);
        silu(&mut y);
        let (r, b, c) = (p.next(), p.next(), p.next());
        let mut scan = vec![0.0f64; f * l];
        for ch in 0..f {
            let a = (-softplus(r[ch])).exp();
            let mut hs = 0.0f64;
            for k in 0..l {
                hs = a * hs + b[ch] * x.d[ch * l + k];
                scan[ch * l + k] = c[ch] * hs;
            }
        }
        let (gamma, beta) = (p.next(), p.next());
        let mut normed = vec![0.0f64; f * l];
        for k in 0..l {
            let mut mean = 0.0f64;
            for ch in 0..f {
                mean += scan[ch * l + k];
            }
            mean /= f as f64;
            let mut var = 0.0f64;
            for ch in 0..f {
                let d = scan[ch * l + k] - mean;
                var += d * d;
            }
            var /= f as f64;
            let ivar = 1.0 / (var + 1e-5f32 as f64).sqrt();
            for ch in 0..f {
                normed[ch * l + k] =
                    gamma[ch] * ((scan[ch * l + k] - mean) * ivar) + beta[ch];
            }
        }
        for (n, yv) in normed.iter_mut().zip(&y.d) {
            *n *= yv;
        }
        let gated = T64::new(f, 1, l, normed);
        let lin = conv2d(&gated, p.next(), p.next(), f, 1, 1, 0, 0);
        T64::new(f, h, w, lin.d)
    }

    pub fn pixel_mutual_learning(q: &T64, n: &T64, window: usize) -> T64 {
        let (c, h, w) = (q.c, q.h, q.w);
        let r = (window / 2) as i32;
        let mut out = vec![0.0f64; c * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut scores = Vec::with_capacity(window * window);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                        let s = if ny >= 0 && ny < h as i32 && nx >= 0 && nx < w as i32 {
                            (0..c)
                                .map(|ch| {
                                    q.d[(ch * h + y) * w + x]
                                        * n.d[(ch * h + ny as usize) * w + nx as usize]
                                })
                                .sum::<f64>()
                        } else {
                            0.0
                        };
                        scores.push(s);
                    }
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    let mut m = 0usize;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                            if ny >= 0 && ny < h as i32 && nx >= 0 && nx < w as i32 {
                                acc += exps[m] / sum
                                    * n.d[(ch * h + ny as usize) * w + nx as usize];
                            }
                            m += 1;
                        }
                    }
                    out[(ch * h + y) * w + x] = acc;
                }
            }
        }
        T64::new(c, h, w, out)
    }

    /// Full forward; `params` must be the model parameters in `params()`
    /// order, converted to f64.
    pub fn forward(cfg: &CimlnConfig, params: &[Vec<f64>], depth: &T64, rgb: &T64) -> T64 {
        let f = cfg.feat;
        let mut p = Feed { v: params, i: 0 };
        let mut s0 = conv2d(depth, p.next(), p.next(), f, 3, 3, 1, 1);
        let mut g0 = conv2d(rgb, p.next(), p.next(), f, 3, 3, 1, 1);
        silu(&mut s0);
        silu(&mut g0);
        let s1 = add(&s0, &ssm_block(&s0, &mut p, f));
        let g1 = add(&g0, &ssm_block(&g0, &mut p, f));
        let q_s = conv2d(&s1, p.next(), p.next(), f, 1, 1, 0, 0);
        let kv_g = conv2d(&g1, p.next(), p.next(), f, 1, 1, 0, 0);
        let q_g = conv2d(&g1, p.next(), p.next(), f, 1, 1, 0, 0);
        let kv_s = conv2d(&s1, p.next(), p.next(), f, 1, 1, 0, 0);
        let s2 = pixel_mutual_learning(&q_s, &kv_g, cfg.window);
        let g2 = pixel_mutual_learning(&q_g, &kv_s, cfg.window);
        let mut fused_d = add(&s1, &s2).d;
        fused_d.extend(add(&g1, &g2).d);
        let fused = T64::new(2 * f, depth.h, depth.w, fused_d);
        let mut hd = conv2d(&fused, p.next(), p.next(), f, 3, 3, 1, 1);
        silu(&mut hd);
        for _ in 0..2 {
            let mut t = conv2d(&hd, p.next(), p.next(), f, 3, 3, 1, 1);
            silu(&mut t);
            hd = add(&hd, &conv2d(&t, p.next(), p.next(), f, 3, 3, 1, 1));
        }
        let res = conv2d(&hd, p.next(), p.next(), 1, 3, 3, 1, 1);
        add(depth, &res)
    }

    /// Forward plus the training objective, all in 64-bit.
    pub fn loss(
        cfg: &CimlnConfig,
        params: &[Vec<f64>],
        depth: &T64,
        rgb: &T64,
        target: &T64,
        lambda: f64,
        gamma: f64,
    ) -> f64 {
        let out = forward(cfg, params, depth, rgb);
        let (h, w) = (out.h, out.w);
        let n = (h * w) as f64;
        let mut mse = 0.0f64;
        let mut ba = 0.0f64;
        let gx = |v: &[f64], y: usize, x: usize| if x + 1 < w { v[y * w + x + 1] - v[y * w + x] } else { 0.0 };
        let gy = |v: &[f64], y: usize, x: usize| if y + 1 < h { v[(y + 1) * w + x] - v[y * w + x] } else { 0.0 };
        for y in 0..h {
            for x in 0..w {
                let d = out.d[y * w + x] - target.d[y * w + x];
                mse += d * d;
                ba += (gx(&out.d, y, x) - gx(&target.d, y, x)).abs()
                    * (gy(&out.d, y, x) - gy(&target.d, y, x)).abs();
            }
        }
        lambda * mse / n + gamma * ba / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> CimlnConfig {
        CimlnConfig { feat: 4, window: 3 }
    }

    fn random_pair(h: usize, w: usize, seed: u64) -> RenderPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RenderPair {
            depth: Tensor::new(&[1, h, w], (0..h * w).map(|_| rng.gen_range(0.0..4.0)).collect())
                .unwrap(),
            rgb: Tensor::new(&[3, h, w], (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
                .unwrap(),
        }
    }

    #[test]
    fn zero_input_gives_zero_ssm_block_output() {
        let model = CimlnModel::init(&tiny_cfg(), 1).unwrap();
        // zero out biases already zero; beta zero, gamma one by init
        let zero = Tensor::zeros(&[4, 6, 6]);
        let out = ssm_block(&zero, &model.source_ssm).unwrap();
        assert!(out.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn memoryless_scan_when_decay_is_zero() {
        // a = 0 (r very large) reduces the scan to y = c*b*x
        let feat = 2usize;
        let x = Tensor::new(&[feat, 4], vec![1.0, -2.0, 3.0, 0.5, 0.2, 0.4, -0.6, 1.5]).unwrap();
        let a = Tensor::zeros(&[feat]);
        let b = Tensor::new(&[feat], vec![0.5, 2.0]).unwrap();
        let c = Tensor::new(&[feat], vec![3.0, 0.25]).unwrap();
        let y = x.ssm_scan(&a, &b, &c).unwrap();
        for ch in 0..feat {
            for k in 0..4 {
                let expect = c.data()[ch] * b.data()[ch] * x.data()[ch * 4 + k];
                assert!((y.data()[ch * 4 + k] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn scan_matches_explicit_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(&[1, 16], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (a, b, c) = (0.85f32, 0.6f32, 1.2f32);
        let y = x
            .ssm_scan(
                &Tensor::new(&[1], vec![a]).unwrap(),
                &Tensor::new(&[1], vec![b]).unwrap(),
                &Tensor::new(&[1], vec![c]).unwrap(),
            )
            .unwrap();
        let mut h = 0.0f64;
        for k in 0..16 {
            h = a as f64 * h + b as f64 * x.data()[k] as f64;
            let expect = c as f64 * h;
            assert!((y.data()[k] as f64 - expect).abs() <= 1e-5);
        }
    }

    #[test]
    fn pml_constant_neighborhood_passes_through() {
        // constant guide: weighted mean of a constant is the constant
        let model = CimlnModel::init(&tiny_cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::new(&[4, 5, 5], (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let kv = Tensor::full(&[4, 5, 5], 0.37);
        // bypass projections: call the primitive directly
        let out = q.pixel_mutual_learning(&kv, model.cfg.window).unwrap();
        // interior pixels have a full window of the constant
        for c in 0..4 {
            for y in 1..4 {
                for x in 1..4 {
                    let v = out.data()[(c * 5 + y) * 5 + x];
                    assert!((v - 0.37).abs() < 1e-6, "{}", v);
                }
            }
        }
    }

    #[test]
    fn pml_weights_sum_to_one_via_uniform_case() {
        // orthogonal query => all correlations equal => output = window mean
        let q = Tensor::zeros(&[2, 3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kv =
            Tensor::new(&[2, 3, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let out = q.pixel_mutual_learning(&kv, 3).unwrap();
        // center pixel: mean of the full 3x3 window
        for c in 0..2 {
            let mut mean = 0.0f32;
            for i in 0..9 {
                mean += kv.data()[c * 9 + i];
            }
            mean /= 9.0;
            assert!((out.data()[c * 9 + 4] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn pml_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = 2usize;
        let (h, w) = (5usize, 5usize);
        let q = Tensor::new(&[f, h, w], (0..f * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let n = Tensor::new(&[f, h, w], (0..f * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let out = q.pixel_mutual_learning(&n, 3).unwrap();
        let qd = q.data();
        let nd = n.data();
        for y in 0..h {
            for x in 0..w {
                let mut scores = Vec::new();
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                        let s = if ny >= 0 && ny < h as i32 && nx >= 0 && nx < w as i32 {
                            (0..f)
                                .map(|c| {
                                    qd[c * h * w + y * w + x] as f64
                                        * nd[(c * h + ny as usize) * w + nx as usize] as f64
                                })
                                .sum::<f64>()
                        } else {
                            0.0
                        };
                        scores.push(s);
                    }
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for c in 0..f {
                    let mut expect = 0.0f64;
                    let mut m = 0usize;
                    for dy in -1i32..=1 {
                        for dx in -1i32..=1 {
                            let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                            if ny >= 0 && ny < h as i32 && nx >= 0 && nx < w as i32 {
                                expect += exps[m] / sum
                                    * nd[(c * h + ny as usize) * w + nx as usize] as f64;
                            }
                            m += 1;
                        }
                    }
                    let got = out.data()[(c * h + y) * w + x] as f64;
                    assert!((got - expect).abs() <= 1e-5, "{} vs {}", got, expect);
                }
            }
        }
    }

    #[test]
    fn fresh_model_is_identity_on_depth() {
        let model = CimlnModel::init(&tiny_cfg(), 7).unwrap();
        for (h, w) in [(8usize, 8usize), (16, 16), (33, 33)] {
            let pair = random_pair(h, w, 11);
            let out = forward(&model, &pair.depth, &pair.rgb).unwrap();
            assert_eq!(out.shape(), pair.depth.shape());
            for (a, b) in out.data().iter().zip(pair.depth.data().iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn loss_zero_iff_equal_and_constant_offset() {
        let pair = random_pair(8, 8, 13);
        let l = loss_total(&pair.depth, &pair.depth, 1.0, 0.1).unwrap();
        assert_eq!(l.item(), 0.0);
        let shifted = pair.depth.add_scalar(0.5).unwrap();
        let l = loss_total(&shifted, &pair.depth, 2.0, 0.1).unwrap();
        // gradients kill constants: loss = lambda * 0.25
        assert!((l.item() - 0.5).abs() < 1e-5, "{}", l.item());
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let a = random_pair(6, 6, 17).depth;
        let b = random_pair(6, 6, 19).depth;
        let (lambda, gamma) = (0.7f64, 0.3f64);
        let l = loss_total(&a, &b, lambda as f32, gamma as f32).unwrap().item() as f64;
        let (h, w) = (6usize, 6usize);
        let ad = a.data();
        let bd = b.data();
        let mut mse = 0.0f64;
        let mut ba = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let d = ad[i] as f64 - bd[i] as f64;
                mse += d * d;
                let gx = |v: &[f32], y: usize, x: usize| {
                    if x + 1 < w { (v[y * w + x + 1] - v[y * w + x]) as f64 } else { 0.0 }
                };
                let gy = |v: &[f32], y: usize, x: usize| {
                    if y + 1 < h { (v[(y + 1) * w + x] - v[y * w + x]) as f64 } else { 0.0 }
                };
                ba += (gx(&ad, y, x) - gx(&bd, y, x)).abs() * (gy(&ad, y, x) - gy(&bd, y, x)).abs();
            }
        }
        let expect = lambda * mse / 36.0 + gamma * ba / 36.0;
        assert!((l - expect).abs() <= 1e-6, "{} vs {}", l, expect);
    }

    #[test]
    fn enhance_is_identity_for_untrained_model_and_handles_zeros() {
        let model = CimlnModel::init(&tiny_cfg(), 23).unwrap();
        let mut depth = vec![0.0f32; 64];
        for (i, d) in depth.iter_mut().enumerate() {
            if i % 3 == 0 {
                *d = 2.0 + i as f32 * 0.01;
            }
        }
        let depth = Tensor::new(&[1, 8, 8], depth).unwrap();
        let rgb = Tensor::zeros(&[3, 8, 8]);
        let out = enhance_depth(&model, &depth, &rgb).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
        for (a, b) in out.data().iter().zip(depth.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn one_step_training_returns_finite_model() {
        let pairs: Vec<RenderPair> = (0..2).map(|i| random_pair(8, 8, 100 + i)).collect();
        let cfg = TrainConfig { steps: 1, ..TrainConfig::default() };
        let (model, stats) = train_self_supervised(&pairs, &tiny_cfg(), &cfg).unwrap();
        assert!(stats.initial_loss.is_finite());
        assert!(model.param_tensors().iter().all(|p| p.data().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn training_is_deterministic_for_fixed_seed() {
        let pairs: Vec<RenderPair> = (0..2).map(|i| random_pair(8, 8, 200 + i)).collect();
        let cfg = TrainConfig { steps: 5, ..TrainConfig::default() };
        let (m1, _) = train_self_supervised(&pairs, &tiny_cfg(), &cfg).unwrap();
        let (m2, _) = train_self_supervised(&pairs, &tiny_cfg(), &cfg).unwrap();
        for (a, b) in m1.param_tensors().iter().zip(m2.param_tensors().iter()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn training_rejects_indivisible_sizes() {
        let pairs = vec![random_pair(9, 9, 5)];
        let cfg = TrainConfig::default();
        assert!(train_self_supervised(&pairs, &tiny_cfg(), &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = vec![random_pair(8, 8, 31)];
        let cfg = TrainConfig { steps: 3, ..TrainConfig::default() };
        let (model, _) = train_self_supervised(&pairs, &tiny_cfg(), &cfg).unwrap();
        save_checkpoint(dir.path(), &model).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        for ((n1, p1), (n2, p2)) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.to_vec(), p2.to_vec(), "param {}", n1);
        }
    }

    #[test]
    fn manifest_rejects_garbage() {
        assert!(Manifest::from_bytes(b"not json").is_err());
        assert!(Manifest::from_bytes(b"{\"schema\":2,\"config\":{\"feat\":4,\"window\":3},\"params\":[]}").is_err());
        assert!(Manifest::from_bytes(
            b"{\"schema\":1,\"config\":{\"feat\":4,\"window\":3},\"params\":[{\"name\":\"../evil\",\"shape\":[1]}]}"
        )
        .is_err());
    }
}

//! Deterministic DDIM inversion and denoising with a wavelet-consensus
//! alignment hook, plus pluggable toy noise predictors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet::{blend_attention, wca, AttentionParams};

/// Cumulative noise schedule: alpha_bar[0] = 1, strictly decreasing, all
/// values in (0,1].
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }
}

/// Linear-beta schedule; alpha_bar is the running product of (1 - beta).
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_steps < 1 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "betas must satisfy 0 < start <= end < 1, got {} and {}",
            beta_start, beta_end
        )));
    }
    let mut alpha_bar = Vec::with_capacity(t_steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0f64;
    for t in 0..t_steps {
        let beta = if t_steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * t as f64 / (t_steps - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    Ok(DiffusionSchedule { alpha_bar })
}

fn ddim_transfer(z: &Tensor, e: &Tensor, ab_from: f64, ab_to: f64) -> Result<Tensor> {
    if z.shape() != e.shape() {
        return Err(Error::ShapeMismatch {
            left: z.shape().to_vec(),
            right: e.shape().to_vec(),
        });
    }
    // z_to = sqrt(ab_to) * z0_hat + sqrt(1 - ab_to) * e,
    // z0_hat = (z - sqrt(1 - ab_from) * e) / sqrt(ab_from)
    let c_z = (ab_to / ab_from).sqrt();
    let c_e = (1.0 - ab_to).sqrt() - (ab_to / ab_from).sqrt() * (1.0 - ab_from).sqrt();
    let zd = z.data();
    let ed = e.data();
    let out: Vec<f32> = zd
        .iter()
        .zip(ed.iter())
        .map(|(&zv, &ev)| (c_z * zv as f64 + c_e * ev as f64) as f32)
        .collect();
    drop(zd);
    drop(ed);
    Tensor::new(z.shape(), out)
}

/// One DDIM inversion step t -> t+1.
pub fn ddim_invert_step(z_t: &Tensor, e: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<Tensor> {
    if t + 1 > sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "invert step t={} out of range for T={}",
            t,
            sched.steps()
        )));
    }
    ddim_transfer(z_t, e, sched.alpha_bar[t], sched.alpha_bar[t + 1])
}

/// One DDIM denoising step t -> t-1; the exact algebraic inverse of
/// `ddim_invert_step` when the same noise estimate is used.
pub fn ddim_denoise_step(
    z_t: &Tensor,
    e_hat: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    if t < 1 || t > sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "denoise step t={} out of range for T={}",
            t,
            sched.steps()
        )));
    }
    ddim_transfer(z_t, e_hat, sched.alpha_bar[t], sched.alpha_bar[t - 1])
}

/// Conditioning passed to a noise predictor: the (enhanced) depth map for
/// the view plus the edit tag.
#[derive(Debug, Clone)]
pub struct Condition {
    pub depth: Tensor,
    pub edit_tag: String,
}

pub trait NoisePredictor {
    /// Deterministic noise estimate, same shape as `z`.
    fn predict(&self, z: &Tensor, t: usize, condition: &Condition) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyEditKind {
    Identity,
    HueShift,
    Darken,
    Sharpen,
}

impl std::str::FromStr for ToyEditKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<ToyEditKind> {
        match s {
            "identity" => Ok(ToyEditKind::Identity),
            "hue_shift" => Ok(ToyEditKind::HueShift),
            "darken" => Ok(ToyEditKind::Darken),
            "sharpen" => Ok(ToyEditKind::Sharpen),
            other => Err(Error::InvalidArgument(format!("unknown edit kind {:?}", other))),
        }
    }
}

impl ToyEditKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ToyEditKind::Identity => "identity",
            ToyEditKind::HueShift => "hue_shift",
            ToyEditKind::Darken => "darken",
            ToyEditKind::Sharpen => "sharpen",
        }
    }
}

/// Deterministic stand-in for a text-conditioned noise predictor. With the
/// "identity" tag (used during inversion) it predicts zero noise, which
/// makes invert/denoise an exact round trip. Edit kinds predict a noise
/// offset whose denoised fixed point applies the named global change; the
/// latent-dependent term is what lets consensus attention act on the
/// prediction.
pub struct ToyPredictor {
    pub kind: ToyEditKind,
    pub strength: f32,
}

/// Weight of the latent feedback term in the toy edits.
const CONSENSUS_COEFF: f32 = 0.2;

pub fn toy_predictor(kind: ToyEditKind, strength: f32) -> Result<ToyPredictor> {
    if !strength.is_finite() {
        return Err(Error::InvalidArgument("strength must be finite".into()));
    }
    Ok(ToyPredictor { kind, strength })
}

impl ToyPredictor {
    fn depth_normalized(&self, cond: &Condition) -> Vec<f32> {
        let d = cond.depth.data();
        let max = d.iter().cloned().fold(0.0f32, f32::max).max(1e-6);
        d.iter().map(|&v| v / max).collect()
    }
}

impl NoisePredictor for ToyPredictor {
    fn predict(&self, z: &Tensor, _t: usize, condition: &Condition) -> Result<Tensor> {
        let s = z.shape();
        if condition.edit_tag == "identity" || self.kind == ToyEditKind::Identity {
            return Ok(Tensor::zeros(s));
        }
        if s.len() != 3 {
            return Err(Error::DimMismatch(format!("latent must be [C,H,W], got {:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let npix = h * w;
        if condition.depth.shape() != [1, h, w] {
            return Err(Error::ShapeMismatch {
                left: condition.depth.shape().to_vec(),
                right: vec![1, h, w],
            });
        }
        let zd = z.data();
        let mut out = vec![0.0f32; c * npix];
        match self.kind {
            ToyEditKind::Identity => unreachable!(),
            ToyEditKind::Darken => {
                // deeper pixels darken more; depth-conditioned by design
                let dn = self.depth_normalized(condition);
                for ch in 0..c {
                    for p in 0..npix {
                        out[ch * npix + p] =
                            self.strength * (dn[p] - CONSENSUS_COEFF * zd[ch * npix + p]);
                    }
                }
            }
            ToyEditKind::HueShift => {
                let dir = [-1.0f32, 0.3, 0.7];
                let dn = self.depth_normalized(condition);
                for ch in 0..c {
                    let d = dir[ch % 3];
                    for p in 0..npix {
                        // mild depth modulation keeps the edit conditioned
                        let gate = 0.5 + 0.5 * dn[p];
                        out[ch * npix + p] = self.strength
                            * (d * gate - CONSENSUS_COEFF * zd[ch * npix + p]);
                    }
                }
            }
            ToyEditKind::Sharpen => {
                // boost the difference from the 3x3 box blur
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = 0.0f32;
                            let mut cnt = 0.0f32;
                            for dy in -1i32..=1 {
                                for dx in -1i32..=1 {
                                    let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                                    if ny >= 0 && ny < h as i32 && nx >= 0 && nx < w as i32 {
                                        acc += zd[ch * npix + ny as usize * w + nx as usize];
                                        cnt += 1.0;
                                    }
                                }
                            }
                            let hi = zd[ch * npix + y * w + x] - acc / cnt;
                            out[ch * npix + y * w + x] = -self.strength * hi;
                        }
                    }
                }
            }
        }
        Tensor::new(s, out)
    }
}

/// Per-view latents at a common timestep.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub latents: Vec<Tensor>,
    pub t: usize,
}

impl LatentState {
    pub fn new(latents: Vec<Tensor>) -> Result<LatentState> {
        if latents.is_empty() {
            return Err(Error::InvalidArgument("latent state needs >= 1 view".into()));
        }
        let shape = latents[0].shape().to_vec();
        for l in &latents {
            if l.shape() != shape {
                return Err(Error::ShapeMismatch {
                    left: l.shape().to_vec(),
                    right: shape,
                });
            }
        }
        Ok(LatentState { latents, t: 0 })
    }
}

/// Two-phase DDIM edit: invert every view to z_T under the identity
/// conditioning, then denoise back under the edit conditioning with the
/// blended wavelet consensus attention aligning each view's latent before
/// the noise prediction. Reference views always use pure self-attention.
pub fn run_edit_loop(
    views: &LatentState,
    reference_ids: &[usize],
    predictor: &dyn NoisePredictor,
    conditions: &[Condition],
    sched: &DiffusionSchedule,
    lambda: f32,
    attn: &AttentionParams,
) -> Result<LatentState> {
    if reference_ids.is_empty() {
        return Err(Error::InvalidArgument("reference_ids must be non-empty".into()));
    }
    let n = views.latents.len();
    for &r in reference_ids {
        if r >= n {
            return Err(Error::InvalidArgument(format!("reference id {} out of range", r)));
        }
    }
    if conditions.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} conditions for {} views",
            conditions.len(),
            n
        )));
    }
    let t_steps = sched.steps();

    // Phase 1: inversion under the identity tag.
    let mut latents: Vec<Tensor> = Vec::with_capacity(n);
    for (z0, cond) in views.latents.iter().zip(conditions) {
        let invert_cond = Condition { depth: cond.depth.clone(), edit_tag: "identity".into() };
        let mut z = z0.clone();
        for t in 0..t_steps {
            let e = predictor.predict(&z, t, &invert_cond)?;
            z = ddim_invert_step(&z, &e, t, sched)?;
        }
        latents.push(z);
    }

    // Phase 2: phase-synchronous denoising with consensus alignment.
    for t in (1..=t_steps).rev() {
        let mut noise = Vec::with_capacity(n);
        for i in 0..n {
            let a_self = wca(&latents[i], &latents[i], attn)?;
            let aligned = if reference_ids.contains(&i) {
                a_self
            } else {
                let crosses: Vec<Tensor> = reference_ids
                    .iter()
                    .map(|&j| wca(&latents[i], &latents[j], attn))
                    .collect::<Result<_>>()?;
                blend_attention(&a_self, &crosses, lambda)?
            };
            noise.push(predictor.predict(&aligned, t, &conditions[i])?);
        }
        for i in 0..n {
            latents[i] = ddim_denoise_step(&latents[i], &noise[i], t, sched)?;
        }
    }
    for z in &latents {
        if z.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("edit loop latent".into()));
        }
    }
    Ok(LatentState { latents, t: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn schedule_basics() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar, vec![1.0, 0.5]);
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        assert_eq!(s.steps(), 50);
        for w in s.alpha_bar.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(*s.alpha_bar.last().unwrap() > 0.0);
    }

    #[test]
    fn schedule_matches_running_product_oracle() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let mut acc = 1.0f64;
        for t in 0..50usize {
            let beta = 1e-4 + (0.02 - 1e-4) * t as f64 / 49.0;
            acc *= 1.0 - beta;
            assert!((s.alpha_bar[t + 1] - acc).abs() <= 1e-10);
        }
    }

    #[test]
    fn schedule_rejects_bad_params() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn invert_with_zero_noise_rescales() {
        // ab_0 = 1, ab_1 = 0.25 -> z_1 = 0.5 z_0
        let sched = DiffusionSchedule { alpha_bar: vec![1.0, 0.25] };
        let z = Tensor::new(&[2], vec![2.0, -4.0]).unwrap();
        let e = Tensor::zeros(&[2]);
        let z1 = ddim_invert_step(&z, &e, 0, &sched).unwrap();
        assert_eq!(z1.to_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn degenerate_schedule_is_identity() {
        let sched = DiffusionSchedule { alpha_bar: vec![1.0, 0.5, 0.5] };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_tensor(&[4], &mut rng);
        let e = random_tensor(&[4], &mut rng);
        let z2 = ddim_invert_step(&z, &e, 1, &sched).unwrap();
        for (a, b) in z.data().iter().zip(z2.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn invert_denoise_are_mutual_inverses() {
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random_tensor(&[4, 8, 8], &mut rng);
        let e = random_tensor(&[4, 8, 8], &mut rng);
        for t in [0usize, 10, 49] {
            let up = ddim_invert_step(&z, &e, t, &sched).unwrap();
            let back = ddim_denoise_step(&up, &e, t + 1, &sched).unwrap();
            for (a, b) in z.data().iter().zip(back.data().iter()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn step_formula_matches_scalar_oracle() {
        let sched = make_schedule(10, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random_tensor(&[6], &mut rng);
        let e = random_tensor(&[6], &mut rng);
        let t = 4usize;
        let out = ddim_invert_step(&z, &e, t, &sched).unwrap();
        let (ab_t, ab_n) = (sched.alpha_bar[t], sched.alpha_bar[t + 1]);
        for i in 0..6 {
            let z0 = (z.data()[i] as f64 - (1.0 - ab_t).sqrt() * e.data()[i] as f64) / ab_t.sqrt();
            let expect = ab_n.sqrt() * z0 + (1.0 - ab_n).sqrt() * e.data()[i] as f64;
            assert!((out.data()[i] as f64 - expect).abs() <= 1e-6);
        }
    }

    #[test]
    fn denoise_out_of_range_errors() {
        let sched = make_schedule(5, 1e-3, 0.01).unwrap();
        let z = Tensor::zeros(&[2]);
        assert!(ddim_denoise_step(&z, &z, 0, &sched).is_err());
        assert!(ddim_denoise_step(&z, &z, 6, &sched).is_err());
        assert!(ddim_invert_step(&z, &z, 5, &sched).is_err());
    }

    #[test]
    fn darken_strength_zero_is_identity() {
        let p = toy_predictor(ToyEditKind::Darken, 0.0).unwrap();
        let z = Tensor::full(&[3, 4, 4], 0.5);
        let cond = Condition { depth: Tensor::full(&[1, 4, 4], 2.0), edit_tag: "darken".into() };
        let e = p.predict(&z, 3, &cond).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hue_shift_is_monotone_in_strength() {
        let sched = make_schedule(20, 1e-4, 0.02).unwrap();
        let z = Tensor::full(&[3, 8, 8], 0.5);
        let cond = Condition { depth: Tensor::full(&[1, 8, 8], 1.0), edit_tag: "hue_shift".into() };
        let attn = AttentionParams::identity(3);
        let mut prev_shift = 0.0f64;
        for s in [0.1f32, 0.2, 0.4] {
            let p = toy_predictor(ToyEditKind::HueShift, s).unwrap();
            let state = LatentState::new(vec![z.clone()]).unwrap();
            let out =
                run_edit_loop(&state, &[0], &p, std::slice::from_ref(&cond), &sched, 1.0, &attn)
                    .unwrap();
            let npix = 64usize;
            let red: f64 = out.latents[0].data()[..npix].iter().map(|&v| v as f64).sum();
            let shift = (0.5 - red / npix as f64).abs();
            assert!(shift > prev_shift, "strength {}: shift {} vs {}", s, shift, prev_shift);
            prev_shift = shift;
        }
    }

    #[test]
    fn identity_round_trip_through_edit_loop() {
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z: Vec<Tensor> = (0..2)
            .map(|_| {
                Tensor::new(&[3, 8, 8], (0..192).map(|_| rng.gen_range(0.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let conds: Vec<Condition> = (0..2)
            .map(|_| Condition { depth: Tensor::full(&[1, 8, 8], 1.0), edit_tag: "identity".into() })
            .collect();
        let p = toy_predictor(ToyEditKind::Identity, 0.7).unwrap();
        let attn = AttentionParams::identity(3);
        let state = LatentState::new(z.clone()).unwrap();
        let out = run_edit_loop(&state, &[0], &p, &conds, &sched, 1.0, &attn).unwrap();
        for (orig, edited) in z.iter().zip(&out.latents) {
            for (a, b) in orig.data().iter().zip(edited.data().iter()) {
                assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
            }
        }
    }
}

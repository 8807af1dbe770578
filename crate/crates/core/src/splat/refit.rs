//! Gradient refit of scene colors and opacities to a set of target views.
//!
//! Geometry (means, covariances) stays frozen; the compositing gradient
//! with respect to color and opacity is evaluated analytically from the
//! per-pixel hit records.

use super::{render_forward, Camera, GaussianScene, MAX_ALPHA};
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, Tensor};

#[derive(Debug, Clone)]
pub struct RefitStats {
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct GradAccum {
    color: Vec<[f64; 3]>,
    opacity: Vec<f64>,
}

/// MSE of one rendered view against its target RGB; gradients accumulate
/// into `acc`.
fn view_loss_and_grads(
    scene: &GaussianScene,
    cam: &Camera,
    target: &[f32],
    acc: &mut GradAccum,
) -> f64 {
    let buf = render_forward(scene, cam);
    let npix = buf.width * buf.height;
    let norm = 1.0 / (3 * npix) as f64;

    let mut loss = 0.0f64;
    for p in 0..npix {
        let mut dpix = [0.0f64; 3];
        for ch in 0..3 {
            let diff = (buf.rgb[ch * npix + p] - target[ch * npix + p]) as f64;
            loss += diff * diff * norm;
            dpix[ch] = 2.0 * diff * norm;
        }
        // reverse sweep over the hits with a suffix accumulator:
        // dC/dalpha_i = c_i T_i - (sum_{k>i} c_k a_k T_k) / (1 - alpha_i)
        let mut suffix = [0.0f64; 3];
        for hit in buf.hits[p].iter().rev() {
            let gi = hit.gaussian as usize;
            let g = &scene.gaussians[gi];
            let t = hit.transmittance as f64;
            let a = hit.alpha as f64;
            let mut dalpha = 0.0f64;
            for ch in 0..3 {
                let c = g.color[ch] as f64;
                acc.color[gi][ch] += dpix[ch] * a * t;
                dalpha += dpix[ch] * (c * t - suffix[ch] / (1.0 - a));
                suffix[ch] += c * a * t;
            }
            // alpha = min(opacity * weight, MAX_ALPHA); clamped hits have
            // zero opacity gradient
            if hit.alpha < MAX_ALPHA {
                acc.opacity[gi] += dalpha * hit.weight as f64;
            }
        }
    }
    loss
}

fn scene_with(scene: &GaussianScene, colors: &[f32], opacities: &[f32]) -> GaussianScene {
    let mut s = scene.clone();
    for (i, g) in s.gaussians.iter_mut().enumerate() {
        g.color = [colors[i * 3], colors[i * 3 + 1], colors[i * 3 + 2]];
        g.opacity = opacities[i];
    }
    s
}

/// Minimize the mean-squared render-vs-target error over colors and
/// opacities with Adam, re-clamping to the scene invariants after every
/// step. Returns the best-loss parameter set seen.
pub fn refit_scene(
    scene: &GaussianScene,
    views: &[(Camera, Tensor)],
    steps: usize,
    lr: f32,
) -> Result<(GaussianScene, RefitStats)> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("refit needs at least one view".into()));
    }
    let n = scene.len();
    for (cam, rgb) in views {
        if rgb.shape() != [3, cam.height, cam.width] {
            return Err(Error::ShapeMismatch {
                left: rgb.shape().to_vec(),
                right: vec![3, cam.height, cam.width],
            });
        }
    }
    let targets: Vec<Vec<f32>> = views.iter().map(|(_, t)| t.to_vec()).collect();

    let colors = Tensor::param(
        &[n, 3],
        scene.gaussians.iter().flat_map(|g| g.color).collect(),
    )?;
    let opacities = Tensor::param(&[n], scene.gaussians.iter().map(|g| g.opacity).collect())?;
    let params = [colors.clone(), opacities.clone()];
    let mut opt = Adam::new(AdamConfig::with_lr(lr));

    let eval = |colors: &Tensor, opacities: &Tensor| -> (f64, GradAccum) {
        let s = scene_with(scene, &colors.data(), &opacities.data());
        let mut acc = GradAccum { color: vec![[0.0; 3]; n], opacity: vec![0.0; n] };
        let mut loss = 0.0;
        for ((cam, _), target) in views.iter().zip(&targets) {
            loss += view_loss_and_grads(&s, cam, target, &mut acc);
        }
        (loss / views.len() as f64, acc)
    };

    let (initial_loss, _) = eval(&colors, &opacities);
    let mut best_loss = initial_loss;
    let mut best = (colors.to_vec(), opacities.to_vec());

    for _ in 0..steps {
        let (loss, acc) = eval(&colors, &opacities);
        if loss < best_loss {
            best_loss = loss;
            best = (colors.to_vec(), opacities.to_vec());
        }
        let inv_views = 1.0 / views.len() as f64;
        let gc: Vec<f32> = acc
            .color
            .iter()
            .flat_map(|c| c.map(|v| (v * inv_views) as f32))
            .collect();
        let go: Vec<f32> = acc.opacity.iter().map(|v| (v * inv_views) as f32).collect();
        colors.clear_grad();
        opacities.clear_grad();
        colors.accumulate_grad(&gc);
        opacities.accumulate_grad(&go);
        opt.step(&params)?;
        // re-apply invariants
        let cl: Vec<f32> = colors.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        colors.set_data(&cl);
        let op: Vec<f32> = opacities.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        opacities.set_data(&op);
    }
    let (final_eval, _) = eval(&colors, &opacities);
    if final_eval < best_loss {
        best_loss = final_eval;
        best = (colors.to_vec(), opacities.to_vec());
    }

    Ok((
        scene_with(scene, &best.0, &best.1),
        RefitStats { initial_loss, final_loss: best_loss },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::{make_synthetic_scene, render, Layout};

    #[test]
    fn noop_refit_keeps_loss_at_zero() {
        let (scene, cams) = make_synthetic_scene(1, 50, Layout::Cluster).unwrap();
        let views: Vec<(Camera, Tensor)> = cams
            .iter()
            .take(2)
            .map(|c| (c.clone(), render(&scene, c).rgb))
            .collect();
        let (_, stats) = refit_scene(&scene, &views, 10, 0.05).unwrap();
        assert!(stats.initial_loss < 1e-10);
        assert!((stats.final_loss - stats.initial_loss).abs() < 1e-6);
    }

    #[test]
    fn red_shift_targets_raise_red_channel() {
        let (scene, cams) = make_synthetic_scene(2, 80, Layout::Cluster).unwrap();
        let views: Vec<(Camera, Tensor)> = cams
            .iter()
            .take(3)
            .map(|c| {
                let rgb = render(&scene, c).rgb;
                let npix = c.width * c.height;
                let mut data = rgb.to_vec();
                for v in data[..npix].iter_mut() {
                    *v = (*v + 0.3).min(1.0);
                }
                (c.clone(), Tensor::new(&[3, c.height, c.width], data).unwrap())
            })
            .collect();
        let (refit, stats) = refit_scene(&scene, &views, 60, 0.05).unwrap();
        assert!(stats.final_loss < stats.initial_loss);
        let mean_red = |s: &GaussianScene| {
            s.gaussians.iter().map(|g| g.color[0] as f64).sum::<f64>() / s.len() as f64
        };
        assert!(mean_red(&refit) > mean_red(&scene));
    }

    #[test]
    fn opacity_gradient_matches_finite_differences() {
        let (scene, cams) = make_synthetic_scene(4, 6, Layout::Cluster).unwrap();
        let cam = &cams[0];
        let target = render(&scene, cam).rgb.to_vec();
        // perturb towards a different target so gradients are nonzero
        let target: Vec<f32> = target.iter().map(|v| v * 0.5 + 0.1).collect();

        let loss_of = |s: &GaussianScene| {
            let buf = render_forward(s, cam);
            let npix = buf.width * buf.height;
            let mut l = 0.0f64;
            for i in 0..3 * npix {
                let d = (buf.rgb[i] - target[i]) as f64;
                l += d * d;
            }
            l / (3 * npix) as f64
        };

        let mut acc = GradAccum {
            color: vec![[0.0; 3]; scene.len()],
            opacity: vec![0.0; scene.len()],
        };
        view_loss_and_grads(&scene, cam, &target, &mut acc);

        let h = 1e-3f32;
        for gi in 0..scene.len() {
            let mut plus = scene.clone();
            plus.gaussians[gi].opacity += h;
            let mut minus = scene.clone();
            minus.gaussians[gi].opacity -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h as f64);
            let an = acc.opacity[gi];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(err < 2e-2, "gaussian {}: analytic {} vs fd {}", gi, an, fd);

            let mut plus = scene.clone();
            plus.gaussians[gi].color[1] += h;
            let mut minus = scene.clone();
            minus.gaussians[gi].color[1] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h as f64);
            let an = acc.color[gi][1];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(err < 2e-2, "gaussian {} color: analytic {} vs fd {}", gi, an, fd);
        }
    }
}

//! Sorted front-to-back alpha compositing of projected Gaussians.

use super::{project, Camera, GaussianScene, ProjectedGaussian};
use crate::tensor::Tensor;

/// Per-pixel opacity ceiling.
pub const MAX_ALPHA: f32 = 0.999;
/// Compositing stops once transmittance drops below this.
pub const EARLY_OUT_T: f32 = 1e-4;
/// Gaussian falloff cutoff: contributions with exp(-q) below ~1e-9 are
/// dropped, which keeps the splatted result within oracle tolerance.
const MAX_EXPONENT: f32 = 20.8;

pub struct RenderOutput {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub alpha: Tensor,
}

/// One compositing event, recorded for the differentiable refit path.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    /// Index into the scene's Gaussian list.
    pub gaussian: u32,
    /// Spatial Gaussian weight exp(-q), before opacity.
    pub weight: f32,
    /// Opacity after the MAX_ALPHA clamp.
    pub alpha: f32,
    /// Transmittance in front of this hit.
    pub transmittance: f32,
}

pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,   // [3*H*W]
    pub depth: Vec<f32>, // [H*W]
    pub alpha: Vec<f32>, // [H*W]
    pub hits: Vec<Vec<Hit>>,
}

/// Render with per-pixel hit records. Gaussians are depth-sorted globally,
/// which equals a per-pixel sort because each Gaussian has a single view
/// depth.
pub fn render_forward(scene: &GaussianScene, cam: &Camera) -> RenderBuffers {
    let (w, h) = (cam.width, cam.height);
    let mut projected = project(scene, cam);
    // tie-break on intrinsic fields so the result is invariant under
    // permutations of the input Gaussian order
    projected.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.mean2d[0].total_cmp(&b.mean2d[0]))
            .then(a.mean2d[1].total_cmp(&b.mean2d[1]))
            .then(a.opacity.total_cmp(&b.opacity))
            .then(a.color[0].total_cmp(&b.color[0]))
            .then(a.color[1].total_cmp(&b.color[1]))
            .then(a.color[2].total_cmp(&b.color[2]))
    });

    let npix = w * h;
    let mut rgb = vec![0.0f32; 3 * npix];
    let mut depth = vec![0.0f32; npix];
    let mut trans = vec![1.0f32; npix];
    let mut hits: Vec<Vec<Hit>> = vec![Vec::new(); npix];

    for pg in &projected {
        splat_one(pg, w, h, &mut rgb, &mut depth, &mut trans, &mut hits);
    }

    let alpha = trans.iter().map(|t| 1.0 - t).collect();
    RenderBuffers { width: w, height: h, rgb, depth, alpha, hits }
}

fn splat_one(
    pg: &ProjectedGaussian,
    w: usize,
    h: usize,
    rgb: &mut [f32],
    depth: &mut [f32],
    trans: &mut [f32],
    hits: &mut [Vec<Hit>],
) {
    let [a, b, c] = pg.cov2d;
    let det = a * c - b * b;
    if det <= 0.0 {
        return;
    }
    let (ia, ib, ic) = (c / det, -b / det, a / det);
    // conservative bbox from the largest eigenvalue
    let lmax = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let radius = (2.0 * MAX_EXPONENT * lmax).sqrt();
    let x0 = ((pg.mean2d[0] - radius).floor().max(0.0)) as usize;
    let x1 = ((pg.mean2d[0] + radius).ceil().min(w as f32 - 1.0)) as usize;
    let y0 = ((pg.mean2d[1] - radius).floor().max(0.0)) as usize;
    let y1 = ((pg.mean2d[1] + radius).ceil().min(h as f32 - 1.0)) as usize;
    if pg.mean2d[0] + radius < 0.0 || pg.mean2d[1] + radius < 0.0 {
        return;
    }

    for py in y0..=y1 {
        for px in x0..=x1 {
            let p = py * w + px;
            let t = trans[p];
            if t < EARLY_OUT_T {
                continue;
            }
            let dx = (px as f32 + 0.5) - pg.mean2d[0];
            let dy = (py as f32 + 0.5) - pg.mean2d[1];
            let q = 0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy);
            if q > MAX_EXPONENT || q < 0.0 {
                continue;
            }
            let weight = (-q).exp();
            let alpha = (pg.opacity * weight).min(MAX_ALPHA);
            let at = alpha * t;
            for ch in 0..3 {
                rgb[ch * w * h + p] += pg.color[ch] * at;
            }
            depth[p] += pg.depth * at;
            trans[p] = t * (1.0 - alpha);
            hits[p].push(Hit {
                gaussian: pg.orig_index as u32,
                weight,
                alpha,
                transmittance: t,
            });
        }
    }
}

/// Alpha-composited RGB, depth, and alpha from a scene and camera.
pub fn render(scene: &GaussianScene, cam: &Camera) -> RenderOutput {
    let buf = render_forward(scene, cam);
    let (w, h) = (buf.width, buf.height);
    RenderOutput {
        rgb: Tensor::new(&[3, h, w], buf.rgb).expect("render shape"),
        depth: Tensor::new(&[1, h, w], buf.depth).expect("render shape"),
        alpha: Tensor::new(&[1, h, w], buf.alpha).expect("render shape"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Gaussian;

    fn cam16() -> Camera {
        Camera {
            fx: 30.0,
            fy: 30.0,
            cx: 8.0,
            cy: 8.0,
            width: 16,
            height: 16,
            world_to_camera: [
                1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
        }
    }

    #[test]
    fn empty_scene_is_black() {
        let out = render(&GaussianScene { gaussians: vec![] }, &cam16());
        assert!(out.rgb.data().iter().all(|&v| v == 0.0));
        assert!(out.depth.data().iter().all(|&v| v == 0.0));
        assert!(out.alpha.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_opaque_gaussian_depth_and_color() {
        // huge flat gaussian: alpha ~ 1 (clamped to 0.999) everywhere near center
        let scene = GaussianScene {
            gaussians: vec![Gaussian {
                opacity: 1.0,
                mean: [0.0, 0.0, 4.2],
                scale: [50.0, 50.0, 50.0],
                rotation: [1.0, 0.0, 0.0, 0.0],
                color: [0.2, 0.4, 0.8],
            }],
        };
        let out = render(&scene, &cam16());
        let p = 8 * 16 + 8;
        let d = out.depth.data()[p];
        assert!((d - 4.2 * MAX_ALPHA).abs() < 1e-3, "depth {}", d);
        let r = out.rgb.data()[p];
        assert!((r - 0.2 * MAX_ALPHA).abs() < 1e-3);
    }

    #[test]
    fn two_layer_compositing_matches_hand_sum() {
        // alpha 0.5 at d=2 in front of alpha ~1 at d=5: D = 2*0.5 + 5*1*(1-0.5)
        let big = 50.0;
        let scene = GaussianScene {
            gaussians: vec![
                Gaussian {
                    opacity: 1.0,
                    mean: [0.0, 0.0, 5.0],
                    scale: [big, big, big],
                    rotation: [1.0, 0.0, 0.0, 0.0],
                    color: [1.0, 1.0, 1.0],
                },
                Gaussian {
                    opacity: 0.5,
                    mean: [0.0, 0.0, 2.0],
                    scale: [big, big, big],
                    rotation: [1.0, 0.0, 0.0, 0.0],
                    color: [0.0, 0.0, 0.0],
                },
            ],
        };
        let out = render(&scene, &cam16());
        let p = 8 * 16 + 8;
        let d = out.depth.data()[p];
        // opacities saturate to ~0.5 and ~0.999 at the center pixel
        let expect = 2.0 * 0.5 + 5.0 * MAX_ALPHA * 0.5;
        assert!((d - expect).abs() < 2e-3, "depth {} vs {}", d, expect);
    }

    #[test]
    fn transmittance_and_alpha_bounds() {
        let scene = GaussianScene {
            gaussians: (0..5)
                .map(|i| Gaussian {
                    opacity: 0.8,
                    mean: [0.0, 0.0, 1.0 + i as f32],
                    scale: [0.5, 0.5, 0.5],
                    rotation: [1.0, 0.0, 0.0, 0.0],
                    color: [0.5, 0.5, 0.5],
                })
                .collect(),
        };
        let out = render(&scene, &cam16());
        assert!(out.alpha.data().iter().all(|&a| (0.0..=1.0).contains(&a)));
    }
}

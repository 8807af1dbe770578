//! Deterministic synthetic scenes and orbit cameras for tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Camera, Gaussian, GaussianScene};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Cluster,
    Shell,
    Boxes,
}

impl std::str::FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Layout> {
        match s {
            "cluster" => Ok(Layout::Cluster),
            "shell" => Ok(Layout::Shell),
            "boxes" => Ok(Layout::Boxes),
            other => Err(Error::InvalidArgument(format!("unknown layout {:?}", other))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n: usize,
    pub layout: Layout,
    pub cameras: usize,
    pub width: usize,
    pub height: usize,
    /// Orbit radius in world units; the scene occupies roughly the unit ball.
    pub orbit_radius: f32,
}

impl SyntheticConfig {
    pub fn new(seed: u64, n: usize, layout: Layout) -> SyntheticConfig {
        SyntheticConfig { seed, n, layout, cameras: 6, width: 64, height: 64, orbit_radius: 3.0 }
    }
}

/// Shell radius used by the `shell` layout.
pub const SHELL_RADIUS: f32 = 1.0;

fn normal2(rng: &mut ChaCha8Rng) -> (f32, f32) {
    // Box-Muller
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    let th = 2.0 * std::f32::consts::PI * u2;
    (r * th.cos(), r * th.sin())
}

fn random_unit_quat(rng: &mut ChaCha8Rng) -> [f32; 4] {
    let (a, b) = normal2(rng);
    let (c, d) = normal2(rng);
    let n = (a * a + b * b + c * c + d * d).sqrt().max(1e-6);
    [a / n, b / n, c / n, d / n]
}

pub fn make_synthetic_scene(seed: u64, n: usize, layout: Layout) -> Result<(GaussianScene, Vec<Camera>)> {
    make_synthetic_scene_with(&SyntheticConfig::new(seed, n, layout))
}

pub fn make_synthetic_scene_with(cfg: &SyntheticConfig) -> Result<(GaussianScene, Vec<Camera>)> {
    if cfg.n == 0 {
        return Err(Error::InvalidArgument("scene needs n >= 1 gaussians".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gaussians = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mean = match cfg.layout {
            Layout::Cluster => {
                let (x, y) = normal2(&mut rng);
                let (z, _) = normal2(&mut rng);
                [x * 0.45, y * 0.45, z * 0.45]
            }
            Layout::Shell => {
                let (x, y) = normal2(&mut rng);
                let (z, _) = normal2(&mut rng);
                let n = (x * x + y * y + z * z).sqrt().max(1e-6);
                let r = SHELL_RADIUS + rng.gen_range(-0.05..0.05);
                [x / n * r, y / n * r, z / n * r]
            }
            Layout::Boxes => {
                let centers = [[-0.6, 0.0, 0.0], [0.6, 0.3, 0.2], [0.0, -0.5, -0.4]];
                let c = centers[i % centers.len()];
                [
                    c[0] + rng.gen_range(-0.35..0.35),
                    c[1] + rng.gen_range(-0.35..0.35),
                    c[2] + rng.gen_range(-0.35..0.35),
                ]
            }
        };
        let scale_base = rng.gen_range(0.06..0.16);
        gaussians.push(Gaussian {
            opacity: rng.gen_range(0.6..0.95),
            mean,
            scale: [
                scale_base * rng.gen_range(0.7..1.3),
                scale_base * rng.gen_range(0.7..1.3),
                scale_base * rng.gen_range(0.7..1.3),
            ],
            rotation: random_unit_quat(&mut rng),
            color: [
                rng.gen_range(0.05..1.0),
                rng.gen_range(0.05..1.0),
                rng.gen_range(0.05..1.0),
            ],
        });
    }
    let scene = GaussianScene { gaussians };

    // centroid of the means
    let mut centroid = [0.0f32; 3];
    for g in &scene.gaussians {
        for k in 0..3 {
            centroid[k] += g.mean[k];
        }
    }
    for k in 0..3 {
        centroid[k] /= scene.len() as f32;
    }

    // orbit, alternating elevation, all facing the centroid; focal length
    // chosen so the unit-ball scene fills most of the frame
    let fx = cfg.width as f32 * 1.1;
    let fy = cfg.height as f32 * 1.1;
    let mut cams = Vec::with_capacity(cfg.cameras);
    for i in 0..cfg.cameras {
        let az = 2.0 * std::f32::consts::PI * i as f32 / cfg.cameras as f32;
        let el: f32 = if i % 2 == 0 { 0.25 } else { -0.25 };
        let eye = [
            centroid[0] + cfg.orbit_radius * az.cos() * el.cos(),
            centroid[1] + cfg.orbit_radius * el.sin(),
            centroid[2] + cfg.orbit_radius * az.sin() * el.cos(),
        ];
        cams.push(Camera::look_at(eye, centroid, fx, fy, cfg.width, cfg.height));
    }
    Ok((scene, cams))
}

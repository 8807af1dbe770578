//! Gaussian mixture scenes, cameras, and screen-space projection.

mod refit;
mod render;
mod synth;

pub use refit::{refit_scene, RefitStats};
pub use render::{render, render_forward, RenderBuffers, RenderOutput, EARLY_OUT_T, MAX_ALPHA};
pub use synth::{make_synthetic_scene, make_synthetic_scene_with, Layout, SyntheticConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NEAR_PLANE: f32 = 0.01;
const COV2D_REGULARIZER: f32 = 0.3;

/// One anisotropic Gaussian: opacity, world mean, per-axis scale, unit
/// quaternion rotation (w,x,y,z), RGB color.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gaussian {
    pub opacity: f32,
    pub mean: [f32; 3],
    pub scale: [f32; 3],
    pub rotation: [f32; 4],
    pub color: [f32; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianScene {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            let finite = g.opacity.is_finite()
                && g.mean.iter().all(|v| v.is_finite())
                && g.scale.iter().all(|v| v.is_finite())
                && g.rotation.iter().all(|v| v.is_finite())
                && g.color.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Parse(format!("gaussian {}: non-finite field", i)));
            }
            if !(0.0..=1.0).contains(&g.opacity) {
                return Err(Error::Parse(format!("gaussian {}: opacity {} outside [0,1]", i, g.opacity)));
            }
            if g.scale.iter().any(|&s| s <= 0.0) {
                return Err(Error::Parse(format!("gaussian {}: non-positive scale", i)));
            }
            let norm = g.rotation.iter().map(|&v| v * v).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::Parse(format!("gaussian {}: quaternion norm {}", i, norm)));
            }
            if g.color.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
                return Err(Error::Parse(format!("gaussian {}: color outside [0,1]", i)));
            }
        }
        Ok(())
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<GaussianScene> {
        let scene: GaussianScene =
            serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("scene json: {}", e)))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("scene serializes")
    }
}

/// Pinhole camera: intrinsics in pixels plus a rigid world-to-camera
/// transform (row-major 4x4, camera looks down +z, y points down).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: [f32; 16],
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Parse("camera: fx, fy must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Parse("camera: zero image size".into()));
        }
        if self.world_to_camera.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("camera: non-finite transform".into()));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f32 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-5 {
                    return Err(Error::Parse("camera: rotation block not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn rotation(&self) -> [[f32; 3]; 3] {
        let m = &self.world_to_camera;
        [
            [m[0], m[1], m[2]],
            [m[4], m[5], m[6]],
            [m[8], m[9], m[10]],
        ]
    }

    pub fn translation(&self) -> [f32; 3] {
        let m = &self.world_to_camera;
        [m[3], m[7], m[11]]
    }

    /// World point to camera space.
    pub fn to_camera(&self, p: [f32; 3]) -> [f32; 3] {
        let r = self.rotation();
        let t = self.translation();
        let mut out = [0.0f32; 3];
        for i in 0..3 {
            out[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
        }
        out
    }

    /// Camera at `eye` looking at `target`, world up (0,1,0); image y
    /// points down.
    pub fn look_at(
        eye: [f32; 3],
        target: [f32; 3],
        fx: f32,
        fy: f32,
        width: usize,
        height: usize,
    ) -> Camera {
        let fwd = normalize(sub3(target, eye));
        let mut up = [0.0, 1.0, 0.0];
        if cross(fwd, up).iter().map(|v| v * v).sum::<f32>() < 1e-8 {
            up = [1.0, 0.0, 0.0];
        }
        let right = normalize(cross(fwd, up));
        let down = cross(fwd, right);
        let r = [right, down, fwd];
        let t = [-dot3(right, eye), -dot3(down, eye), -dot3(fwd, eye)];
        let mut m = [0.0f32; 16];
        for i in 0..3 {
            m[i * 4] = r[i][0];
            m[i * 4 + 1] = r[i][1];
            m[i * 4 + 2] = r[i][2];
            m[i * 4 + 3] = t[i];
        }
        m[15] = 1.0;
        Camera {
            fx,
            fy,
            cx: width as f32 / 2.0,
            cy: height as f32 / 2.0,
            width,
            height,
            world_to_camera: m,
        }
    }

    pub fn position(&self) -> [f32; 3] {
        // eye = -Rᵀ t
        let r = self.rotation();
        let t = self.translation();
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }
}

pub fn cameras_from_json_bytes(bytes: &[u8]) -> Result<Vec<Camera>> {
    let cams: Vec<Camera> =
        serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("camera json: {}", e)))?;
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

pub fn cameras_to_json_bytes(cams: &[Camera]) -> Vec<u8> {
    serde_json::to_vec(cams).expect("cameras serialize")
}

/// A Gaussian after perspective projection: 2D mean and covariance in
/// pixels, camera-space depth, opacity, color. `orig_index` points back
/// into the scene's Gaussian list.
#[derive(Debug, Clone)]
pub struct ProjectedGaussian {
    pub mean2d: [f32; 2],
    /// Symmetric 2x2 covariance as (xx, xy, yy).
    pub cov2d: [f32; 3],
    pub depth: f32,
    pub opacity: f32,
    pub color: [f32; 3],
    pub orig_index: usize,
}

pub fn quat_to_rot(q: [f32; 4]) -> [[f32; 3]; 3] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Project every Gaussian into screen space, culling those closer than the
/// near plane. cov2d = J·W·Σ·Wᵀ·Jᵀ + 0.3·I with J the perspective Jacobian
/// and W the camera rotation.
pub fn project(scene: &GaussianScene, cam: &Camera) -> Vec<ProjectedGaussian> {
    let rw = cam.rotation();
    let mut out = Vec::with_capacity(scene.gaussians.len());
    for (gi, g) in scene.gaussians.iter().enumerate() {
        let p = cam.to_camera(g.mean);
        let z = p[2];
        if z <= NEAR_PLANE {
            continue;
        }
        let mean2d = [cam.fx * p[0] / z + cam.cx, cam.fy * p[1] / z + cam.cy];

        // Sigma = R diag(s^2) R^T
        let r = quat_to_rot(g.rotation);
        let s2 = [g.scale[0] * g.scale[0], g.scale[1] * g.scale[1], g.scale[2] * g.scale[2]];
        let mut sigma = [[0.0f32; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    sigma[i][j] += r[i][k] * s2[k] * r[j][k];
                }
            }
        }
        // M = J·W (2x3)
        let j = [
            [cam.fx / z, 0.0, -cam.fx * p[0] / (z * z)],
            [0.0, cam.fy / z, -cam.fy * p[1] / (z * z)],
        ];
        let mut m = [[0.0f32; 3]; 2];
        for a in 0..2 {
            for b in 0..3 {
                for k in 0..3 {
                    m[a][b] += j[a][k] * rw[k][b];
                }
            }
        }
        // cov2d = M Sigma Mᵀ
        let mut ms = [[0.0f32; 3]; 2];
        for a in 0..2 {
            for b in 0..3 {
                for k in 0..3 {
                    ms[a][b] += m[a][k] * sigma[k][b];
                }
            }
        }
        let mut cov = [0.0f32; 3];
        for k in 0..3 {
            cov[0] += ms[0][k] * m[0][k];
            cov[1] += ms[0][k] * m[1][k];
            cov[2] += ms[1][k] * m[1][k];
        }
        cov[0] += COV2D_REGULARIZER;
        cov[2] += COV2D_REGULARIZER;

        out.push(ProjectedGaussian {
            mean2d,
            cov2d: cov,
            depth: z,
            opacity: g.opacity,
            color: g.color,
            orig_index: gi,
        });
    }
    out
}

fn sub3(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: [f32; 3], b: [f32; 3]) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f32; 3]) -> [f32; 3] {
    let n = dot3(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_camera() -> Camera {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
            world_to_camera: [
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        }
    }

    fn gaussian_at(mean: [f32; 3], scale: f32) -> Gaussian {
        Gaussian {
            opacity: 0.9,
            mean,
            scale: [scale; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            color: [1.0, 0.5, 0.25],
        }
    }

    #[test]
    fn on_axis_projection() {
        let scene = GaussianScene { gaussians: vec![gaussian_at([0.0, 0.0, 2.0], 0.1)] };
        let proj = project(&scene, &test_camera());
        assert_eq!(proj.len(), 1);
        assert!((proj[0].mean2d[0] - 32.0).abs() < 1e-5);
        assert!((proj[0].mean2d[1] - 32.0).abs() < 1e-5);
        assert!((proj[0].depth - 2.0).abs() < 1e-6);
    }

    #[test]
    fn behind_camera_is_culled() {
        let scene = GaussianScene { gaussians: vec![gaussian_at([0.0, 0.0, -1.0], 0.1)] };
        assert!(project(&scene, &test_camera()).is_empty());
    }

    #[test]
    fn on_axis_isotropic_cov2d() {
        // isotropic scale s at depth d on-axis: cov2d = (fx*s/d)^2 I + 0.3 I
        let (s, d) = (0.2f32, 4.0f32);
        let scene = GaussianScene { gaussians: vec![gaussian_at([0.0, 0.0, d], s)] };
        let proj = project(&scene, &test_camera());
        let expect = (100.0 * s / d).powi(2) + 0.3;
        assert!((proj[0].cov2d[0] - expect).abs() < 1e-3, "{} vs {}", proj[0].cov2d[0], expect);
        assert!((proj[0].cov2d[2] - expect).abs() < 1e-3);
        assert!(proj[0].cov2d[1].abs() < 1e-4);
    }

    #[test]
    fn look_at_camera_is_valid_and_centers_target() {
        let cam = Camera::look_at([3.0, 1.0, -2.0], [0.0, 0.0, 0.0], 80.0, 80.0, 64, 64);
        cam.validate().unwrap();
        let p = cam.to_camera([0.0, 0.0, 0.0]);
        assert!(p[0].abs() < 1e-5 && p[1].abs() < 1e-5);
        assert!(p[2] > 0.0);
    }

    #[test]
    fn scene_json_round_trip() {
        let scene = GaussianScene { gaussians: vec![gaussian_at([0.1, -0.2, 1.0], 0.05)] };
        let bytes = scene.to_json_bytes();
        let back = GaussianScene::from_json_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.gaussians[0].mean, scene.gaussians[0].mean);
    }

    #[test]
    fn scene_json_rejects_bad_opacity() {
        let mut scene = GaussianScene { gaussians: vec![gaussian_at([0.0, 0.0, 1.0], 0.05)] };
        scene.gaussians[0].opacity = 1.5;
        let bytes = scene.to_json_bytes();
        assert!(GaussianScene::from_json_bytes(&bytes).is_err());
    }
}

//! Analytic sphere scenes with closed-form volume rendering.

use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::trajectory::{Pose, Trajectory};

/// Rec. 709 luminance weights.
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

pub fn luminance(rgb: &[f64; 3]) -> f64 {
    LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    /// Extinction per unit length.
    pub density: f64,
    pub radiance: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub spheres: Vec<Sphere>,
    pub background: [f64; 3],
}

fn positive_rgb(rgb: &[f64; 3]) -> bool {
    rgb.iter().all(|v| v.is_finite() && *v > 0.0)
}

impl AnalyticScene {
    pub fn new(spheres: Vec<Sphere>, background: [f64; 3]) -> Result<Self> {
        let scene = AnalyticScene { spheres, background };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if !positive_rgb(&self.background) {
            return Err(Error::Argument("background radiance must be finite and > 0".into()));
        }
        for (i, s) in self.spheres.iter().enumerate() {
            if !(s.radius > 0.0 && s.radius.is_finite()) {
                return Err(Error::Argument(format!("sphere {i}: radius must be > 0")));
            }
            if !(s.density >= 0.0 && s.density.is_finite()) {
                return Err(Error::Argument(format!("sphere {i}: density must be finite and >= 0")));
            }
            if !positive_rgb(&s.radiance) || !s.center.iter().all(|c| c.is_finite()) {
                return Err(Error::Argument(format!("sphere {i}: radiance must be > 0, center finite")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let scene: AnalyticScene = serde_json::from_slice(&std::fs::read(path)?)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Entry and exit distances (clipped to `t >= 0`) of every sphere the ray crosses.
    fn chords(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::new();
        for (k, s) in self.spheres.iter().enumerate() {
            let oc = o - Vector3::from(s.center);
            let b = d.dot(&oc);
            let c = oc.norm_squared() - s.radius * s.radius;
            let disc = b * b - c;
            if disc <= 0.0 {
                continue;
            }
            let root = disc.sqrt();
            let (t0, t1) = ((-b - root).max(0.0), -b + root);
            if t1 > t0 {
                out.push((t0, t1, k));
            }
        }
        out
    }

    /// Exact volume-rendered radiance along a ray with unit `direction`.
    pub fn render_exact(&self, origin: &Vector3<f64>, direction: &Vector3<f64>) -> Result<[f64; 3]> {
        if (direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "ray direction must be unit length (norm {})",
                direction.norm()
            )));
        }
        Ok(self.render_unchecked(origin, direction))
    }

    fn render_unchecked(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> [f64; 3] {
        let chords = self.chords(o, d);
        let mut edges: Vec<f64> = chords.iter().flat_map(|&(a, b, _)| [a, b]).collect();
        edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
        edges.dedup();
        let mut out = [0.0; 3];
        let mut transmittance = 1.0;
        for w in edges.windows(2) {
            let (a, b) = (w[0], w[1]);
            let mid = 0.5 * (a + b);
            let mut sigma = 0.0;
            let mut emit = [0.0; 3];
            for &(t0, t1, k) in &chords {
                if t0 < mid && mid < t1 {
                    let s = &self.spheres[k];
                    sigma += s.density;
                    for c in 0..3 {
                        emit[c] += s.density * s.radiance[c];
                    }
                }
            }
            if sigma <= 0.0 {
                continue;
            }
            let alpha = -(-sigma * (b - a)).exp_m1();
            for c in 0..3 {
                out[c] += transmittance * alpha * emit[c] / sigma;
            }
            transmittance *= 1.0 - alpha;
        }
        for c in 0..3 {
            out[c] += transmittance * self.background[c];
        }
        out
    }

    /// Summed density and density-weighted radiance at a point.
    pub fn field_at(&self, p: &Vector3<f64>) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut emit = [0.0; 3];
        for s in &self.spheres {
            if (p - Vector3::from(s.center)).norm() < s.radius {
                sigma += s.density;
                for c in 0..3 {
                    emit[c] += s.density * s.radiance[c];
                }
            }
        }
        if sigma > 0.0 {
            emit.iter_mut().for_each(|e| *e /= sigma);
        }
        (sigma, emit)
    }

    /// Scene-space extent: the largest distance from the origin reached by any sphere.
    pub fn bounding_radius(&self) -> f64 {
        self.spheres
            .iter()
            .map(|s| Vector3::from(s.center).norm() + s.radius)
            .fold(0.0, f64::max)
    }
}

/// Pinhole intrinsics in the x-right / y-down / z-forward camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Camera { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Square sensor with the principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Camera::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Argument("focal lengths must be > 0".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Argument("camera resolution must be non-zero".into()));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        if !(self.cx >= 0.0 && self.cx < w && self.cy >= 0.0 && self.cy < h) {
            return Err(Error::Argument("principal point outside the image".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn check_pixel(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.width || y >= self.height {
            return Err(Error::Range(format!(
                "pixel ({x}, {y}) outside {}x{} sensor",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Unnormalised camera-frame direction through image point `(u, v)`.
    pub fn camera_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// World-space origin and unit direction through the centre of pixel `(x, y)`.
    pub fn pixel_ray(&self, pose: &Pose, x: usize, y: usize) -> (Vector3<f64>, Vector3<f64>) {
        let d = self.camera_direction(x as f64 + 0.5, y as f64 + 0.5);
        (pose.translation, (pose.rotation * d).normalize())
    }
}

/// Natural log of the mono luminance seen by pixel `(x, y)` at time `t`.
pub fn pixel_log_radiance(
    scene: &AnalyticScene,
    camera: &Camera,
    traj: &Trajectory,
    pixel: (usize, usize),
    t: f64,
) -> Result<f64> {
    camera.check_pixel(pixel.0, pixel.1)?;
    let pose = traj.interpolate(t)?;
    Ok(pose_log_radiance(scene, camera, &pose, pixel))
}

pub fn pose_log_radiance(scene: &AnalyticScene, camera: &Camera, pose: &Pose, pixel: (usize, usize)) -> f64 {
    let (o, d) = camera.pixel_ray(pose, pixel.0, pixel.1);
    luminance(&scene.render_unchecked(&o, &d)).ln()
}

/// Exact RGB render of the scene from `pose`.
pub fn render_image(scene: &AnalyticScene, camera: &Camera, pose: &Pose) -> Image {
    let data: Vec<f64> = (0..camera.pixel_count())
        .into_par_iter()
        .flat_map_iter(|i| {
            let (x, y) = (i % camera.width, i / camera.width);
            let (o, d) = camera.pixel_ray(pose, x, y);
            scene.render_unchecked(&o, &d)
        })
        .collect();
    Image::new(camera.width, camera.height, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sphere(radius: f64, density: f64, radiance: f64) -> Sphere {
        Sphere { center: [0.0, 0.0, 0.0], radius, density, radiance: [radiance; 3] }
    }

    #[test]
    fn ray_missing_everything_sees_background() {
        let scene = AnalyticScene::new(vec![sphere(1.0, 5.0, 2.0)], [0.3, 0.4, 0.5]).unwrap();
        let o = Vector3::new(0.0, 5.0, -10.0);
        let out = scene.render_exact(&o, &Vector3::z()).unwrap();
        assert_eq!(out, [0.3, 0.4, 0.5]);
    }

    #[test]
    fn half_transmittance_chord_blends_evenly() {
        // Chord through the centre has length 2r; choose density so sigma * 2r = ln 2.
        let r = 0.75;
        let scene = AnalyticScene::new(vec![sphere(r, 2f64.ln() / (2.0 * r), 3.0)], [1.0; 3]).unwrap();
        let out = scene.render_exact(&Vector3::new(0.0, 0.0, -5.0), &Vector3::z()).unwrap();
        for c in out {
            assert_relative_eq!(c, 0.5 * 3.0 + 0.5 * 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn opaque_sphere_shows_its_radiance() {
        let scene = AnalyticScene::new(vec![sphere(1.0, 1e6, 0.7)], [0.2; 3]).unwrap();
        let out = scene.render_exact(&Vector3::new(0.0, 0.3, -4.0), &Vector3::z()).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn non_unit_direction_rejected() {
        let scene = AnalyticScene::new(vec![], [1.0; 3]).unwrap();
        let bad = scene.render_exact(&Vector3::zeros(), &Vector3::new(0.0, 0.0, 2.0));
        assert!(matches!(bad, Err(Error::Argument(_))));
    }

    #[test]
    fn overlapping_spheres_add_density() {
        let a = Sphere { center: [0.0, 0.0, 0.0], radius: 1.0, density: 0.3, radiance: [1.0; 3] };
        let b = Sphere { center: [0.0, 0.0, 0.0], radius: 1.0, density: 0.2, radiance: [1.0; 3] };
        let merged = Sphere { density: 0.5, ..a.clone() };
        let two = AnalyticScene::new(vec![a, b], [0.1; 3]).unwrap();
        let one = AnalyticScene::new(vec![merged], [0.1; 3]).unwrap();
        let o = Vector3::new(0.2, 0.1, -3.0);
        let d = Vector3::new(0.0, 0.0, 1.0);
        assert_relative_eq!(two.render_exact(&o, &d).unwrap()[0], one.render_exact(&o, &d).unwrap()[0], epsilon = 1e-14);
    }

    #[test]
    fn ray_starting_inside_sphere() {
        let scene = AnalyticScene::new(vec![sphere(2.0, 2f64.ln() / 2.0, 3.0)], [1.0; 3]).unwrap();
        let out = scene.render_exact(&Vector3::zeros(), &Vector3::x()).unwrap();
        assert_relative_eq!(out[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn camera_validation() {
        assert!(Camera::new(10.0, 10.0, 64.0, 10.0, 64, 64).is_err());
        assert!(Camera::new(0.0, 10.0, 1.0, 1.0, 64, 64).is_err());
        assert!(Camera::centered(64.0, 64, 64).is_ok());
    }
}

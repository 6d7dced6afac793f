//! Image and trajectory quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::trajectory::{align, match_poses, rotation_angle, Trajectory};

/// Value reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// Set when the images were identical and `db` is the cap.
    pub capped: bool,
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Argument(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    if a.data.is_empty() {
        return Err(Error::Argument("empty images".into()));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64)
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<Psnr> {
    if !(peak > 0.0) {
        return Err(Error::Argument(format!("peak must be > 0, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(Psnr { db: PSNR_CAP, capped: true });
    }
    Ok(Psnr { db: (10.0 * (peak * peak / m).log10()).min(PSNR_CAP), capped: false })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over every full 11x11 window and channel, dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Argument(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let k = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        let x = a.channel(c);
        let y = b.channel(c);
        for oy in 0..=h - SSIM_WINDOW {
            for ox in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..SSIM_WINDOW {
                    for i in 0..SSIM_WINDOW {
                        let g = k[i] * k[j];
                        let idx = (oy + j) * w + ox + i;
                        let (u, v) = (x[idx], y[idx]);
                        mx += g * u;
                        my += g * v;
                        sxx += g * u * u;
                        syy += g * v * v;
                        sxy += g * u * v;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    /// Mean rotation error in degrees.
    pub rotation_deg: f64,
    /// Mean translation error in scene units.
    pub translation: f64,
}

/// Mean rotation and translation errors after similarity alignment of
/// `estimated` onto `reference`.
pub fn traj_error(estimated: &Trajectory, reference: &Trajectory) -> Result<TrajectoryError> {
    let sim = align(estimated, reference)?;
    let pairs = match_poses(estimated, reference)?;
    let n = pairs.len() as f64;
    let (mut re, mut te) = (0.0, 0.0);
    for (e, r) in &pairs {
        let aligned = sim.apply_pose(e);
        re += rotation_angle(&aligned.rotation, &r.rotation).to_degrees();
        te += (aligned.translation - r.translation).norm();
    }
    Ok(TrajectoryError { rotation_deg: re / n, translation: te / n })
}

/// Metrics written by the evaluation command.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub re_deg: Option<f64>,
    pub te_units: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, 1, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), Psnr { db: 99.0, capped: true });
        let b = Image::filled(4, 4, 1, 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap().db - 20.0).abs() < 1e-9);
        let c = Image::filled(4, 4, 1, 1.0);
        assert!((psnr(&a, &c, 1.0).unwrap().db - 6.020599913279624).abs() < 1e-9);
        assert!(psnr(&a, &Image::filled(3, 4, 1, 0.5), 1.0).is_err());
    }

    #[test]
    fn ssim_constant_images_use_luminance_only() {
        let a = Image::filled(16, 16, 1, 0.2);
        let b = Image::filled(16, 16, 1, 0.7);
        let c1 = 0.01f64.powi(2);
        let expected = (2.0 * 0.2 * 0.7 + c1) / (0.04 + 0.49 + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Image::filled(8, 8, 1, 0.0), &Image::filled(8, 8, 1, 0.0)).is_err());
    }
}

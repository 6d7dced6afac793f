//! Dataset manifests and the render / colour-fit / evaluate steps shared by
//! the command line and the acceptance runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::color::{fit_color_net, AffineCorrection, ColorDomain, ColorFitConfig};
use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::metrics::{psnr, ssim};
use crate::model::{ColorMode, Model, ModelConfig};
use crate::presets;
use crate::raster::Image;
use crate::rendering::render_view;
use crate::scene::{render_image, AnalyticScene, Camera};
use crate::trainer::TrainConfig;
use crate::trajectory::{Pose, Trajectory};

/// Rays per graph when rendering whole views.
pub const RENDER_CHUNK: usize = 512;

/// Dataset description. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scene: PathBuf,
    pub camera: Camera,
    pub events: PathBuf,
    /// Poses the model trains from (noisy when pose correction is on).
    pub prior_poses: PathBuf,
    pub ground_truth_poses: Option<PathBuf>,
    /// Timestamps of the views used to fit colour correction.
    pub validation_times: Vec<f64>,
    /// Timestamps of the held-out evaluation views.
    pub test_times: Vec<f64>,
    /// Training configuration file; defaults apply when absent.
    pub config: Option<PathBuf>,
    /// Model configuration; the toy model when absent.
    pub model: Option<ModelConfig>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    /// Parses without checking that the referenced files exist.
    pub fn parse(path: &Path) -> Result<Self> {
        let mut m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.camera.validate()?;
        Ok(m)
    }

    /// Parses and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let m = Manifest::parse(path)?;
        let mut files = vec![&m.scene, &m.events, &m.prior_poses];
        files.extend(m.ground_truth_poses.iter());
        files.extend(m.config.iter());
        for f in files {
            let p = m.resolve(f);
            if !p.is_file() {
                return Err(Error::Argument(format!("manifest references missing file {}", p.display())));
            }
        }
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_scene(&self) -> Result<AnalyticScene> {
        AnalyticScene::load(&self.resolve(&self.scene))
    }

    /// Loads the event file and checks its resolution against the camera.
    pub fn load_events(&self) -> Result<EventStream> {
        let s = EventStream::load(&self.resolve(&self.events))?;
        if (s.width, s.height) != (self.camera.width, self.camera.height) {
            return Err(Error::Argument(format!(
                "event file is {}x{} but the camera is {}x{}",
                s.width, s.height, self.camera.width, self.camera.height
            )));
        }
        Ok(s)
    }

    pub fn load_prior(&self) -> Result<Trajectory> {
        Trajectory::load(&self.resolve(&self.prior_poses))
    }

    /// Ground-truth poses, or the prior when none are listed.
    pub fn load_ground_truth(&self) -> Result<Trajectory> {
        match &self.ground_truth_poses {
            Some(p) => Trajectory::load(&self.resolve(p)),
            None => self.load_prior(),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        match &self.config {
            Some(p) => TrainConfig::load(&self.resolve(p)),
            None => Ok(TrainConfig::default()),
        }
    }

    pub fn model_config(&self, pose_net: bool) -> ModelConfig {
        let mut cfg = self.model.unwrap_or_else(|| presets::toy_model(false));
        if pose_net && cfg.pose_net.is_none() {
            cfg.pose_net = Some(Default::default());
        }
        if !pose_net {
            cfg.pose_net = None;
        }
        cfg
    }
}

/// Oracle renders at `times` along `poses`.
pub fn reference_views(scene: &AnalyticScene, camera: &Camera, poses: &Trajectory, times: &[f64]) -> Result<Vec<(Pose, Image)>> {
    times
        .iter()
        .map(|&t| {
            let pose = poses.interpolate(t)?;
            let img = render_image(scene, camera, &pose);
            Ok((pose, img))
        })
        .collect()
}

/// Log-radiance renders of `poses`, one image per pose.
pub fn render_log_views(model: &Model, poses: &[Pose], seed: u64) -> Result<Vec<Image>> {
    poses.iter().map(|p| Ok(render_view(model, p, RENDER_CHUNK, seed)?.log_radiance)).collect()
}

/// Fits both colour corrections against reference views and selects `mode`.
/// Returns the training MSE of the selected correction.
pub fn fit_color_correction(model: &mut Model, views: &[(Pose, Image)], mode: ColorMode, cfg: &ColorFitConfig) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::Argument("colour correction needs at least one reference view".into()));
    }
    let poses: Vec<Pose> = views.iter().map(|v| v.0.clone()).collect();
    let logs: Vec<f64> = render_log_views(model, &poses, 0)?.into_iter().flat_map(|i| i.data).collect();
    let refs: Vec<f64> = views.iter().flat_map(|v| v.1.data.iter().copied()).collect();
    let affine = AffineCorrection::fit(&logs, &refs, ColorDomain::Log)?;
    model.affine = Some(affine);
    let affine_mse = logs
        .iter()
        .zip(refs.chunks(3))
        .map(|(&l, r)| affine.apply(l).iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / refs.len() as f64;
    let mut net = model.color_net.clone();
    let learned_mse = fit_color_net(&mut model.store, &mut net, &logs, &refs, cfg)?;
    model.color_net = net;
    model.color_mode = Some(mode);
    Ok(match mode {
        ColorMode::Affine => affine_mse,
        ColorMode::Learned => learned_mse,
    })
}

/// Colour-corrected render of one view.
pub fn render_color(model: &Model, pose: &Pose, seed: u64) -> Result<Image> {
    let log = render_view(model, pose, RENDER_CHUNK, seed)?.log_radiance;
    let rgb = model.colorize(&log.data)?;
    Ok(Image::new(log.width, log.height, 3, rgb.into_iter().flatten().collect()))
}

/// Mean PSNR and SSIM over paired images.
pub fn image_metrics(predicted: &[Image], reference: &[Image]) -> Result<(f64, f64)> {
    if predicted.len() != reference.len() {
        return Err(Error::Argument(format!(
            "image count mismatch: {} predicted vs {} reference",
            predicted.len(),
            reference.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Argument("no images to evaluate".into()));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (a, b) in predicted.iter().zip(reference) {
        p += psnr(a, b, 1.0)?.db;
        s += ssim(a, b)?;
    }
    let n = predicted.len() as f64;
    Ok((p / n, s / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_reject_count_mismatch() {
        let a = Image::filled(12, 12, 3, 0.5);
        let err = image_metrics(&[a.clone(), a.clone()], &[a]).unwrap_err();
        assert!(err.to_string().contains("2 predicted vs 1 reference"));
    }

    #[test]
    fn manifest_paths_resolve_against_its_directory() {
        let dir = tempfile::tempdir().unwrap();
        let json = r#"{"scene":"scene.json","camera":{"fx":96,"fy":96,"cx":32,"cy":32,"width":64,"height":64},
            "events":"events.bin","prior_poses":"poses.txt","ground_truth_poses":null,
            "validation_times":[0.1],"test_times":[0.2],"config":null,"model":null}"#;
        let path = dir.path().join("m.json");
        std::fs::write(&path, json).unwrap();
        let m = Manifest::parse(&path).unwrap();
        assert_eq!(m.resolve(&m.scene), dir.path().join("scene.json"));
        let err = Manifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("scene.json"));
    }
}

//! Small default setups that train in minutes on a CPU.

use crate::error::Result;
use crate::events::ContrastThresholds;
use crate::field::{EncodingConfig, FieldConfig, WarpMode};
use crate::model::ModelConfig;
use crate::pose_net::PoseNetConfig;
use crate::sampling::{DistanceMode, RayBounds, SamplingConfig};
use crate::scene::{AnalyticScene, Camera, Sphere};
use crate::trajectory::{generate_orbit, SpeedProfile, Trajectory};

pub const TOY_RADIUS: f64 = 4.0;
pub const TOY_RATE: f64 = 250.0;
pub const TOY_THRESHOLD: f64 = 0.25;

/// Grey spheres of different brightness, none centred on the orbit axis.
pub fn toy_scene() -> AnalyticScene {
    let sphere = |center: [f64; 3], radius: f64, grey: f64| Sphere { center, radius, density: 2.0, radiance: [grey; 3] };
    AnalyticScene {
        spheres: vec![
            sphere([0.5, -0.15, 0.1], 0.4, 0.8),
            sphere([0.9, 0.5, 0.5], 0.4, 0.15),
            sphere([-0.7, -0.7, -0.5], 0.45, 0.45),
            sphere([0.3, -0.8, 0.9], 0.35, 0.95),
            sphere([-0.5, 0.7, 0.9], 0.35, 0.25),
            sphere([0.6, -0.3, -1.0], 0.4, 0.6),
            sphere([-1.0, 0.2, 0.0], 0.3, 0.1),
            sphere([0.0, 0.9, -0.9], 0.35, 0.7),
        ],
        background: [0.3; 3],
    }
}

pub fn toy_camera() -> Camera {
    Camera { fx: 96.0, fy: 96.0, cx: 32.0, cy: 32.0, width: 64, height: 64 }
}

pub fn toy_orbit(profile: &SpeedProfile) -> Result<Trajectory> {
    generate_orbit(profile, TOY_RADIUS, 1.0, TOY_RATE)
}

pub fn toy_field() -> FieldConfig {
    FieldConfig {
        vanilla_depth: 3,
        vanilla_width: 64,
        proposal_depth: 2,
        proposal_width: 32,
        encoding: EncodingConfig { position_freqs: 6, direction_freqs: 2 },
        warp: WarpMode::Contract,
        position_scale: 2.0,
        epsilon: 1e-3,
        view_dependent: false,
    }
}

pub fn toy_sampling() -> SamplingConfig {
    SamplingConfig {
        bounds: RayBounds { near: 2.0, far: 1000.0 },
        mode: DistanceMode::Inverse,
        proposal_samples: 32,
        stages: 2,
    }
}

pub fn toy_model(with_pose_net: bool) -> ModelConfig {
    ModelConfig {
        field: toy_field(),
        sampling: toy_sampling(),
        pose_net: with_pose_net.then(PoseNetConfig::default),
        color_width: 16,
        thresholds: ContrastThresholds { positive: TOY_THRESHOLD, negative: TOY_THRESHOLD, learnable: false },
    }
}

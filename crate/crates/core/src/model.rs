//! Everything learnable in one place: fields, pose network, thresholds and
//! colour correction, backed by a single parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{AffineCorrection, ColorNet};
use crate::error::{Error, Result};
use crate::events::ContrastThresholds;
use crate::field::{FieldConfig, ProposalField, VanillaField};
use crate::params::{Bound, Group, ParamStore};
use crate::pose_net::{PoseNet, PoseNetConfig};
use crate::sampling::SamplingConfig;
use crate::scene::Camera;
use crate::tape::{softplus, Graph, Var};
use crate::tensor::Tensor;
use crate::trajectory::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub field: FieldConfig,
    pub sampling: SamplingConfig,
    /// Pose correction network; `None` trains on the supplied poses directly.
    pub pose_net: Option<PoseNetConfig>,
    pub color_width: usize,
    /// Initial contrast thresholds; `learnable` enables joint optimisation.
    pub thresholds: ContrastThresholds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    Affine,
    Learned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub camera: Camera,
    pub store: ParamStore,
    pub vanilla: VanillaField,
    pub proposal: ProposalField,
    pub pose_net: Option<PoseNet>,
    /// Block holding raw `[c_pos, c_neg]`; thresholds are `softplus(raw)`.
    pub threshold_block: usize,
    pub color_net: ColorNet,
    pub affine: Option<AffineCorrection>,
    pub color_mode: Option<ColorMode>,
}

/// `x` such that `softplus(x) = y`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl Model {
    /// Fresh model; `prior` is required when a pose network is configured.
    pub fn new(config: ModelConfig, camera: Camera, prior: Option<&Trajectory>, seed: u64) -> Result<Self> {
        config.field.validate()?;
        config.sampling.validate()?;
        config.thresholds.validate()?;
        camera.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vanilla = VanillaField::build(&mut store, &config.field, &mut rng);
        let proposal = ProposalField::build(&mut store, &config.field, &mut rng);
        let pose_net = match (config.pose_net, prior) {
            (Some(cfg), Some(prior)) => Some(PoseNet::build(&mut store, cfg, prior, &mut rng)?),
            (Some(_), None) => return Err(Error::Argument("pose network needs a prior trajectory".into())),
            (None, _) => None,
        };
        let raw = Tensor::row(&[
            softplus_inverse(config.thresholds.positive),
            softplus_inverse(config.thresholds.negative),
        ]);
        let threshold_block = store.push("thresholds", Group::Threshold, raw, false);
        let color_net = ColorNet::build(&mut store, config.color_width.max(1), &mut rng);
        Ok(Model {
            config,
            camera,
            store,
            vanilla,
            proposal,
            pose_net,
            threshold_block,
            color_net,
            affine: None,
            color_mode: None,
        })
    }

    pub fn thresholds(&self) -> ContrastThresholds {
        let raw = &self.store.blocks[self.threshold_block].value.data;
        ContrastThresholds {
            positive: softplus(raw[0]),
            negative: softplus(raw[1]),
            learnable: self.config.thresholds.learnable,
        }
    }

    /// `[1, 2]` node holding `(c_pos, c_neg)`.
    pub fn thresholds_var(&self, g: &mut Graph, bound: &Bound) -> Var {
        g.softplus(bound.get(self.threshold_block))
    }

    /// Groups that receive gradients during event training.
    pub fn trainable_groups(&self) -> Vec<Group> {
        let mut groups = vec![Group::Vanilla, Group::Proposal];
        if self.pose_net.is_some() {
            groups.push(Group::Pose);
        }
        if self.config.thresholds.learnable {
            groups.push(Group::Threshold);
        }
        groups
    }

    /// Maps rendered log-radiance to display colour with the fitted correction.
    pub fn colorize(&self, log_radiance: &[f64]) -> Result<Vec<[f64; 3]>> {
        match self.color_mode {
            Some(ColorMode::Learned) => Ok(self.color_net.apply(&self.store, log_radiance)),
            Some(ColorMode::Affine) => {
                let a = self.affine.ok_or(Error::State("affine correction not fitted".into()))?;
                Ok(log_radiance.iter().map(|&v| a.apply(v)).collect())
            }
            None => Err(Error::State("no colour correction fitted".into())),
        }
    }
}

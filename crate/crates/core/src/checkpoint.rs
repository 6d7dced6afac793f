//! Model checkpoints: magic, `u64` LE metadata length, JSON metadata, then
//! every parameter as a little-endian `f64` in block order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::color::{AffineCorrection, ColorNet};
use crate::error::{Error, Result};
use crate::events::ContrastThresholds;
use crate::field::{ProposalField, VanillaField};
use crate::model::{ColorMode, Model, ModelConfig};
use crate::params::{Block, Group, ParamStore};
use crate::pose_net::PoseNet;
use crate::scene::Camera;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ENERFCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMeta {
    pub name: String,
    pub group: Group,
    pub rows: usize,
    pub cols: usize,
    pub decay: bool,
}

/// Everything except the parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub camera: Camera,
    /// Current thresholds, for reading without decoding the parameters.
    pub thresholds: ContrastThresholds,
    pub iteration: usize,
    pub vanilla: VanillaField,
    pub proposal: ProposalField,
    pub pose_net: Option<PoseNet>,
    pub threshold_block: usize,
    pub color_net: ColorNet,
    pub affine: Option<AffineCorrection>,
    pub color_mode: Option<ColorMode>,
    pub blocks: Vec<BlockMeta>,
}

pub fn encode(model: &Model, iteration: usize) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        config: model.config,
        camera: model.camera,
        thresholds: model.thresholds(),
        iteration,
        vanilla: model.vanilla.clone(),
        proposal: model.proposal.clone(),
        pose_net: model.pose_net.clone(),
        threshold_block: model.threshold_block,
        color_net: model.color_net.clone(),
        affine: model.affine,
        color_mode: model.color_mode,
        blocks: model
            .store
            .blocks
            .iter()
            .map(|b| BlockMeta { name: b.name.clone(), group: b.group, rows: b.value.rows, cols: b.value.cols, decay: b.decay })
            .collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.store.total_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for b in &model.store.blocks {
        for v in &b.value.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Returns the model and the iteration it was saved at.
pub fn decode(bytes: &[u8]) -> Result<(Model, usize)> {
    let err = |offset, message: &str| Error::Decode { offset, message: message.into() };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(err(0, "not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| err(8, "metadata length exceeds file"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..body]).map_err(|e| err(16, &e.to_string()))?;
    let expected: usize = meta.blocks.iter().map(|b| b.rows * b.cols).sum();
    let payload = &bytes[body..];
    if payload.len() != 8 * expected {
        return Err(err(body, &format!("expected {} parameter bytes, found {}", 8 * expected, payload.len())));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let blocks = meta
        .blocks
        .iter()
        .map(|b| Block {
            name: b.name.clone(),
            group: b.group,
            value: Tensor::from_vec(b.rows, b.cols, values.by_ref().take(b.rows * b.cols).collect()),
            decay: b.decay,
        })
        .collect();
    let store = ParamStore { blocks };
    store.check_finite()?;
    if meta.threshold_block >= store.blocks.len() {
        return Err(err(16, "threshold block index out of range"));
    }
    let model = Model {
        config: meta.config,
        camera: meta.camera,
        store,
        vanilla: meta.vanilla,
        proposal: meta.proposal,
        pose_net: meta.pose_net,
        threshold_block: meta.threshold_block,
        color_net: meta.color_net,
        affine: meta.affine,
        color_mode: meta.color_mode,
    };
    Ok((model, meta.iteration))
}

pub fn save(model: &Model, iteration: usize, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model, iteration)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, usize)> {
    decode(&std::fs::read(path)?)
}

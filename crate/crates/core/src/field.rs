//! Radiance and proposal fields: encoding, space warping and the MLPs.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dual::{self, Dual};
use crate::error::{Error, Result};
use crate::params::{Bound, Dense, Group, ParamStore};
use crate::tape::Graph;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub position_freqs: usize,
    pub direction_freqs: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig { position_freqs: 10, direction_freqs: 4 }
    }
}

/// Length of the encoding of a `dim`-vector with `freqs` octaves.
pub fn encoded_len(dim: usize, freqs: usize) -> usize {
    dim * (1 + 2 * freqs)
}

/// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]`,
/// each block spanning all components of `x`.
pub fn encode(x: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(x.len(), freqs));
    out.extend_from_slice(x);
    for k in 0..freqs {
        let f = (1u64 << k) as f64 * PI;
        out.extend(x.iter().map(|v| (f * v).sin()));
        out.extend(x.iter().map(|v| (f * v).cos()));
    }
    out
}

pub fn encode_dual(g: &mut Graph, x: Dual, freqs: usize) -> Dual {
    let mut parts = vec![x];
    for k in 0..freqs {
        let scaled = dual::scale(g, x, (1u64 << k) as f64 * PI);
        parts.push(dual::sin(g, scaled));
        parts.push(dual::cos(g, scaled));
    }
    dual::concat(g, &parts)
}

/// Forward-facing normalised device coordinates for a pinhole camera looking
/// down -z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdcConfig {
    pub focal_x: f64,
    pub focal_y: f64,
    pub width: f64,
    pub height: f64,
    pub near: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum WarpMode {
    Identity,
    Contract,
    Ndc(NdcConfig),
}

/// Maps a point into the bounded domain seen by the MLPs.
///
/// `Contract` leaves the unit ball unchanged and maps the rest of space into
/// the shell `1 < |y| < 2` via `(2 - 1/|x|) x/|x|`. `Ndc` applies
/// `(-fx/(W/2) x/z, -fy/(H/2) y/z, 1 + 2 near/z)` and needs `z < 0`.
pub fn warp(x: [f64; 3], mode: &WarpMode) -> Result<[f64; 3]> {
    match mode {
        WarpMode::Identity => Ok(x),
        WarpMode::Contract => {
            let n = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            if n <= 1.0 {
                Ok(x)
            } else {
                let f = (2.0 - 1.0 / n) / n;
                Ok([x[0] * f, x[1] * f, x[2] * f])
            }
        }
        WarpMode::Ndc(c) => {
            if !(x[2] < 0.0) {
                return Err(Error::Domain(format!("NDC warp needs z < 0, got {}", x[2])));
            }
            Ok([
                -c.focal_x / (c.width / 2.0) * x[0] / x[2],
                -c.focal_y / (c.height / 2.0) * x[1] / x[2],
                1.0 + 2.0 * c.near / x[2],
            ])
        }
    }
}

pub fn warp_dual(g: &mut Graph, x: Dual, mode: &WarpMode) -> Result<Dual> {
    match mode {
        WarpMode::Identity => Ok(x),
        WarpMode::Contract => {
            let sq = dual::square(g, x);
            let n2 = dual::sum_cols(g, sq);
            let n2 = dual::offset(g, n2, 1e-300);
            let n = dual::sqrt(g, n2);
            let nc = dual::clamp_min(g, n, 1.0);
            let inv = dual::recip(g, nc);
            let inv2 = dual::square(g, inv);
            let two_inv = dual::scale(g, inv, 2.0);
            let factor = dual::sub(g, two_inv, inv2);
            Ok(dual::mul(g, x, factor))
        }
        WarpMode::Ndc(c) => {
            if g.value(x.v).data.chunks(3).any(|p| !(p[2] < 0.0)) {
                return Err(Error::Domain("NDC warp needs z < 0 for every point".into()));
            }
            let px = dual::slice(g, x, 0, 1);
            let py = dual::slice(g, x, 1, 2);
            let pz = dual::slice(g, x, 2, 3);
            let inv_z = dual::recip(g, pz);
            let a = dual::mul(g, px, inv_z);
            let a = dual::scale(g, a, -c.focal_x / (c.width / 2.0));
            let b = dual::mul(g, py, inv_z);
            let b = dual::scale(g, b, -c.focal_y / (c.height / 2.0));
            let z = dual::scale(g, inv_z, 2.0 * c.near);
            let z = dual::offset(g, z, 1.0);
            Ok(dual::concat(g, &[a, b, z]))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub vanilla_depth: usize,
    pub vanilla_width: usize,
    pub proposal_depth: usize,
    pub proposal_width: usize,
    pub encoding: EncodingConfig,
    pub warp: WarpMode,
    /// World positions are divided by this before warping.
    pub position_scale: f64,
    /// Radiance floor.
    pub epsilon: f64,
    /// Feed the encoded view direction to the radiance head.
    #[serde(default = "default_true")]
    pub view_dependent: bool,
}

fn default_true() -> bool {
    true
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            vanilla_depth: 4,
            vanilla_width: 128,
            proposal_depth: 2,
            proposal_width: 64,
            encoding: EncodingConfig::default(),
            warp: WarpMode::Contract,
            position_scale: 1.0,
            epsilon: 1e-3,
            view_dependent: true,
        }
    }
}

impl FieldConfig {
    /// Network sizes used for full-scale reconstructions.
    pub fn full_scale() -> Self {
        FieldConfig {
            vanilla_depth: 8,
            vanilla_width: 1024,
            proposal_depth: 4,
            proposal_width: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vanilla_depth == 0 || self.proposal_depth == 0 || self.vanilla_width < 2 || self.proposal_width == 0 {
            return Err(Error::Argument("field depth and width must be positive".into()));
        }
        if self.encoding.position_freqs == 0 || self.encoding.direction_freqs == 0 {
            return Err(Error::Argument("encodings need at least one frequency".into()));
        }
        if !(self.epsilon > 0.0) || !(self.position_scale > 0.0) {
            return Err(Error::Argument("epsilon and position scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Density trunk, density head and a direction-conditioned radiance head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaField {
    pub trunk: Vec<Dense>,
    pub sigma: Dense,
    pub feature: Dense,
    pub view: Dense,
    pub rgb: Dense,
}

/// Density-only field used to place samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalField {
    pub trunk: Vec<Dense>,
    pub sigma: Dense,
}

fn trunk(
    store: &mut ParamStore,
    name: &str,
    group: Group,
    fan_in: usize,
    depth: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Vec<Dense> {
    (0..depth)
        .map(|i| store.dense(&format!("{name}.trunk{i}"), group, if i == 0 { fan_in } else { width }, width, true, rng))
        .collect()
}

fn run_trunk(g: &mut Graph, bound: &Bound, layers: &[Dense], mut h: Dual) -> Dual {
    for layer in layers {
        h = dense(g, bound, *layer, h);
        h = dual::softplus(g, h);
    }
    h
}

pub fn dense(g: &mut Graph, bound: &Bound, layer: Dense, x: Dual) -> Dual {
    dual::linear(g, x, bound.get(layer.w), bound.get(layer.b))
}

/// Scales and warps world points into MLP coordinates.
pub fn prepare_points(g: &mut Graph, cfg: &FieldConfig, x: Dual) -> Result<Dual> {
    let scaled = dual::scale(g, x, 1.0 / cfg.position_scale);
    warp_dual(g, scaled, &cfg.warp)
}

impl VanillaField {
    pub fn build(store: &mut ParamStore, cfg: &FieldConfig, rng: &mut impl Rng) -> Self {
        let g = Group::Vanilla;
        let w = cfg.vanilla_width;
        let fan_in = encoded_len(3, cfg.encoding.position_freqs);
        let dir_len = if cfg.view_dependent { encoded_len(3, cfg.encoding.direction_freqs) } else { 0 };
        let trunk = trunk(store, "vanilla", g, fan_in, cfg.vanilla_depth, w, rng);
        VanillaField {
            trunk,
            sigma: store.dense("vanilla.sigma", g, w, 1, true, rng),
            feature: store.dense("vanilla.feature", g, w, w, true, rng),
            view: store.dense("vanilla.view", g, w + dir_len, w / 2, true, rng),
            rgb: store.dense("vanilla.rgb", g, w / 2, 3, true, rng),
        }
    }

    /// Density `[M, 1]` and radiance `[M, 3]` for world points `x` and unit
    /// directions `d`, both `[M, 3]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        cfg: &FieldConfig,
        x: Dual,
        d: Dual,
    ) -> Result<(Dual, Dual)> {
        let p = prepare_points(g, cfg, x)?;
        let enc = encode_dual(g, p, cfg.encoding.position_freqs);
        let h = run_trunk(g, bound, &self.trunk, enc);
        let raw_sigma = dense(g, bound, self.sigma, h);
        let sigma = dual::softplus(g, raw_sigma);
        let feat = dense(g, bound, self.feature, h);
        let joined = if cfg.view_dependent {
            let denc = encode_dual(g, d, cfg.encoding.direction_freqs);
            dual::concat(g, &[feat, denc])
        } else {
            feat
        };
        let v = dense(g, bound, self.view, joined);
        let v = dual::softplus(g, v);
        let raw_rgb = dense(g, bound, self.rgb, v);
        let rgb = dual::softplus(g, raw_rgb);
        let rgb = dual::offset(g, rgb, cfg.epsilon);
        Ok((sigma, rgb))
    }
}

impl ProposalField {
    pub fn build(store: &mut ParamStore, cfg: &FieldConfig, rng: &mut impl Rng) -> Self {
        let g = Group::Proposal;
        let fan_in = encoded_len(3, cfg.encoding.position_freqs);
        let trunk = trunk(store, "proposal", g, fan_in, cfg.proposal_depth, cfg.proposal_width, rng);
        ProposalField { trunk, sigma: store.dense("proposal.sigma", g, cfg.proposal_width, 1, true, rng) }
    }

    /// Density `[M, 1]` for world points `[M, 3]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, cfg: &FieldConfig, x: Dual) -> Result<Dual> {
        let p = prepare_points(g, cfg, x)?;
        let enc = encode_dual(g, p, cfg.encoding.position_freqs);
        let h = run_trunk(g, bound, &self.trunk, enc);
        let raw = dense(g, bound, self.sigma, h);
        Ok(dual::softplus(g, raw))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub rgb: [f64; 3],
}

fn points_tensor(points: &[[f64; 3]]) -> Tensor {
    Tensor::from_vec(points.len(), 3, points.iter().flatten().copied().collect())
}

/// Evaluates the vanilla field at a batch of points without recording gradients.
pub fn eval_vanilla(
    store: &ParamStore,
    field: &VanillaField,
    cfg: &FieldConfig,
    x: &[[f64; 3]],
    d: &[[f64; 3]],
) -> Result<Vec<FieldOutput>> {
    store.check_finite()?;
    for dir in d {
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!("view direction must be unit length (norm {n})")));
        }
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g, &[]);
    let xv = dual::constant(&mut g, points_tensor(x), None);
    let dv = dual::constant(&mut g, points_tensor(d), None);
    let (s, c) = field.forward(&mut g, &bound, cfg, xv, dv)?;
    let (s, c) = (g.value(s.v), g.value(c.v));
    Ok((0..x.len())
        .map(|i| FieldOutput { sigma: s.data[i], rgb: [c.data[3 * i], c.data[3 * i + 1], c.data[3 * i + 2]] })
        .collect())
}

pub fn eval_proposal(store: &ParamStore, field: &ProposalField, cfg: &FieldConfig, x: &[[f64; 3]]) -> Result<Vec<f64>> {
    store.check_finite()?;
    let mut g = Graph::new();
    let bound = store.bind(&mut g, &[]);
    let xv = dual::constant(&mut g, points_tensor(x), None);
    let s = field.forward(&mut g, &bound, cfg, xv)?;
    Ok(g.value(s.v).data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoding_layout() {
        let e = encode(&[0.0, 0.0, 0.0], 3);
        assert_eq!(e.len(), 3 + 6 * 3);
        for k in 0..3 {
            assert_eq!(&e[3 + 6 * k..6 + 6 * k], &[0.0; 3]);
            assert_eq!(&e[6 + 6 * k..9 + 6 * k], &[1.0; 3]);
        }
        let e = encode(&[1.0, 0.0, 0.0], 1);
        assert!(e[3].abs() < 1e-15);
        assert_eq!(e[6], -1.0);
    }

    #[test]
    fn encode_dual_matches_plain() {
        let mut g = Graph::new();
        let x = dual::constant(&mut g, Tensor::row(&[0.3, -1.2, 2.5]), None);
        let e = encode_dual(&mut g, x, 4);
        assert_eq!(g.value(e.v).data, encode(&[0.3, -1.2, 2.5], 4));
    }

    #[test]
    fn contraction_cases() {
        assert_eq!(warp([0.3, 0.4, 0.5], &WarpMode::Contract).unwrap(), [0.3, 0.4, 0.5]);
        let y = warp([2.0, 0.0, 0.0], &WarpMode::Contract).unwrap();
        assert!((y[0] - 1.5).abs() < 1e-15 && y[1] == 0.0 && y[2] == 0.0);
        let y = warp([1e6, 0.0, 0.0], &WarpMode::Contract).unwrap();
        assert!((y[0] - (2.0 - 1e-6)).abs() < 1e-12 && y[0] < 2.0);
    }

    #[test]
    fn ndc_rejects_points_behind_camera() {
        let c = NdcConfig { focal_x: 50.0, focal_y: 50.0, width: 100.0, height: 100.0, near: 1.0 };
        assert!(matches!(warp([0.0, 0.0, 1.0], &WarpMode::Ndc(c)), Err(Error::Domain(_))));
        let y = warp([0.0, 0.0, -1.0], &WarpMode::Ndc(c)).unwrap();
        assert_eq!(y, [0.0, 0.0, -1.0]);
        let far = warp([0.0, 0.0, -1e12], &WarpMode::Ndc(c)).unwrap();
        assert!((far[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn warp_dual_matches_plain() {
        let pts = [[0.2, 0.1, -0.3], [3.0, -4.0, 1.0], [0.5, 2.0, -7.0]];
        let c = NdcConfig { focal_x: 40.0, focal_y: 30.0, width: 64.0, height: 48.0, near: 0.5 };
        for mode in [WarpMode::Identity, WarpMode::Contract, WarpMode::Ndc(c)] {
            let mut g = Graph::new();
            let x = dual::constant(&mut g, points_tensor(&pts[2..]), None);
            let y = warp_dual(&mut g, x, &mode).unwrap();
            let plain = warp(pts[2], &mode).unwrap();
            for k in 0..3 {
                assert!((g.value(y.v).data[k] - plain[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_heads_give_softplus_zero_density_and_floored_radiance() {
        let cfg = FieldConfig { vanilla_width: 16, proposal_width: 8, ..FieldConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let v = VanillaField::build(&mut store, &cfg, &mut rng);
        let p = ProposalField::build(&mut store, &cfg, &mut rng);
        for blk in [v.sigma.w, v.sigma.b, p.sigma.w, p.sigma.b] {
            let shape = store.blocks[blk].value.shape();
            store.blocks[blk].value = Tensor::zeros(shape.0, shape.1);
        }
        let out = eval_vanilla(&store, &v, &cfg, &[[0.1, 0.2, 0.3]], &[[0.0, 0.0, 1.0]]).unwrap();
        assert!((out[0].sigma - 2f64.ln()).abs() < 1e-15);
        assert!(out[0].rgb.iter().all(|&c| c >= cfg.epsilon));
        let again = eval_vanilla(&store, &v, &cfg, &[[0.1, 0.2, 0.3]], &[[0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(out, again);
        let s = eval_proposal(&store, &p, &cfg, &[[5.0, 0.0, 0.0]]).unwrap();
        assert!((s[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn full_scale_proposal_is_smaller() {
        let cfg = FieldConfig::full_scale();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        VanillaField::build(&mut store, &cfg, &mut rng);
        ProposalField::build(&mut store, &cfg, &mut rng);
        assert!(store.count(Group::Proposal) < store.count(Group::Vanilla));
    }
}

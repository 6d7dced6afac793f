//! Continuous pose correction: a network mapping a query time and the
//! interpolated prior pose to a residual that is composed onto the prior.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dual::{self, Dual};
use crate::error::{Error, Result};
use crate::field::{dense, encode_dual, encoded_len};
use crate::params::{Bound, Dense, Group, ParamStore};
use crate::tape::Graph;
use crate::tensor::Tensor;
use crate::trajectory::{Pose, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseNetConfig {
    pub width: usize,
    pub hidden_layers: usize,
    /// Octaves of the sinusoidal encoding applied to the joint embedding.
    pub encoder_freqs: usize,
    /// Scale applied to the quaternion part of the residual.
    pub rotation_step: f64,
    /// Scale applied to the translation part of the residual, in scene units.
    pub translation_step: f64,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        PoseNetConfig { width: 64, hidden_layers: 4, encoder_freqs: 1, rotation_step: 0.01, translation_step: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseNet {
    pub config: PoseNetConfig,
    pub prior_head: Dense,
    pub time_head: Dense,
    pub hidden: Vec<Dense>,
    pub output: Dense,
    /// Time span used to normalise the time input to `[0, 1]`.
    pub t_start: f64,
    pub t_end: f64,
    /// Divides prior translations before they enter the network.
    pub translation_scale: f64,
}

impl PoseNet {
    pub fn build(
        store: &mut ParamStore,
        config: PoseNetConfig,
        prior: &Trajectory,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.width == 0 || config.hidden_layers == 0 {
            return Err(Error::Argument("pose network needs positive width and depth".into()));
        }
        if prior.len() < 2 {
            return Err(Error::State("pose network needs a prior with at least 2 poses".into()));
        }
        let w = config.width;
        let g = Group::Pose;
        let enc = encoded_len(w, config.encoder_freqs);
        let prior_head = store.dense("pose.prior_head", g, 7, w, true, rng);
        let time_head = store.dense("pose.time_head", g, 1, w, true, rng);
        let hidden = (0..config.hidden_layers)
            .map(|i| store.dense(&format!("pose.hidden{i}"), g, if i == 0 { enc } else { w }, w, true, rng))
            .collect();
        let output = store.dense_zero("pose.output", g, w, 7, false);
        let translation_scale = prior
            .poses()
            .iter()
            .map(|p| p.translation.norm())
            .fold(0.0, f64::max)
            .max(1e-6);
        Ok(PoseNet {
            config,
            prior_head,
            time_head,
            hidden,
            output,
            t_start: prior.start_time(),
            t_end: prior.end_time(),
            translation_scale,
        })
    }
}

/// Where event-time poses come from.
#[derive(Clone, Copy, Debug)]
pub enum PoseSource<'a> {
    /// Interpolated trajectory (ground truth or prior), differentiable in time.
    Interpolated(&'a Trajectory),
    /// Most recent pose at or before the query time; has no time derivative.
    Nearest(&'a Trajectory),
    /// Prior refined by the correction network.
    Corrected { net: &'a PoseNet, prior: &'a Trajectory },
}

impl PoseSource<'_> {
    pub fn differentiable_in_time(&self) -> bool {
        !matches!(self, PoseSource::Nearest(_))
    }
}

fn col(g: &mut Graph, a: Dual, i: usize) -> Dual {
    dual::slice(g, a, i, i + 1)
}

/// Row-wise Hamilton product of `[R, 4]` quaternions `(w, x, y, z)`.
pub fn quat_mul(g: &mut Graph, a: Dual, b: Dual) -> Dual {
    let [aw, ax, ay, az] = [0, 1, 2, 3].map(|i| col(g, a, i));
    let [bw, bx, by, bz] = [0, 1, 2, 3].map(|i| col(g, b, i));
    let term = |g: &mut Graph, parts: [(f64, Dual, Dual); 4]| {
        let mut acc: Option<Dual> = None;
        for (sign, u, v) in parts {
            let m = dual::mul(g, u, v);
            let m = if sign < 0.0 { dual::neg(g, m) } else { m };
            acc = Some(match acc {
                Some(s) => dual::add(g, s, m),
                None => m,
            });
        }
        acc.unwrap()
    };
    let w = term(g, [(1.0, aw, bw), (-1.0, ax, bx), (-1.0, ay, by), (-1.0, az, bz)]);
    let x = term(g, [(1.0, aw, bx), (1.0, ax, bw), (1.0, ay, bz), (-1.0, az, by)]);
    let y = term(g, [(1.0, aw, by), (-1.0, ax, bz), (1.0, ay, bw), (1.0, az, bx)]);
    let z = term(g, [(1.0, aw, bz), (1.0, ax, by), (-1.0, ay, bx), (1.0, az, bw)]);
    dual::concat(g, &[w, x, y, z])
}

/// Divides each row by its Euclidean norm.
pub fn normalize_rows(g: &mut Graph, a: Dual) -> Dual {
    let sq = dual::square(g, a);
    let n2 = dual::sum_cols(g, sq);
    let n = dual::sqrt(g, n2);
    dual::div(g, a, n)
}

/// Rotates `[R, 3]` vectors by `[R, 4]` unit quaternions.
pub fn quat_rotate(g: &mut Graph, q: Dual, v: Dual) -> Dual {
    // v' = v + 2 w (u x v) + 2 u x (u x v) with u the vector part.
    let w = col(g, q, 0);
    let u = dual::slice(g, q, 1, 4);
    let uv = cross(g, u, v);
    let uuv = cross(g, u, uv);
    let wuv = dual::mul(g, w, uv);
    let sum = dual::add(g, wuv, uuv);
    let sum = dual::scale(g, sum, 2.0);
    dual::add(g, v, sum)
}

fn cross(g: &mut Graph, a: Dual, b: Dual) -> Dual {
    let [a0, a1, a2] = [0, 1, 2].map(|i| col(g, a, i));
    let [b0, b1, b2] = [0, 1, 2].map(|i| col(g, b, i));
    let diff = |g: &mut Graph, p: Dual, q: Dual, r: Dual, s: Dual| {
        let m1 = dual::mul(g, p, q);
        let m2 = dual::mul(g, r, s);
        dual::sub(g, m1, m2)
    };
    let c0 = diff(g, a1, b2, a2, b1);
    let c1 = diff(g, a2, b0, a0, b2);
    let c2 = diff(g, a0, b1, a1, b0);
    dual::concat(g, &[c0, c1, c2])
}

/// Interpolated poses at `times` as `[R, 4]` quaternions and `[R, 3]`
/// translations, with time tangents when `tangent` is set.
fn interpolated(g: &mut Graph, traj: &Trajectory, times: &[f64], tangent: bool) -> Result<(Dual, Dual)> {
    let n = times.len();
    let mut q = Vec::with_capacity(4 * n);
    let mut p = Vec::with_capacity(3 * n);
    let mut dq = Vec::with_capacity(4 * n);
    let mut dp = Vec::with_capacity(3 * n);
    for &t in times {
        let (pose, rate) = traj.interpolate_with_rate(t)?;
        q.extend(pose.wxyz());
        p.extend(pose.translation.iter());
        dq.extend(rate.rotation);
        dp.extend(rate.translation.iter());
    }
    let (tq, tp) = if tangent {
        (Some(Tensor::from_vec(n, 4, dq)), Some(Tensor::from_vec(n, 3, dp)))
    } else {
        (None, None)
    };
    Ok((
        dual::constant(g, Tensor::from_vec(n, 4, q), tq),
        dual::constant(g, Tensor::from_vec(n, 3, p), tp),
    ))
}

/// Camera-to-world rotations and centres at `times`, recorded on `g`.
pub fn poses_dual(
    g: &mut Graph,
    bound: &Bound,
    source: &PoseSource,
    times: &[f64],
    tangent: bool,
) -> Result<(Dual, Dual)> {
    match source {
        PoseSource::Interpolated(traj) => interpolated(g, traj, times, tangent),
        PoseSource::Nearest(traj) => {
            if tangent {
                return Err(Error::Capability(
                    "nearest-pose lookup has no time derivative; use interpolated or corrected poses".into(),
                ));
            }
            let n = times.len();
            let mut q = Vec::with_capacity(4 * n);
            let mut p = Vec::with_capacity(3 * n);
            for &t in times {
                let pose = traj.nearest_before(t)?;
                q.extend(pose.wxyz());
                p.extend(pose.translation.iter());
            }
            Ok((
                dual::constant(g, Tensor::from_vec(n, 4, q), None),
                dual::constant(g, Tensor::from_vec(n, 3, p), None),
            ))
        }
        PoseSource::Corrected { net, prior } => corrected_dual(g, bound, net, prior, times, tangent),
    }
}

fn corrected_dual(
    g: &mut Graph,
    bound: &Bound,
    net: &PoseNet,
    prior: &Trajectory,
    times: &[f64],
    tangent: bool,
) -> Result<(Dual, Dual)> {
    let n = times.len();
    let (qp, pp) = interpolated(g, prior, times, tangent)?;
    let pp_scaled = dual::scale(g, pp, 1.0 / net.translation_scale);
    let prior7 = dual::concat(g, &[qp, pp_scaled]);
    let span = (net.t_end - net.t_start).max(1e-12);
    let tn: Vec<f64> = times.iter().map(|t| (t - net.t_start) / span).collect();
    let dt = if tangent { Some(Tensor::filled(n, 1, 1.0 / span)) } else { None };
    let tn = dual::constant(g, Tensor::from_vec(n, 1, tn), dt);
    let e1 = dense(g, bound, net.prior_head, prior7);
    let e1 = dual::softplus(g, e1);
    let e2 = dense(g, bound, net.time_head, tn);
    let e2 = dual::softplus(g, e2);
    let h = dual::add(g, e1, e2);
    let mut h = encode_dual(g, h, net.config.encoder_freqs);
    for layer in &net.hidden {
        h = dense(g, bound, *layer, h);
        h = dual::softplus(g, h);
    }
    let o = dense(g, bound, net.output, h);
    let orot = dual::slice(g, o, 0, 4);
    let orot = dual::scale(g, orot, net.config.rotation_step);
    let unit = dual::constant(g, Tensor::from_vec(n, 4, [1.0, 0.0, 0.0, 0.0].repeat(n)), None);
    let qd = dual::add(g, unit, orot);
    let qd = normalize_rows(g, qd);
    let q = quat_mul(g, qp, qd);
    let otr = dual::slice(g, o, 4, 7);
    let otr = dual::scale(g, otr, net.config.translation_step);
    let p = dual::add(g, pp, otr);
    Ok((q, p))
}

/// Corrected pose at `t` and its time derivative `(dq/dt as (w, x, y, z), dp/dt)`.
pub fn corrected_pose_with_rate(
    store: &ParamStore,
    net: &PoseNet,
    prior: &Trajectory,
    t: f64,
) -> Result<(Pose, [f64; 4], [f64; 3])> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g, &[]);
    let (q, p) = corrected_dual(&mut g, &bound, net, prior, &[t], true)?;
    let qv = g.value(q.v).data.clone();
    let pv = g.value(p.v).data.clone();
    let dq = g.value(q.t.unwrap()).data.clone();
    let dp = g.value(p.t.unwrap()).data.clone();
    let pose = Pose {
        rotation: nalgebra::UnitQuaternion::new_normalize(nalgebra::Quaternion::new(qv[0], qv[1], qv[2], qv[3])),
        translation: nalgebra::Vector3::new(pv[0], pv[1], pv[2]),
        timestamp: t,
    };
    Ok((pose, [dq[0], dq[1], dq[2], dq[3]], [dp[0], dp[1], dp[2]]))
}

pub fn corrected_pose(store: &ParamStore, net: &PoseNet, prior: &Trajectory, t: f64) -> Result<Pose> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g, &[]);
    let (q, p) = corrected_dual(&mut g, &bound, net, prior, &[t], false)?;
    let qv = &g.value(q.v).data;
    let pv = &g.value(p.v).data;
    Ok(Pose {
        rotation: nalgebra::UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(qv[0], qv[1], qv[2], qv[3])),
        translation: nalgebra::Vector3::new(pv[0], pv[1], pv[2]),
        timestamp: t,
    })
}

/// Corrected poses at every prior timestamp.
pub fn correct_trajectory(store: &ParamStore, net: &PoseNet, prior: &Trajectory) -> Result<Trajectory> {
    let poses = prior
        .poses()
        .iter()
        .map(|p| corrected_pose(store, net, prior, p.timestamp))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(poses)
}

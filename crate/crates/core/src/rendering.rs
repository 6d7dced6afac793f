//! Differentiable volume rendering of event rays.
//!
//! Rendering is split in two: [`plan_samples`] places samples along each ray
//! without recording gradients, then [`render_planned`] evaluates the fields
//! at those fixed distances on the tape. Sample distances are therefore
//! constants of the differentiable pass.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dual::{self, Dual};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Bound;
use crate::pose_net::{poses_dual, quat_rotate, PoseSource};
use crate::raster::Image;
use crate::sampling::{edges_from_samples, two_phase_sample, SamplePlan};
use crate::scene::{Camera, LUMA};
use crate::tape::Graph;
use crate::tensor::Tensor;
use crate::trajectory::Pose;

pub use crate::sampling::compute_weights;

/// A pixel observed at a time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayQuery {
    pub x: usize,
    pub y: usize,
    pub t: f64,
}

/// `[R, 3]` ray origins and unit directions.
#[derive(Clone, Copy, Debug)]
pub struct Rays {
    pub origins: Dual,
    pub dirs: Dual,
}

fn camera_dirs(camera: &Camera, pixels: impl Iterator<Item = (usize, usize)>) -> Tensor {
    let mut data = Vec::new();
    for (x, y) in pixels {
        let d = camera.camera_direction(x as f64 + 0.5, y as f64 + 0.5).normalize();
        data.extend(d.iter());
    }
    Tensor::from_vec(data.len() / 3, 3, data)
}

/// Rays through the queried pixels at the queried times.
pub fn query_rays(
    g: &mut Graph,
    bound: &Bound,
    camera: &Camera,
    source: &PoseSource,
    queries: &[RayQuery],
    tangent: bool,
) -> Result<Rays> {
    for q in queries {
        camera.check_pixel(q.x, q.y)?;
    }
    let times: Vec<f64> = queries.iter().map(|q| q.t).collect();
    let (q, p) = poses_dual(g, bound, source, &times, tangent)?;
    let dc = dual::constant(g, camera_dirs(camera, queries.iter().map(|q| (q.x, q.y))), None);
    let dirs = quat_rotate(g, q, dc);
    Ok(Rays { origins: p, dirs })
}

/// Constant rays from a fixed pose.
pub fn pose_rays(g: &mut Graph, camera: &Camera, pose: &Pose, pixels: &[(usize, usize)]) -> Rays {
    let n = pixels.len();
    let dc = camera_dirs(camera, pixels.iter().copied());
    let r = pose.rotation_matrix();
    let mut d = Vec::with_capacity(3 * n);
    for row in dc.data.chunks(3) {
        let v = r * nalgebra::Vector3::new(row[0], row[1], row[2]);
        d.extend(v.iter());
    }
    let o: Vec<f64> = (0..n).flat_map(|_| pose.translation.iter().copied()).collect();
    Rays {
        origins: dual::constant(g, Tensor::from_vec(n, 3, o), None),
        dirs: dual::constant(g, Tensor::from_vec(n, 3, d), None),
    }
}

/// Numeric origins and directions of recorded rays.
pub fn ray_values(g: &Graph, rays: &Rays) -> Vec<([f64; 3], [f64; 3])> {
    let o = g.value(rays.origins.v);
    let d = g.value(rays.dirs.v);
    (0..o.rows)
        .map(|r| {
            let (a, b) = (o.row_slice(r), d.row_slice(r));
            ([a[0], a[1], a[2]], [b[0], b[1], b[2]])
        })
        .collect()
}

fn positions(rays: &[([f64; 3], [f64; 3])], samples: &[Vec<f64>]) -> Tensor {
    let mut data = Vec::new();
    for ((o, d), ts) in rays.iter().zip(samples) {
        for &t in ts {
            data.extend((0..3).map(|k| o[k] + t * d[k]));
        }
    }
    Tensor::from_vec(data.len() / 3, 3, data)
}

/// Places samples along each ray with the proposal field (no gradients).
pub fn plan_samples(model: &Model, rays: &[([f64; 3], [f64; 3])], rngs: &mut [ChaCha8Rng]) -> Result<Vec<SamplePlan>> {
    let cfg = &model.config.sampling;
    let density = |samples: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g, &[]);
        let x = dual::constant(&mut g, positions(rays, samples), None);
        let sigma = model.proposal.forward(&mut g, &bound, &model.config.field, x)?;
        let flat = &g.value(sigma.v).data;
        let mut out = Vec::with_capacity(samples.len());
        let mut k = 0;
        for s in samples {
            out.push(flat[k..k + s.len()].to_vec());
            k += s.len();
        }
        Ok(out)
    };
    two_phase_sample(cfg, rays.len(), density, rngs)
}

/// Per-ray generators derived from a seed and the ray's index.
pub fn ray_rngs(seed: u64, first: u64, count: usize) -> Vec<ChaCha8Rng> {
    (0..count as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(first + i);
            rng
        })
        .collect()
}

/// Weights `[R, N]` from densities `[R, N]` and constant interval lengths.
pub fn weights_dual(g: &mut Graph, sigma: Dual, delta: Tensor) -> Dual {
    let delta = dual::constant(g, delta, None);
    let tau = dual::mul(g, sigma, delta);
    let before = dual::cumsum_exclusive(g, tau);
    let neg = dual::neg(g, before);
    let transmittance = dual::exp(g, neg);
    let neg_tau = dual::neg(g, tau);
    let survive = dual::exp(g, neg_tau);
    let one_minus = dual::neg(g, survive);
    let alpha = dual::offset(g, one_minus, 1.0);
    dual::mul(g, transmittance, alpha)
}

fn gather_index(rays: usize, per_ray: usize) -> Rc<[usize]> {
    (0..rays).flat_map(|r| std::iter::repeat(r).take(per_ray)).collect::<Vec<_>>().into()
}

/// World sample positions `[R*N, 3]` for constant distances.
fn sample_points(g: &mut Graph, rays: &Rays, samples: &[Vec<f64>]) -> (Dual, Dual) {
    let r = samples.len();
    let n = samples[0].len();
    let idx = gather_index(r, n);
    let o = dual::gather_rows(g, rays.origins, idx.clone());
    let d = dual::gather_rows(g, rays.dirs, idx);
    let t: Vec<f64> = samples.iter().flatten().copied().collect();
    let t = dual::constant(g, Tensor::from_vec(r * n, 1, t), None);
    let td = dual::mul(g, t, d);
    (dual::add(g, o, td), d)
}

fn deltas(edges: &[Vec<f64>]) -> Tensor {
    let n = edges[0].len() - 1;
    let data: Vec<f64> = edges.iter().flat_map(|e| e.windows(2).map(|p| p[1] - p[0])).collect();
    Tensor::from_vec(edges.len(), n, data)
}

/// Output of the differentiable rendering pass.
#[derive(Clone, Debug)]
pub struct Rendered {
    /// `[R, 1]` natural log of rendered mono radiance.
    pub log_radiance: Dual,
    /// `[R, N]` radiance-field weights.
    pub weights: Dual,
    /// Radiance-field interval edges per ray, metric and normalised.
    pub edges: Vec<Vec<f64>>,
    pub s_edges: Vec<Vec<f64>>,
    /// Proposal weights per stage, `[R, N_stage]`, when requested.
    pub proposal_weights: Vec<Dual>,
}

/// Renders log-radiance at fixed sample distances.
///
/// Rendered radiance is `sum_i w_i c_i + (1 - sum_i w_i) eps`, so an opaque
/// ray returns its surface radiance and an empty ray returns the floor.
pub fn render_planned(
    g: &mut Graph,
    bound: &Bound,
    model: &Model,
    rays: &Rays,
    plans: &[SamplePlan],
    with_proposal: bool,
) -> Result<Rendered> {
    let cfg = &model.config;
    let r = plans.len();
    if r == 0 {
        return Err(Error::Argument("nothing to render".into()));
    }
    let far = cfg.sampling.bounds.far;
    let samples: Vec<Vec<f64>> = plans.iter().map(|p| p.samples.clone()).collect();
    let n = samples[0].len();
    let edges: Vec<Vec<f64>> = samples.iter().map(|s| edges_from_samples(s, far)).collect();
    let s_edges: Vec<Vec<f64>> = edges
        .iter()
        .map(|e| e.iter().map(|&t| crate::sampling::to_s(t, &cfg.sampling.bounds, cfg.sampling.mode)).collect())
        .collect();

    let (x, d) = sample_points(g, rays, &samples);
    let (sigma, rgb) = model.vanilla.forward(g, bound, &cfg.field, x, d)?;
    let sigma = dual::reshape(g, sigma, r, n);
    let weights = weights_dual(g, sigma, deltas(&edges));
    let luma = g.constant(Tensor::column(&LUMA));
    let mono = dual::matmul_const(g, rgb, luma);
    let mono = dual::reshape(g, mono, r, n);
    let floored = dual::offset(g, mono, -cfg.field.epsilon);
    let contrib = dual::mul(g, weights, floored);
    let radiance = dual::sum_cols(g, contrib);
    let radiance = dual::offset(g, radiance, cfg.field.epsilon);
    let log_radiance = dual::ln(g, radiance);

    let mut proposal_weights = Vec::new();
    if with_proposal {
        let rays_const = Rays { origins: rays.origins.detach_tangent(), dirs: rays.dirs.detach_tangent() };
        for stage in 0..plans[0].stages.len() {
            let st_edges: Vec<Vec<f64>> = plans.iter().map(|p| p.stages[stage].t.clone()).collect();
            let st_samples: Vec<Vec<f64>> = st_edges.iter().map(|e| e[..e.len() - 1].to_vec()).collect();
            let m = st_samples[0].len();
            let (px, _) = sample_points(g, &rays_const, &st_samples);
            let ps = model.proposal.forward(g, bound, &cfg.field, px)?;
            let ps = dual::reshape(g, ps, r, m);
            proposal_weights.push(weights_dual(g, ps, deltas(&st_edges)).detach_tangent());
        }
    }
    Ok(Rendered { log_radiance, weights, edges, s_edges, proposal_weights })
}

/// Samples and renders `queries` in one go.
#[allow(clippy::too_many_arguments)]
pub fn render_queries(
    g: &mut Graph,
    bound: &Bound,
    model: &Model,
    source: &PoseSource,
    queries: &[RayQuery],
    tangent: bool,
    with_proposal: bool,
    rngs: &mut [ChaCha8Rng],
) -> Result<(Rendered, Vec<SamplePlan>)> {
    let rays = query_rays(g, bound, &model.camera, source, queries, tangent)?;
    let plans = plan_samples(model, &ray_values(g, &rays), rngs)?;
    let out = render_planned(g, bound, model, &rays, &plans, with_proposal)?;
    Ok((out, plans))
}

/// Rendered log-radiance of a single pixel at time `t`.
pub fn render_log_radiance(model: &Model, source: &PoseSource, x: usize, y: usize, t: f64, seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g, &[]);
    let mut rngs = ray_rngs(seed, 0, 1);
    let (out, _) = render_queries(&mut g, &bound, model, source, &[RayQuery { x, y, t }], false, false, &mut rngs)?;
    Ok(g.value(out.log_radiance.v).item())
}

/// Exact time derivative of the rendered log-radiance at fixed sample distances.
pub fn time_gradient(model: &Model, source: &PoseSource, x: usize, y: usize, t: f64, seed: u64) -> Result<f64> {
    if !source.differentiable_in_time() {
        return Err(Error::Capability("pose source is not differentiable in time".into()));
    }
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g, &[]);
    let mut rngs = ray_rngs(seed, 0, 1);
    let (out, _) = render_queries(&mut g, &bound, model, source, &[RayQuery { x, y, t }], true, false, &mut rngs)?;
    let tangent = out.log_radiance.t.ok_or(Error::State("no time tangent recorded".into()))?;
    Ok(g.value(tangent).item())
}

/// Renders `queries` at the given fixed plans, returning log-radiance per ray.
pub fn render_with_plans(model: &Model, source: &PoseSource, queries: &[RayQuery], plans: &[SamplePlan]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g, &[]);
    let rays = query_rays(&mut g, &bound, &model.camera, source, queries, false)?;
    let out = render_planned(&mut g, &bound, model, &rays, plans, false)?;
    Ok(g.value(out.log_radiance.v).data.clone())
}

/// Expected distance `sum w_i t_i / max(sum w_i, 1e-9)`; flags all-zero weights.
pub fn render_depth(weights: &[f64], distances: &[f64]) -> (f64, bool) {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return (0.0, true);
    }
    let num: f64 = weights.iter().zip(distances).map(|(w, t)| w * t).sum();
    (num / total.max(1e-9), false)
}

/// Log-radiance and depth maps of a full view.
#[derive(Clone, Debug)]
pub struct RenderedView {
    pub log_radiance: Image,
    pub depth: Image,
}

/// Renders every pixel from `pose` in chunks of `chunk` rays.
pub fn render_view(model: &Model, pose: &Pose, chunk: usize, seed: u64) -> Result<RenderedView> {
    let cam = &model.camera;
    let pixels: Vec<(usize, usize)> = (0..cam.height).flat_map(|y| (0..cam.width).map(move |x| (x, y))).collect();
    let mut log_l = Vec::with_capacity(pixels.len());
    let mut depth = Vec::with_capacity(pixels.len());
    for (ci, block) in pixels.chunks(chunk.max(1)).enumerate() {
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g, &[]);
        let rays = pose_rays(&mut g, cam, pose, block);
        let mut rngs = ray_rngs(seed, (ci * chunk) as u64, block.len());
        let plans = plan_samples(model, &ray_values(&g, &rays), &mut rngs)?;
        let out = render_planned(&mut g, &bound, model, &rays, &plans, false)?;
        log_l.extend_from_slice(&g.value(out.log_radiance.v).data);
        let w = g.value(out.weights.v);
        for (r, plan) in plans.iter().enumerate() {
            depth.push(render_depth(w.row_slice(r), &plan.samples).0);
        }
    }
    Ok(RenderedView {
        log_radiance: Image::new(cam.width, cam.height, 1, log_l),
        depth: Image::new(cam.width, cam.height, 1, depth),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_examples() {
        let (d, empty) = render_depth(&[0.0, 0.7, 0.0], &[1.0, 3.0, 5.0]);
        assert!((d - 3.0).abs() < 1e-15 && !empty);
        assert!((render_depth(&[0.4, 0.0, 0.4], &[1.0, 3.0, 5.0]).0 - 3.0).abs() < 1e-15);
        assert_eq!(render_depth(&[0.0, 0.0], &[1.0, 2.0]), (0.0, true));
    }

    #[test]
    fn weights_dual_matches_plain() {
        let sigma = [0.3, 1.2, 0.0, 4.0];
        let delta = [0.5, 0.25, 1.0, 0.1];
        let mut g = Graph::new();
        let s = dual::constant(&mut g, Tensor::row(&sigma), None);
        let w = weights_dual(&mut g, s, Tensor::row(&delta));
        let plain = compute_weights(&sigma, &delta);
        for (a, b) in g.value(w.v).data.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

//! Joint optimisation from events: batching, the differentiable batch loss,
//! learning-rate schedule, Adam steps and the finite-difference checker.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventStream};
use crate::losses::{
    distortion_loss_var, gradient_loss_var, proposal_loss_var, reconstruction_loss_var, LossTerms, LossWeights,
};
use crate::model::Model;
use crate::optim::Adam;
use crate::params::{Bound, Group, ParamStore};
use crate::pose_net::PoseSource;
use crate::rendering::{plan_samples, query_rays, ray_rngs, ray_values, render_planned, RayQuery};
use crate::sampling::SamplePlan;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_main: f64,
    pub lr_threshold: f64,
    /// Learning rate of the pose-correction network.
    pub lr_pose: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    /// Fractions of `iterations` after which the learning rates are multiplied by `lr_decay`.
    pub milestones: Vec<f64>,
    /// Target number of ray samples per batch.
    pub sample_budget: usize,
    pub loss_weights: LossWeights,
    pub distortion_self_term: bool,
    /// Events per independently recorded graph.
    pub chunk_events: usize,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            lr_main: 0.01,
            lr_threshold: 0.05,
            lr_pose: 1e-3,
            weight_decay: 1e-6,
            lr_decay: 0.33,
            milestones: vec![0.5, 0.75, 0.9],
            sample_budget: 8192,
            loss_weights: LossWeights::default(),
            distortion_self_term: false,
            chunk_events: 8,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_main > 0.0 && self.lr_threshold > 0.0 && self.lr_pose > 0.0) {
            return Err(Error::Argument("learning rates must be > 0".into()));
        }
        if self.milestones.iter().any(|m| !(*m > 0.0 && *m < 1.0)) {
            return Err(Error::Argument(format!("milestones must lie in (0, 1), got {:?}", self.milestones)));
        }
        if self.sample_budget == 0 || self.chunk_events == 0 {
            return Err(Error::Argument("sample budget and chunk size must be positive".into()));
        }
        self.loss_weights.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `base * decay^k` where `k` counts milestones at or before `iteration`.
pub fn schedule_lr(base: f64, decay: f64, milestones: &[f64], iteration: usize, total: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| iteration as f64 >= m * total as f64).count();
    base * decay.powi(passed as i32)
}

/// Events per batch for a sample budget and an average sample count per event.
pub fn batch_size(budget: usize, samples_per_event: f64) -> usize {
    ((budget as f64 / samples_per_event).floor() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchEvent {
    pub event: Event,
    /// Time strictly inside the event's span at which the rate is supervised.
    pub t_samp: f64,
}

/// Draws `count` events with replacement and a uniform time inside each span.
/// Events with an empty span are skipped; the number skipped is returned.
pub fn sample_batch(stream: &EventStream, count: usize, rng: &mut impl Rng) -> Result<(Vec<BatchEvent>, usize)> {
    if stream.events.is_empty() {
        return Err(Error::State("cannot sample from an empty event stream".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut dropped = 0;
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count.max(1) {
            return Err(Error::State("event stream has no event with a positive span".into()));
        }
        let e = stream.events[rng.gen_range(0..stream.events.len())];
        if !(e.t_curr > e.t_prev) {
            dropped += 1;
            continue;
        }
        let t_samp = loop {
            let t = e.t_prev + rng.gen::<f64>() * (e.t_curr - e.t_prev);
            if t > e.t_prev && t < e.t_curr {
                break t;
            }
        };
        out.push(BatchEvent { event: e, t_samp });
    }
    Ok((out, dropped))
}

/// Fixed sample plans for a batch: value rays `[prev..., curr...]` and rate rays.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub value: Vec<SamplePlan>,
    pub rate: Vec<SamplePlan>,
}

impl BatchPlan {
    pub fn samples(&self) -> usize {
        self.value.iter().chain(&self.rate).map(|p| p.samples.len() + p.stages.iter().map(|s| s.len()).sum::<usize>()).sum()
    }
}

fn value_queries(batch: &[BatchEvent]) -> Vec<RayQuery> {
    let q = |e: &Event, t| RayQuery { x: e.x as usize, y: e.y as usize, t };
    batch.iter().map(|b| q(&b.event, b.event.t_prev)).chain(batch.iter().map(|b| q(&b.event, b.event.t_curr))).collect()
}

fn rate_queries(batch: &[BatchEvent]) -> Vec<RayQuery> {
    batch.iter().map(|b| RayQuery { x: b.event.x as usize, y: b.event.y as usize, t: b.t_samp }).collect()
}

/// Places samples for every ray of `batch` at the current parameters.
pub fn plan_batch(model: &Model, source: &PoseSource, batch: &[BatchEvent], seed: u64) -> Result<BatchPlan> {
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g, &[]);
    let vq = value_queries(batch);
    let rq = rate_queries(batch);
    let vr = query_rays(&mut g, &bound, &model.camera, source, &vq, false)?;
    let rr = query_rays(&mut g, &bound, &model.camera, source, &rq, false)?;
    let mut rngs = ray_rngs(seed, 0, vq.len() + rq.len());
    let (vrng, rrng) = rngs.split_at_mut(vq.len());
    Ok(BatchPlan {
        value: plan_samples(model, &ray_values(&g, &vr), vrng)?,
        rate: plan_samples(model, &ray_values(&g, &rr), rrng)?,
    })
}

/// Per-event loss components recorded on a graph, each `[E, 1]`.
pub struct BatchLoss {
    pub reconstruction: Var,
    pub gradient: Var,
    pub proposal: Var,
    pub distortion: Var,
    /// Vanilla histograms of the value rays as `(edges, weights)`.
    pub vanilla: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Records the batch losses at fixed plans.
///
/// `frozen_vanilla` replaces the vanilla histograms that the proposal loss
/// treats as constants; pass `None` to take them from this graph.
#[allow(clippy::too_many_arguments)]
pub fn record_batch_loss(
    g: &mut Graph,
    bound: &Bound,
    model: &Model,
    source: &PoseSource,
    batch: &[BatchEvent],
    plan: &BatchPlan,
    self_term: bool,
    frozen_vanilla: Option<&[(Vec<f64>, Vec<f64>)]>,
) -> Result<BatchLoss> {
    let e = batch.len();
    let vq = value_queries(batch);
    let rq = rate_queries(batch);
    let vr = query_rays(g, bound, &model.camera, source, &vq, false)?;
    let rendered = render_planned(g, bound, model, &vr, &plan.value, true)?;
    let rr = query_rays(g, bound, &model.camera, source, &rq, true)?;
    let rate_out = render_planned(g, bound, model, &rr, &plan.rate, false)?;

    let thresholds = model.thresholds_var(g, bound);
    let c_bar = g.mean(thresholds);
    let c_col = g.reshape(thresholds, 2, 1);
    let mut select = Tensor::zeros(e, 2);
    let mut inv_span = Tensor::zeros(e, 1);
    for (k, b) in batch.iter().enumerate() {
        let ev = b.event;
        if ev.polarity > 0 {
            select.set(k, 0, 1.0);
        } else {
            select.set(k, 1, -1.0);
        }
        inv_span.data[k] = 1.0 / (ev.t_curr - ev.t_prev);
    }
    let select = g.constant(select);
    let target = g.matmul(select, c_col);

    let log_l = rendered.log_radiance.v;
    let prev = rows(g, log_l, 0, e);
    let curr = rows(g, log_l, e, 2 * e);
    let delta = g.sub(curr, prev);
    let reconstruction = reconstruction_loss_var(g, delta, target, c_bar);

    let inv_span = g.constant(inv_span);
    let rate_target = g.mul(target, inv_span);
    let rate_pred = rate_out.log_radiance.t.ok_or(Error::State("rate rays carry no time tangent".into()))?;
    let gradient = gradient_loss_var(g, rate_pred, rate_target);

    let vanilla: Vec<(Vec<f64>, Vec<f64>)> = {
        let w = g.value(rendered.weights.v);
        rendered.edges.iter().enumerate().map(|(r, edges)| (edges.clone(), w.row_slice(r).to_vec())).collect()
    };
    let hist = frozen_vanilla.unwrap_or(&vanilla);
    let mut per_ray: Option<Var> = None;
    for (stage, pw) in rendered.proposal_weights.iter().enumerate() {
        let edges: Vec<Vec<f64>> = plan.value.iter().map(|p| p.stages[stage].t.clone()).collect();
        let lp = proposal_loss_var(g, hist, pw.v, &edges, c_bar);
        per_ray = Some(match per_ray {
            Some(acc) => g.add(acc, lp),
            None => lp,
        });
    }
    let proposal = per_ray.ok_or(Error::State("no proposal stages rendered".into()))?;
    let proposal = pair_mean(g, proposal, e);
    let distortion = distortion_loss_var(g, rendered.weights.v, &rendered.s_edges, self_term);
    let distortion = pair_mean(g, distortion, e);
    Ok(BatchLoss { reconstruction, gradient, proposal, distortion, vanilla })
}

fn rows(g: &mut Graph, v: Var, start: usize, end: usize) -> Var {
    g.gather_rows(v, (start..end).collect::<Vec<_>>().into())
}

/// Averages the two value rays of every event: `[2E, 1] -> [E, 1]`.
fn pair_mean(g: &mut Graph, per_ray: Var, e: usize) -> Var {
    let a = rows(g, per_ray, 0, e);
    let b = rows(g, per_ray, e, 2 * e);
    let s = g.add(a, b);
    g.scale(s, 0.5)
}

/// Weighted sum over events of the recorded components, divided by `normalizer`.
pub fn weighted_sum(g: &mut Graph, loss: &BatchLoss, w: &LossWeights, normalizer: f64) -> Var {
    let parts = [
        (loss.reconstruction, w.reconstruction),
        (loss.gradient, w.gradient),
        (loss.proposal, w.proposal),
        (loss.distortion, w.distortion),
    ];
    let mut acc: Option<Var> = None;
    for (v, k) in parts {
        let s = g.sum(v);
        let s = g.scale(s, k / normalizer);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    acc.unwrap()
}

fn component_sums(g: &Graph, loss: &BatchLoss) -> LossTerms {
    let s = |v: Var| g.value(v).data.iter().sum::<f64>();
    LossTerms {
        reconstruction: s(loss.reconstruction),
        gradient: s(loss.gradient),
        proposal: s(loss.proposal),
        distortion: s(loss.distortion),
    }
}

/// Mean components of one step plus the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub terms: LossTerms,
    pub total: f64,
    pub batch: usize,
}

/// Event-driven trainer owning the model and optimiser state.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub iteration: usize,
    /// Poses the model renders from: ground truth, or the prior refined by the pose network.
    pub poses: Trajectory,
    pub samples_per_event: f64,
    pub dropped_events: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Model, poses: Trajectory) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model.store);
        let s = &model.config.sampling;
        let per_ray = (s.vanilla_samples() + s.proposal_samples * s.stages) as f64;
        Ok(Trainer { config, model, adam, iteration: 0, poses, samples_per_event: 3.0 * per_ray, dropped_events: 0 })
    }

    pub fn source(&self) -> PoseSource<'_> {
        match &self.model.pose_net {
            Some(net) => PoseSource::Corrected { net, prior: &self.poses },
            None => PoseSource::Interpolated(&self.poses),
        }
    }

    /// Learning rate and decay coefficient per parameter block.
    pub fn block_rates(&self) -> (Vec<f64>, Vec<f64>) {
        let groups = self.model.trainable_groups();
        let c = &self.config;
        let sched = |base| schedule_lr(base, c.lr_decay, &c.milestones, self.iteration, c.iterations);
        let main = sched(c.lr_main);
        let thr = sched(c.lr_threshold);
        let pose = sched(c.lr_pose);
        self.model
            .store
            .blocks
            .iter()
            .map(|b| {
                let lr = if !groups.contains(&b.group) {
                    0.0
                } else if b.group == Group::Threshold {
                    thr
                } else if b.group == Group::Pose {
                    pose
                } else {
                    main
                };
                (lr, if b.decay { c.weight_decay } else { 0.0 })
            })
            .unzip()
    }

    /// One optimisation step on a freshly drawn batch.
    pub fn step(&mut self, stream: &EventStream) -> Result<StepReport> {
        let seed = self.config.seed ^ (self.iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = batch_size(self.config.sample_budget, self.samples_per_event);
        let (batch, dropped) = sample_batch(stream, count, &mut rng)?;
        self.dropped_events += dropped;
        let (grads, terms, samples) = self.batch_gradients(&batch, seed)?;
        let measured = samples as f64 / batch.len() as f64;
        self.samples_per_event = 0.9 * self.samples_per_event + 0.1 * measured;
        for (k, gr) in grads.iter().enumerate() {
            if !gr.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter block {} at iteration {}",
                    self.model.store.blocks[k].name, self.iteration
                )));
            }
        }
        let (lr, decay) = self.block_rates();
        self.adam.update(&mut self.model.store, &grads, &lr, &decay);
        self.model.store.check_finite()?;
        let report = StepReport { iteration: self.iteration, terms, total: self.config.loss_weights.combine(&terms), batch: batch.len() };
        self.iteration += 1;
        Ok(report)
    }

    /// Gradients of the mean batch loss, its mean components and the number
    /// of ray samples used. Chunks are reduced in index order.
    pub fn batch_gradients(&self, batch: &[BatchEvent], seed: u64) -> Result<(Vec<Tensor>, LossTerms, usize)> {
        let groups = self.model.trainable_groups();
        let n = batch.len() as f64;
        let source = self.source();
        let chunks: Vec<&[BatchEvent]> = batch.chunks(self.config.chunk_events).collect();
        let results: Vec<Result<(Vec<Tensor>, LossTerms, usize)>> = chunks
            .par_iter()
            .enumerate()
            .map(|(ci, chunk)| {
                let chunk_seed = seed.wrapping_add(ci as u64 + 1);
                let plan = plan_batch(&self.model, &source, chunk, chunk_seed)?;
                let mut g = Graph::new();
                let bound = self.model.store.bind(&mut g, &groups);
                let loss = record_batch_loss(
                    &mut g,
                    &bound,
                    &self.model,
                    &source,
                    chunk,
                    &plan,
                    self.config.distortion_self_term,
                    None,
                )?;
                let total = weighted_sum(&mut g, &loss, &self.config.loss_weights, n);
                let terms = component_sums(&g, &loss);
                let grads = bound.gradients(&self.model.store, &g.backward(total));
                Ok((grads, terms, plan.samples()))
            })
            .collect();
        let mut grads = self.model.store.zeros_like();
        let mut terms = LossTerms::default();
        let mut samples = 0;
        for r in results {
            let (gr, t, s) = r?;
            for (acc, g) in grads.iter_mut().zip(&gr) {
                acc.add_assign(g);
            }
            terms.reconstruction += t.reconstruction / n;
            terms.gradient += t.gradient / n;
            terms.proposal += t.proposal / n;
            terms.distortion += t.distortion / n;
            samples += s;
        }
        Ok((grads, terms, samples))
    }

    /// Runs the remaining iterations, appending one CSV row per step to `log`.
    pub fn run(
        &mut self,
        stream: &EventStream,
        mut log: Option<&mut dyn Write>,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<Vec<StepReport>> {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{LOSS_CSV_HEADER}")?;
        }
        let mut reports = Vec::with_capacity(self.config.iterations.saturating_sub(self.iteration));
        while self.iteration < self.config.iterations {
            let r = self.step(stream)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", loss_csv_row(&r))?;
            }
            reports.push(r);
            let every = self.config.checkpoint_every;
            if every > 0 && self.iteration % every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(reports)
    }
}

pub const LOSS_CSV_HEADER: &str = "iteration,reconstruction,gradient,proposal,distortion,total";

pub fn loss_csv_row(r: &StepReport) -> String {
    let t = &r.terms;
    format!("{},{},{},{},{},{}", r.iteration, t.reconstruction, t.gradient, t.proposal, t.distortion, r.total)
}

/// Largest relative error found in one parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block: String,
    pub group: Group,
    pub probes: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub blocks: Vec<BlockCheck>,
    /// Relative error of the rendered time derivative on the rate rays.
    pub time_rel_error: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(self.time_rel_error, f64::max)
    }

    pub fn group_error(&self, group: Group) -> Option<f64> {
        self.blocks.iter().filter(|b| b.group == group).map(|b| b.max_rel_error).reduce(f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub probes_per_block: usize,
    pub step: f64,
    pub time_step: f64,
    pub seed: u64,
    /// Deliberately wrong softplus derivative in the analytic pass.
    pub corrupt_backward: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { probes_per_block: 4, step: 1e-3, time_step: 1e-5, seed: 0, corrupt_backward: false }
    }
}

/// Relative error with an absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Gradients below this magnitude are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

fn loss_value(model: &Model, source: &PoseSource, batch: &[BatchEvent], plan: &BatchPlan, w: &LossWeights, frozen: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g, &[]);
    let loss = record_batch_loss(&mut g, &bound, model, source, batch, plan, false, Some(frozen))?;
    let total = weighted_sum(&mut g, &loss, w, batch.len() as f64);
    Ok(g.value(total).item())
}

fn with_prior<T>(model: &Model, prior: Option<&Trajectory>, f: impl FnOnce(&PoseSource) -> Result<T>) -> Result<T> {
    let traj = prior.ok_or(Error::Argument("gradient check needs a trajectory".into()))?;
    let source = match &model.pose_net {
        Some(net) => PoseSource::Corrected { net, prior: traj },
        None => PoseSource::Interpolated(traj),
    };
    f(&source)
}

/// Compares analytic and central-difference gradients of the batch loss
/// for every parameter block, and of the rendered time derivative.
///
/// Sample plans and the vanilla histograms used as constants by the
/// proposal loss are frozen at the unperturbed parameters. Colour blocks are
/// checked through the colour network's own fitting objective.
pub fn grad_check(
    model: &Model,
    poses: &Trajectory,
    batch: &[BatchEvent],
    weights: &LossWeights,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0 && cfg.time_step > 0.0) {
        return Err(Error::Argument("finite-difference steps must be > 0".into()));
    }
    let mut groups = model.trainable_groups();
    if !groups.contains(&Group::Threshold) {
        groups.push(Group::Threshold);
    }
    with_prior(model, Some(poses), |source| {
        let plan = plan_batch(model, source, batch, cfg.seed)?;
        let mut g = Graph::new();
        g.corrupt_softplus_backward(cfg.corrupt_backward);
        let bound = model.store.bind(&mut g, &groups);
        let loss = record_batch_loss(&mut g, &bound, model, source, batch, &plan, false, None)?;
        let total = weighted_sum(&mut g, &loss, weights, batch.len() as f64);
        let analytic = bound.gradients(&model.store, &g.backward(total));
        let frozen = loss.vanilla.clone();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5151);
        let mut blocks = Vec::new();
        let mut probe = model.clone();
        for (k, block) in model.store.blocks.iter().enumerate() {
            if block.group == Group::Color {
                continue;
            }
            let mut worst = 0.0f64;
            let n = block.value.len();
            let probes = cfg.probes_per_block.min(n);
            for _ in 0..probes {
                let i = rng.gen_range(0..n);
                let x0 = block.value.data[i];
                probe.store.blocks[k].value.data[i] = x0 + cfg.step;
                let fp = with_prior(&probe, Some(poses), |s| loss_value(&probe, s, batch, &plan, weights, &frozen))?;
                probe.store.blocks[k].value.data[i] = x0 - cfg.step;
                let fm = with_prior(&probe, Some(poses), |s| loss_value(&probe, s, batch, &plan, weights, &frozen))?;
                probe.store.blocks[k].value.data[i] = x0;
                let numeric = (fp - fm) / (2.0 * cfg.step);
                worst = worst.max(relative_error(analytic[k].data[i], numeric));
            }
            blocks.push(BlockCheck { block: block.name.clone(), group: block.group, probes, max_rel_error: worst });
        }
        blocks.extend(color_grad_check(model, cfg)?);
        let time_rel_error = time_check(model, source, batch, &plan, cfg)?;
        Ok(GradCheckReport { step: cfg.step, blocks, time_rel_error })
    })
}

fn color_grad_check(model: &Model, cfg: &GradCheckConfig) -> Result<Vec<BlockCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC010);
    let xs: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..0.5)).collect();
    let ys: Vec<f64> = (0..48).map(|_| rng.gen_range(0.0..1.0)).collect();
    let net = &model.color_net;
    let mse = |store: &ParamStore| {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, &[]);
        let v = net.mse(&mut g, &bound, &xs, &ys);
        g.value(v).item()
    };
    let mut g = Graph::new();
    g.corrupt_softplus_backward(cfg.corrupt_backward);
    let bound = model.store.bind(&mut g, &[Group::Color]);
    let loss = net.mse(&mut g, &bound, &xs, &ys);
    let analytic = bound.gradients(&model.store, &g.backward(loss));
    let mut store = model.store.clone();
    let mut out = Vec::new();
    for (k, block) in model.store.blocks.iter().enumerate() {
        if block.group != Group::Color {
            continue;
        }
        let mut worst = 0.0f64;
        let probes = cfg.probes_per_block.min(block.value.len());
        for _ in 0..probes {
            let i = rng.gen_range(0..block.value.len());
            let x0 = block.value.data[i];
            store.blocks[k].value.data[i] = x0 + cfg.step;
            let fp = mse(&store);
            store.blocks[k].value.data[i] = x0 - cfg.step;
            let fm = mse(&store);
            store.blocks[k].value.data[i] = x0;
            worst = worst.max(relative_error(analytic[k].data[i], (fp - fm) / (2.0 * cfg.step)));
        }
        out.push(BlockCheck { block: block.name.clone(), group: Group::Color, probes, max_rel_error: worst });
    }
    Ok(out)
}

fn time_check(model: &Model, source: &PoseSource, batch: &[BatchEvent], plan: &BatchPlan, cfg: &GradCheckConfig) -> Result<f64> {
    let rq = rate_queries(batch);
    let render_at = |dt: f64, tangent: bool| -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g, &[]);
        let q: Vec<RayQuery> = rq.iter().map(|r| RayQuery { t: r.t + dt, ..*r }).collect();
        let rays = query_rays(&mut g, &bound, &model.camera, source, &q, tangent)?;
        let out = render_planned(&mut g, &bound, model, &rays, &plan.rate, false)?;
        let tan = out.log_radiance.t.map(|t| g.value(t).data.clone());
        Ok((g.value(out.log_radiance.v).data.clone(), tan))
    };
    let (_, analytic) = render_at(0.0, true)?;
    let analytic = analytic.ok_or(Error::State("no tangent".into()))?;
    let (fp, _) = render_at(cfg.time_step, false)?;
    let (fm, _) = render_at(-cfg.time_step, false)?;
    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        let numeric = (fp[i] - fm[i]) / (2.0 * cfg.time_step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let m = [0.5, 0.75, 0.9];
        let lr = |i| schedule_lr(0.01, 0.33, &m, i, 1000);
        assert_eq!(lr(0), 0.01);
        assert!((lr(501) - 0.0033).abs() < 1e-12);
        assert!((lr(751) - 0.001089).abs() < 1e-12);
        assert!((lr(901) - 3.5937e-4).abs() < 1e-12);
    }

    #[test]
    fn batch_size_example() {
        assert_eq!(batch_size(65_536, 48.0), 1365);
        assert_eq!(batch_size(10, 48.0), 1);
    }
}

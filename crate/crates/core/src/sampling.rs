//! Ray interval machinery: stratified and histogram sampling, normalised
//! distance, the proposal bound and the coarse-to-fine sampling pipeline.
//!
//! A ray's samples `t_1 < ... < t_N` define intervals `[t_i, t_{i+1}]` with
//! `t_{N+1} = t_far`, so a histogram over `N` samples has `N + 1` edges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayBounds {
    pub near: f64,
    pub far: f64,
}

impl RayBounds {
    pub fn new(near: f64, far: f64) -> Result<Self> {
        if !(near > 0.0 && far > near && far.is_finite()) {
            return Err(Error::Argument(format!("ray bounds need 0 < near < far (got {near}, {far})")));
        }
        Ok(RayBounds { near, far })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// `s` linear in `t`; for bounded scenes.
    Linear,
    /// `s` linear in `1/t`; for unbounded scenes.
    Inverse,
}

fn g_of(t: f64, mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::Linear => t,
        DistanceMode::Inverse => 1.0 / t,
    }
}

fn g_inv(v: f64, mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::Linear => v,
        DistanceMode::Inverse => 1.0 / v,
    }
}

/// Normalised distance `s = (g(t) - g(near)) / (g(far) - g(near))`.
pub fn normalize_s(t: f64, bounds: &RayBounds, mode: DistanceMode) -> Result<f64> {
    if !(t >= bounds.near && t <= bounds.far) {
        return Err(Error::Range(format!("distance {t} outside [{}, {}]", bounds.near, bounds.far)));
    }
    Ok(to_s(t, bounds, mode))
}

pub(crate) fn to_s(t: f64, bounds: &RayBounds, mode: DistanceMode) -> f64 {
    let (a, b) = (g_of(bounds.near, mode), g_of(bounds.far, mode));
    ((g_of(t, mode) - a) / (b - a)).clamp(0.0, 1.0)
}

/// Inverse of [`normalize_s`].
pub fn s_to_t(s: f64, bounds: &RayBounds, mode: DistanceMode) -> f64 {
    let (a, b) = (g_of(bounds.near, mode), g_of(bounds.far, mode));
    g_inv(a + s * (b - a), mode).clamp(bounds.near, bounds.far)
}

/// One uniform draw per equal-width stratum of `[lo, hi]`, ascending.
pub fn stratified_unit(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|k| (k as f64 + rng.gen::<f64>()) / n as f64).collect()
}

pub fn sample_stratified(bounds: &RayBounds, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Argument(format!("stratified sampling needs n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = bounds.far - bounds.near;
    Ok(stratified_unit(n, &mut rng).into_iter().map(|u| bounds.near + u * span).collect())
}

/// Uniform density added to every interval before resampling, relative to
/// the total weight.
pub const RESAMPLE_FLOOR: f64 = 1e-4;

/// Inverse-CDF samples from the piecewise-constant density over `edges`
/// with mass proportional to `weights` (plus a small uniform floor),
/// stratified in CDF space. Returns the sorted samples and whether the
/// all-zero fallback (uniform over the edges) was used.
pub fn resample_histogram(edges: &[f64], weights: &[f64], n: usize, rng: &mut impl Rng) -> (Vec<f64>, bool) {
    assert_eq!(edges.len(), weights.len() + 1, "histogram needs one more edge than weight");
    if n == 0 {
        return (Vec::new(), false);
    }
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let fallback = !(total > 0.0);
    let pad = if fallback { 1.0 } else { RESAMPLE_FLOOR * total };
    let mass: Vec<f64> = weights.iter().map(|w| if fallback { pad } else { w.max(0.0) + pad }).collect();
    let sum: f64 = mass.iter().sum();
    let mut cdf = Vec::with_capacity(mass.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for m in &mass {
        acc += m / sum;
        cdf.push(acc);
    }
    *cdf.last_mut().unwrap() = 1.0;
    let us = stratified_unit(n, rng);
    let mut j = 0;
    let mut out = Vec::with_capacity(n);
    for u in us {
        while j + 1 < mass.len() && cdf[j + 1] <= u {
            j += 1;
        }
        let frac = if mass[j] > 0.0 { ((u - cdf[j]) / (cdf[j + 1] - cdf[j])).clamp(0.0, 1.0) } else { 0.0 };
        out.push(edges[j] + frac * (edges[j + 1] - edges[j]));
    }
    (out, fallback)
}

/// Interval edges, their normalised distances and per-interval weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedIntervals {
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub w: Vec<f64>,
}

impl WeightedIntervals {
    pub fn new(t: Vec<f64>, s: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        if t.len() != w.len() + 1 || s.len() != t.len() {
            return Err(Error::Argument("histogram needs |edges| = |weights| + 1".into()));
        }
        if t.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::Argument("histogram edges must be strictly increasing".into()));
        }
        Ok(WeightedIntervals { t, s, w })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.w.iter().sum()
    }
}

/// Edges for samples `t`: the samples followed by `far`.
pub fn edges_from_samples(samples: &[f64], far: f64) -> Vec<f64> {
    let mut e = samples.to_vec();
    e.push(far);
    e
}

/// Strictly increasing copy of sorted samples inside `[near, far)`.
pub fn separate(samples: &mut [f64], bounds: &RayBounds) {
    let min_gap = (bounds.far - bounds.near) * 1e-9;
    let mut prev = f64::NEG_INFINITY;
    for t in samples.iter_mut() {
        *t = t.clamp(bounds.near, bounds.far - min_gap);
        if *t <= prev + min_gap {
            *t = prev + min_gap;
        }
        prev = *t;
    }
}

/// Intervals `[lo, hi)` of proposal indices whose interval overlaps
/// `(query_lo, query_hi)` with positive length.
pub fn overlap_range(proposal_edges: &[f64], query_lo: f64, query_hi: f64) -> (usize, usize) {
    let n = proposal_edges.len() - 1;
    // First interval whose right edge exceeds query_lo.
    let lo = proposal_edges[1..].partition_point(|&e| e <= query_lo);
    // Intervals whose left edge is below query_hi.
    let hi = proposal_edges[..n].partition_point(|&e| e < query_hi);
    (lo, hi.max(lo))
}

/// Total proposal weight of intervals overlapping the query interval; a
/// partial overlap counts the full weight.
pub fn bound(proposal: &WeightedIntervals, query_lo: f64, query_hi: f64) -> f64 {
    let (lo, hi) = overlap_range(&proposal.t, query_lo, query_hi);
    proposal.w[lo..hi].iter().sum()
}

/// Volume rendering weights `w_i = exp(-sum_{l<i} sigma_l delta_l)(1 - exp(-sigma_i delta_i))`.
pub fn compute_weights(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    assert_eq!(sigma.len(), delta.len());
    let mut acc = 0.0f64;
    sigma
        .iter()
        .zip(delta)
        .map(|(&s, &d)| {
            let tau = s * d;
            let w = (-acc).exp() * -(-tau).exp_m1();
            acc += tau;
            w
        })
        .collect()
}

/// Sampling schedule for one ray: the proposal histograms of every stage and
/// the distances handed to the radiance field.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub stages: Vec<WeightedIntervals>,
    pub samples: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub bounds: RayBounds,
    pub mode: DistanceMode,
    /// Samples per proposal stage; the radiance field receives half as many.
    pub proposal_samples: usize,
    pub stages: usize,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        RayBounds::new(self.bounds.near, self.bounds.far)?;
        if self.proposal_samples < 4 || self.stages == 0 {
            return Err(Error::Argument("need >= 4 proposal samples and >= 1 stage".into()));
        }
        Ok(())
    }

    pub fn vanilla_samples(&self) -> usize {
        self.proposal_samples.div_ceil(2)
    }
}

fn draw_in_s(cfg: &SamplingConfig, s_edges: &[f64], weights: &[f64], n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (mut s, _) = resample_histogram(s_edges, weights, n, rng);
    let mut t: Vec<f64> = s.iter_mut().map(|v| s_to_t(*v, &cfg.bounds, cfg.mode)).collect();
    separate(&mut t, &cfg.bounds);
    t
}

/// Coarse-to-fine sampling for a batch of rays.
///
/// `density(ray_samples)` receives the current distances of every ray and
/// returns proposal densities in the same layout. Stage 0 is stratified in
/// `s`; each stage weights its intervals and resamples; the final draw has
/// half as many samples and is returned for the radiance field.
pub fn two_phase_sample(
    cfg: &SamplingConfig,
    rays: usize,
    mut density: impl FnMut(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<SamplePlan>> {
    cfg.validate()?;
    assert_eq!(rngs.len(), rays);
    let n = cfg.proposal_samples;
    let uniform_s: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
    let flat = vec![1.0; n];
    let mut current: Vec<Vec<f64>> =
        rngs.iter_mut().map(|rng| draw_in_s(cfg, &uniform_s, &flat, n, rng)).collect();
    let mut stages: Vec<Vec<WeightedIntervals>> = vec![Vec::new(); rays];
    for stage in 0..cfg.stages {
        let sigma = density(&current)?;
        let count = if stage + 1 == cfg.stages { cfg.vanilla_samples() } else { n };
        for r in 0..rays {
            let t = edges_from_samples(&current[r], cfg.bounds.far);
            let delta: Vec<f64> = t.windows(2).map(|p| p[1] - p[0]).collect();
            let w = compute_weights(&sigma[r], &delta);
            let s: Vec<f64> = t.iter().map(|&v| to_s(v, &cfg.bounds, cfg.mode)).collect();
            let next = draw_in_s(cfg, &s, &w, count, &mut rngs[r]);
            stages[r].push(WeightedIntervals { t, s, w });
            current[r] = next;
        }
    }
    Ok(stages.into_iter().zip(current).map(|(stages, samples)| SamplePlan { stages, samples }).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdfMode {
    Binarized,
    Field,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticPdf {
    pub pdf: Vec<f64>,
    pub transmittance: Vec<f64>,
    /// Set when no density exceeds the threshold in binarized mode.
    pub degenerate: bool,
}

/// Ray-sampling diagnostics over densities at uniformly spaced samples `dt` apart.
///
/// Binarized: `p_i = 1[sigma_i > tau] / sum_j 1[sigma_j > tau]`,
/// `T_i = 1 - sum_{j<i} p_j`. Field: `p_i = sigma_i exp(-sigma_i dt)`,
/// `T_i = exp(-sum_{j<i} sigma_j dt)`.
pub fn diagnostic_pdf(sigma: &[f64], dt: f64, mode: PdfMode, tau: f64) -> Result<DiagnosticPdf> {
    if sigma.is_empty() {
        return Err(Error::Argument("diagnostic pdf needs at least one sample".into()));
    }
    match mode {
        PdfMode::Binarized => {
            let hits: Vec<f64> = sigma.iter().map(|&s| if s > tau { 1.0 } else { 0.0 }).collect();
            let total: f64 = hits.iter().sum();
            let degenerate = total == 0.0;
            let pdf: Vec<f64> = hits.iter().map(|h| if degenerate { 0.0 } else { h / total }).collect();
            let mut acc = 0.0;
            let transmittance = pdf
                .iter()
                .map(|p| {
                    let t = 1.0 - acc;
                    acc += p;
                    t
                })
                .collect();
            Ok(DiagnosticPdf { pdf, transmittance, degenerate })
        }
        PdfMode::Field => {
            let pdf = sigma.iter().map(|&s| s * (-s * dt).exp()).collect();
            let mut acc = 0.0;
            let transmittance = sigma
                .iter()
                .map(|&s| {
                    let t = (-acc * dt).exp();
                    acc += s;
                    t
                })
                .collect();
            Ok(DiagnosticPdf { pdf, transmittance, degenerate: false })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_two_samples() {
        let b = RayBounds::new(1e-9, 1.0).unwrap();
        for seed in 0..50 {
            let s = sample_stratified(&b, 2, seed).unwrap();
            assert!(s[0] < 0.5 && s[1] >= 0.5);
        }
        assert!(sample_stratified(&b, 1, 0).is_err());
    }

    #[test]
    fn s_distance_examples() {
        let b = RayBounds::new(1.0, 4.0).unwrap();
        assert!((normalize_s(2.0, &b, DistanceMode::Inverse).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(normalize_s(1.0, &b, DistanceMode::Inverse).unwrap(), 0.0);
        assert_eq!(normalize_s(4.0, &b, DistanceMode::Linear).unwrap(), 1.0);
        assert_eq!(normalize_s(2.5, &b, DistanceMode::Linear).unwrap(), 0.5);
        assert!(matches!(normalize_s(5.0, &b, DistanceMode::Linear), Err(Error::Range(_))));
        for mode in [DistanceMode::Linear, DistanceMode::Inverse] {
            assert!((s_to_t(to_s(3.3, &b, mode), &b, mode) - 3.3).abs() < 1e-12);
        }
    }

    #[test]
    fn bound_examples() {
        let p = WeightedIntervals::new(vec![0.0, 1.0, 2.0], vec![0.0, 0.5, 1.0], vec![0.3, 0.7]).unwrap();
        assert!((bound(&p, 0.5, 1.5) - 1.0).abs() < 1e-15);
        assert!((bound(&p, 1.2, 1.8) - 0.7).abs() < 1e-15);
        assert_eq!(bound(&p, 2.5, 3.0), 0.0);
        assert_eq!(bound(&p, -1.0, 0.0), 0.0);
        assert!((bound(&p, -1.0, 5.0) - 1.0).abs() < 1e-15);
        // Touching at an edge is not an overlap.
        assert!((bound(&p, 1.0, 1.5) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn resample_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(resample_histogram(&[0.0, 1.0], &[1.0], 0, &mut rng).0.is_empty());
        let (s, fallback) = resample_histogram(&[0.0, 1.0, 2.0, 3.0], &[0.0, 0.0, 0.0], 8, &mut rng);
        assert!(fallback && s.len() == 8);
        let (s, _) = resample_histogram(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 0.0], 100, &mut rng);
        let inside = s.iter().filter(|&&v| (1.0..=2.0).contains(&v)).count();
        assert!(inside >= 99);
        assert!(s.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn weights_examples() {
        let w = compute_weights(&[2f64.ln(), 2f64.ln()], &[1.0, 1.0]);
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        assert_eq!(compute_weights(&[0.0, 0.0], &[1.0, 2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn diagnostic_examples() {
        let d = diagnostic_pdf(&[0.0, 5.0, 0.0], 0.1, PdfMode::Binarized, 1.0).unwrap();
        assert_eq!(d.pdf, vec![0.0, 1.0, 0.0]);
        assert_eq!(d.transmittance, vec![1.0, 1.0, 0.0]);
        let d = diagnostic_pdf(&[0.1, 0.2], 0.1, PdfMode::Binarized, 1.0).unwrap();
        assert!(d.degenerate);
        let d = diagnostic_pdf(&[2.0; 4], 0.5, PdfMode::Field, 0.0).unwrap();
        for (k, t) in d.transmittance.iter().enumerate() {
            assert!((t - (-(k as f64) * 2.0 * 0.5).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn two_phase_halves_final_count() {
        let cfg = SamplingConfig {
            bounds: RayBounds::new(2.0, 6.0).unwrap(),
            mode: DistanceMode::Linear,
            proposal_samples: 64,
            stages: 2,
        };
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(1)];
        let plans = two_phase_sample(&cfg, 1, |rays| Ok(rays.iter().map(|t| vec![0.5; t.len()]).collect()), &mut rngs)
            .unwrap();
        assert_eq!(plans[0].stages.len(), 2);
        assert_eq!(plans[0].stages[0].len(), 64);
        assert_eq!(plans[0].samples.len(), 32);
        assert!(plans[0].samples.windows(2).all(|p| p[0] < p[1]));
    }
}

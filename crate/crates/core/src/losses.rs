//! Training losses, each normalised by the contrast threshold scale.
//!
//! Plain `f64` versions operate on a single event or ray; the `*_var`
//! versions record batched counterparts on a [`Graph`].

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{overlap_range, WeightedIntervals};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Vanilla weights at or below this are left out of the proposal loss.
pub const PROPOSAL_WEIGHT_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub gradient: f64,
    pub proposal: f64,
    pub distortion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { reconstruction: 1.0, gradient: 0.001, proposal: 0.0025, distortion: 0.001 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.reconstruction, self.gradient, self.proposal, self.distortion];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Argument(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }

    pub fn combine(&self, terms: &LossTerms) -> f64 {
        self.reconstruction * terms.reconstruction
            + self.gradient * terms.gradient
            + self.proposal * terms.proposal
            + self.distortion * terms.distortion
    }
}

/// Per-event loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub reconstruction: f64,
    pub gradient: f64,
    pub proposal: f64,
    pub distortion: f64,
}

/// Penalises vanilla weights not covered by the overlapping proposal weights.
pub fn loss_proposal(vanilla: &WeightedIntervals, proposal: &WeightedIntervals, c_bar: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &w) in vanilla.w.iter().enumerate() {
        if w <= PROPOSAL_WEIGHT_FLOOR {
            continue;
        }
        let b = crate::sampling::bound(proposal, vanilla.t[i], vanilla.t[i + 1]);
        acc += ((w - b) / c_bar).max(0.0).powi(2) / w;
    }
    acc
}

pub fn loss_reconstruction(predicted: f64, target: f64, c_bar: f64) -> f64 {
    (predicted - target).powi(2) / (c_bar * c_bar)
}

/// Rate implied by one event: `p C / span`.
pub fn event_rate(polarity: i8, threshold: f64, span: f64) -> Result<f64> {
    if !(span > 0.0) {
        return Err(Error::Degenerate(format!("event span must be positive, got {span}")));
    }
    Ok(f64::from(polarity.signum()) * threshold / span)
}

pub fn loss_gradient(predicted_rate: f64, polarity: i8, threshold: f64, span: f64) -> Result<f64> {
    let target = event_rate(polarity, threshold, span)?;
    Ok(((target - predicted_rate) / target).abs())
}

/// `sum_{i,j} w_i w_j |m_i - m_j|` over interval midpoints in normalised
/// distance, plus `sum_i w_i^2 (s_{i+1} - s_i) / 3` when `self_term` is set.
pub fn loss_distortion(intervals: &WeightedIntervals, self_term: bool) -> f64 {
    let mids: Vec<f64> = intervals.s.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect();
    let w = &intervals.w;
    let mut acc = 0.0;
    for i in 0..w.len() {
        for j in 0..w.len() {
            acc += w[i] * w[j] * (mids[i] - mids[j]).abs();
        }
    }
    if self_term {
        acc += w.iter().zip(intervals.s.windows(2)).map(|(w, s)| w * w * (s[1] - s[0]) / 3.0).sum::<f64>();
    }
    acc
}

/// Weighted mean of per-event components.
pub fn total_loss(batch: &[LossTerms], weights: &LossWeights) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("loss over an empty batch".into()));
    }
    Ok(batch.iter().map(|t| weights.combine(t)).sum::<f64>() / batch.len() as f64)
}

/// Batched proposal loss `[R, 1]`.
///
/// `vanilla` holds the detached vanilla histogram of each ray; `proposal_w`
/// is the recorded `[R, M]` proposal weights over `proposal_edges`.
pub fn proposal_loss_var(
    g: &mut Graph,
    vanilla: &[(Vec<f64>, Vec<f64>)],
    proposal_w: Var,
    proposal_edges: &[Vec<f64>],
    c_bar: Var,
) -> Var {
    let rows = vanilla.len();
    let n = vanilla[0].1.len();
    let mut ranges = Vec::with_capacity(rows * n);
    let mut target = Vec::with_capacity(rows * n);
    let mut inv = Vec::with_capacity(rows * n);
    for ((edges, w), pe) in vanilla.iter().zip(proposal_edges) {
        for i in 0..n {
            if w[i] > PROPOSAL_WEIGHT_FLOOR {
                ranges.push(overlap_range(pe, edges[i], edges[i + 1]));
                target.push(w[i]);
                inv.push(1.0 / w[i]);
            } else {
                ranges.push((0, 0));
                target.push(0.0);
                inv.push(0.0);
            }
        }
    }
    let b = g.range_sum(proposal_w, ranges.into());
    let w = g.constant(Tensor::from_vec(rows, n, target));
    let excess = g.sub(w, b);
    let excess = g.div(excess, c_bar);
    let excess = g.relu(excess);
    let sq = g.square(excess);
    let inv = g.constant(Tensor::from_vec(rows, n, inv));
    let terms = g.mul(sq, inv);
    g.sum_cols(terms)
}

/// Batched distortion loss `[R, 1]` of `[R, N]` weights over normalised edges.
pub fn distortion_loss_var(g: &mut Graph, weights: Var, s_edges: &[Vec<f64>], self_term: bool) -> Var {
    let rows = s_edges.len();
    let n = s_edges[0].len() - 1;
    let mids: Vec<f64> = s_edges.iter().flat_map(|s| s.windows(2).map(|p| 0.5 * (p[0] + p[1]))).collect();
    let cross = g.distortion(weights, Rc::new(Tensor::from_vec(rows, n, mids)));
    if !self_term {
        return cross;
    }
    let widths: Vec<f64> = s_edges.iter().flat_map(|s| s.windows(2).map(|p| (p[1] - p[0]) / 3.0)).collect();
    let widths = g.constant(Tensor::from_vec(rows, n, widths));
    let sq = g.square(weights);
    let own = g.mul(sq, widths);
    let own = g.sum_cols(own);
    g.add(cross, own)
}

/// Batched reconstruction loss `[E, 1]`.
pub fn reconstruction_loss_var(g: &mut Graph, predicted: Var, target: Var, c_bar: Var) -> Var {
    let d = g.sub(predicted, target);
    let d = g.div(d, c_bar);
    g.square(d)
}

/// Batched rate loss `[E, 1]` with `target = p C / span`.
pub fn gradient_loss_var(g: &mut Graph, predicted: Var, target: Var) -> Var {
    let d = g.sub(target, predicted);
    let r = g.div(d, target);
    g.abs(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(t: Vec<f64>, w: Vec<f64>) -> WeightedIntervals {
        let s = t.clone();
        WeightedIntervals::new(t, s, w).unwrap()
    }

    #[test]
    fn proposal_examples() {
        let v = hist(vec![0.0, 1.0], vec![0.5]);
        let p = hist(vec![0.0, 1.0], vec![0.3]);
        assert!((loss_proposal(&v, &p, 0.25) - 1.28).abs() < 1e-12);
        assert!((loss_proposal(&v, &p, 0.5) - 1.28 / 4.0).abs() < 1e-12);
        let covered = hist(vec![0.0, 1.0], vec![0.6]);
        assert_eq!(loss_proposal(&v, &covered, 0.25), 0.0);
        let empty = hist(vec![0.0, 1.0], vec![0.0]);
        assert_eq!(loss_proposal(&empty, &p, 0.25), 0.0);
    }

    #[test]
    fn reconstruction_and_rate_examples() {
        assert!((loss_reconstruction(0.5, 0.25, 0.25) - 1.0).abs() < 1e-12);
        assert_eq!(loss_reconstruction(0.3, 0.3, 0.25), 0.0);
        assert_eq!(loss_reconstruction(-0.5, -0.25, 0.25), loss_reconstruction(0.5, 0.25, 0.25));
        assert!((event_rate(1, 0.25, 0.1).unwrap() - 2.5).abs() < 1e-12);
        assert!((loss_gradient(2.0, 1, 0.25, 0.1).unwrap() - 0.2).abs() < 1e-12);
        assert!(matches!(loss_gradient(2.0, 1, 0.25, 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn distortion_examples() {
        let two = hist(vec![0.0, 0.5, 1.0], vec![0.5, 0.5]);
        assert!((loss_distortion(&two, false) - 0.25).abs() < 1e-12);
        let one = hist(vec![0.0, 0.5, 1.0], vec![0.0, 0.9]);
        assert_eq!(loss_distortion(&one, false), 0.0);
    }

    #[test]
    fn total_examples() {
        let unit = LossTerms { reconstruction: 1.0, gradient: 1.0, proposal: 1.0, distortion: 1.0 };
        assert!((total_loss(&[unit], &LossWeights::default()).unwrap() - 1.0045).abs() < 1e-12);
        assert_eq!(total_loss(&[LossTerms::default()], &LossWeights::default()).unwrap(), 0.0);
        assert!(total_loss(&[], &LossWeights::default()).is_err());
    }

    #[test]
    fn batched_versions_match_plain() {
        let v = hist(vec![2.0, 2.5, 3.0, 4.0], vec![0.2, 0.5, 1e-12]);
        let p = hist(vec![2.0, 2.2, 2.8, 3.5, 4.0], vec![0.1, 0.3, 0.05, 0.2]);
        let mut g = Graph::new();
        let pw = g.constant(Tensor::row(&p.w));
        let c = g.scalar(0.25);
        let lp = proposal_loss_var(&mut g, &[(v.t.clone(), v.w.clone())], pw, &[p.t.clone()], c);
        assert!((g.value(lp).item() - loss_proposal(&v, &p, 0.25)).abs() < 1e-12);
        let s = hist(vec![0.0, 0.1, 0.4, 1.0], vec![0.2, 0.5, 0.1]);
        for self_term in [false, true] {
            let w = g.constant(Tensor::row(&s.w));
            let ld = distortion_loss_var(&mut g, w, &[s.s.clone()], self_term);
            assert!((g.value(ld).item() - loss_distortion(&s, self_term)).abs() < 1e-12);
        }
    }
}

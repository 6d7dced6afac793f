//! Mapping rendered log-radiance to display colour: a per-channel affine
//! least-squares fit and a small learned network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dual::{self, Dual};
use crate::error::{Error, Result};
use crate::field::dense;
use crate::optim::Adam;
use crate::params::{Bound, Dense, Group, ParamStore};
use crate::tape::Graph;
use crate::tensor::Tensor;

/// Slope, intercept and residual sum of squares of a 1-D least-squares line.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Argument("line fit needs at least 2 paired samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx <= 1e-300 * n || sxx <= 1e-24 * x.iter().map(|v| v * v).sum::<f64>() {
        return Err(Error::Degenerate("predictor has zero variance".into()));
    }
    let a = sxy / sxx;
    let b = my - a * mx;
    let rss = x.iter().zip(y).map(|(u, v)| (a * u + b - v).powi(2)).sum();
    Ok((a, b, rss))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorDomain {
    /// Fits `log(reference) = a * log_radiance + b`.
    Log,
    /// Fits `reference = a * exp(log_radiance) + b`.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineCorrection {
    pub domain: ColorDomain,
    pub gain: [f64; 3],
    pub offset: [f64; 3],
    pub residual: [f64; 3],
}

/// Lower clamp on reference values before taking logs.
const LOG_FLOOR: f64 = 1e-4;

impl AffineCorrection {
    /// Fits each channel of `reference` (interleaved RGB) against the mono
    /// predicted log-radiance.
    pub fn fit(log_radiance: &[f64], reference_rgb: &[f64], domain: ColorDomain) -> Result<Self> {
        if reference_rgb.len() != 3 * log_radiance.len() {
            return Err(Error::Argument("reference must hold 3 channels per predicted pixel".into()));
        }
        let x: Vec<f64> = match domain {
            ColorDomain::Log => log_radiance.to_vec(),
            ColorDomain::Linear => log_radiance.iter().map(|v| v.exp()).collect(),
        };
        let mut out = AffineCorrection { domain, gain: [0.0; 3], offset: [0.0; 3], residual: [0.0; 3] };
        for c in 0..3 {
            let y: Vec<f64> = reference_rgb
                .iter()
                .skip(c)
                .step_by(3)
                .map(|&v| match domain {
                    ColorDomain::Log => v.max(LOG_FLOOR).ln(),
                    ColorDomain::Linear => v,
                })
                .collect();
            let (a, b, rss) = fit_line(&x, &y)?;
            out.gain[c] = a;
            out.offset[c] = b;
            out.residual[c] = rss;
        }
        Ok(out)
    }

    pub fn apply(&self, log_radiance: f64) -> [f64; 3] {
        let mut rgb = [0.0; 3];
        for c in 0..3 {
            rgb[c] = match self.domain {
                ColorDomain::Log => (self.gain[c] * log_radiance + self.offset[c]).exp(),
                ColorDomain::Linear => self.gain[c] * log_radiance.exp() + self.offset[c],
            };
        }
        rgb
    }
}

/// `log L -> rgb` network: two softplus hidden layers and a sigmoid output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorNet {
    pub hidden: Vec<Dense>,
    pub output: Dense,
    /// Input standardisation fitted with the network.
    pub input_mean: f64,
    pub input_scale: f64,
}

impl ColorNet {
    pub fn build(store: &mut ParamStore, width: usize, rng: &mut impl Rng) -> Self {
        let g = Group::Color;
        let hidden = vec![store.dense("color.hidden0", g, 1, width, true, rng), store.dense("color.hidden1", g, width, width, true, rng)];
        ColorNet { hidden, output: store.dense("color.output", g, width, 3, true, rng), input_mean: 0.0, input_scale: 1.0 }
    }

    /// RGB in `(0, 1)` for a `[M, 1]` column of log-radiance values.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, log_radiance: Dual) -> Dual {
        let x = dual::offset(g, log_radiance, -self.input_mean);
        let mut h = dual::scale(g, x, 1.0 / self.input_scale);
        for layer in &self.hidden {
            h = dense(g, bound, *layer, h);
            h = dual::softplus(g, h);
        }
        let o = dense(g, bound, self.output, h);
        dual::sigmoid(g, o)
    }

    pub fn apply(&self, store: &ParamStore, log_radiance: &[f64]) -> Vec<[f64; 3]> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, &[]);
        let x = dual::constant(&mut g, Tensor::column(log_radiance), None);
        let y = self.forward(&mut g, &bound, x);
        g.value(y.v).data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    /// Mean squared error against interleaved RGB targets, recorded on `g`.
    pub fn mse(&self, g: &mut Graph, bound: &Bound, log_radiance: &[f64], target_rgb: &[f64]) -> crate::tape::Var {
        let x = dual::constant(g, Tensor::column(log_radiance), None);
        let y = self.forward(g, bound, x);
        let t = g.constant(Tensor::from_vec(log_radiance.len(), 3, target_rgb.to_vec()));
        let d = g.sub(y.v, t);
        let sq = g.square(d);
        g.mean(sq)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorFitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ColorFitConfig {
    fn default() -> Self {
        ColorFitConfig { iterations: 1500, learning_rate: 0.01, batch: 1024, seed: 0 }
    }
}

/// Trains only the colour blocks of `store` by minibatch Adam on MSE.
/// Returns the final full-data MSE.
pub fn fit_color_net(
    store: &mut ParamStore,
    net: &mut ColorNet,
    log_radiance: &[f64],
    target_rgb: &[f64],
    cfg: &ColorFitConfig,
) -> Result<f64> {
    let n = log_radiance.len();
    if n == 0 || target_rgb.len() != 3 * n {
        return Err(Error::Argument("colour fit needs non-empty inputs with 3 targets each".into()));
    }
    let mean = log_radiance.iter().sum::<f64>() / n as f64;
    let var = log_radiance.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    net.input_mean = mean;
    net.input_scale = var.sqrt().max(1e-3);
    let mut adam = Adam::new(store);
    let lr: Vec<f64> =
        store.blocks.iter().map(|b| if b.group == Group::Color { cfg.learning_rate } else { 0.0 }).collect();
    let decay = vec![0.0; store.blocks.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = cfg.batch.clamp(1, n);
    for it in 0..cfg.iterations {
        if it * batch % n < batch {
            order.shuffle(&mut rng);
        }
        let start = it * batch % n;
        let idx: Vec<usize> = (0..batch).map(|k| order[(start + k) % n]).collect();
        let xs: Vec<f64> = idx.iter().map(|&i| log_radiance[i]).collect();
        let ys: Vec<f64> = idx.iter().flat_map(|&i| target_rgb[3 * i..3 * i + 3].iter().copied()).collect();
        let mut g = Graph::new();
        let bound = store.bind(&mut g, &[Group::Color]);
        let loss = net.mse(&mut g, &bound, &xs, &ys);
        let grads = bound.gradients(store, &g.backward(loss));
        adam.update(store, &grads, &lr, &decay);
    }
    store.check_finite()?;
    let mut g = Graph::new();
    let bound = store.bind(&mut g, &[]);
    let loss = net.mse(&mut g, &bound, log_radiance, target_rgb);
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_examples() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let (a, b, r) = fit_line(&x, &x).unwrap();
        assert!((a - 1.0).abs() < 1e-15 && b.abs() < 1e-15 && r < 1e-28);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        let (a, b, r) = fit_line(&x, &y).unwrap();
        assert!((a - 2.0).abs() < 1e-14 && (b - 3.0).abs() < 1e-14 && r < 1e-24);
        assert!(matches!(fit_line(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn affine_scaling_equivariance() {
        let x = [0.1, 0.5, 0.9, 1.3];
        let y = [0.3, 0.2, 0.8, 0.5];
        let (a, b, _) = fit_line(&x, &y).unwrap();
        let ys: Vec<f64> = y.iter().map(|v| 3.0 * v).collect();
        let (a3, b3, _) = fit_line(&x, &ys).unwrap();
        assert!((a3 - 3.0 * a).abs() < 1e-14 && (b3 - 3.0 * b).abs() < 1e-14);
    }

    #[test]
    fn learned_net_fits_constant_and_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mut net = ColorNet::build(&mut store, 16, &mut rng);
        let x: Vec<f64> = (0..64).map(|i| -2.0 + i as f64 * 0.05).collect();
        let y: Vec<f64> = x.iter().flat_map(|_| [0.2, 0.5, 0.7]).collect();
        let cfg = ColorFitConfig { iterations: 400, learning_rate: 0.02, batch: 64, seed: 1 };
        let mse = fit_color_net(&mut store, &mut net, &x, &y, &cfg).unwrap();
        assert!(mse.sqrt() < 1e-3, "rmse {}", mse.sqrt());
        for rgb in net.apply(&store, &[-1e3, 0.0, 1e3]) {
            assert!(rgb.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
}

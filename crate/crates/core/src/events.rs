//! Event generation from a continuous log-radiance signal, stream queries,
//! and the binary event file format.
//!
//! File layout (little-endian): a 20-byte header `"EVNF"`, `u32 version`,
//! `u16 width`, `u16 height`, `f32 c_pos`, `f32 c_neg`; then 21-byte records
//! `u64 t_curr_ns`, `u64 t_prev_ns`, `u16 x`, `u16 y`, `i8 polarity`, sorted
//! by `t_curr`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{pose_log_radiance, AnalyticScene, Camera};
use crate::trajectory::Trajectory;

pub const MAGIC: &[u8; 4] = b"EVNF";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 20;
pub const RECORD_BYTES: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastThresholds {
    pub positive: f64,
    pub negative: f64,
    #[serde(default)]
    pub learnable: bool,
}

impl ContrastThresholds {
    pub fn new(positive: f64, negative: f64) -> Result<Self> {
        let t = ContrastThresholds { positive, negative, learnable: false };
        t.validate()?;
        Ok(t)
    }

    pub fn symmetric(c: f64) -> Result<Self> {
        Self::new(c, c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.positive > 0.0 && self.negative > 0.0 && self.positive.is_finite() && self.negative.is_finite()) {
            return Err(Error::Argument(format!(
                "contrast thresholds must be finite and > 0 (got {}, {})",
                self.positive, self.negative
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.positive + self.negative)
    }

    /// Threshold magnitude for polarity `p`.
    pub fn for_polarity(&self, p: i8) -> f64 {
        if p > 0 {
            self.positive
        } else {
            self.negative
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub polarity: i8,
    /// Timestamp of the previous event at this pixel (or the stream start).
    pub t_prev: f64,
    pub t_curr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub width: usize,
    pub height: usize,
    pub thresholds: ContrastThresholds,
    pub events: Vec<Event>,
}

fn to_ns(t: f64) -> u64 {
    (t * 1e9).round() as u64
}

fn from_ns(ns: u64) -> f64 {
    ns as f64 / 1e9
}

/// Rounds to whole nanoseconds so timestamps survive the file format unchanged.
pub fn quantize_time(t: f64) -> f64 {
    from_ns(to_ns(t))
}

/// Crossing `(t_prev, t_curr, polarity)` produced by [`simulate_signal`].
pub type Crossing = (f64, f64, i8);

/// Threshold-crossing detector on a sampled scalar signal.
///
/// The signal is sampled every `dt` on `[t_start, t_end]`; crossings of the
/// running reference are located by linear interpolation and rounded to
/// nanoseconds. Crossings closer than `refractory` to the previous emission
/// are held back until the window has passed.
pub fn simulate_signal(
    signal: impl Fn(f64) -> Result<f64>,
    t_start: f64,
    t_end: f64,
    dt: f64,
    thresholds: &ContrastThresholds,
    refractory: f64,
) -> Result<Vec<Crossing>> {
    thresholds.validate()?;
    if !(dt > 0.0) || !(refractory >= 0.0) || !(t_end > t_start) {
        return Err(Error::Argument(format!(
            "need dt > 0, refractory >= 0, t_end > t_start (got {dt}, {refractory}, [{t_start}, {t_end}])"
        )));
    }
    let steps = ((t_end - t_start) / dt).ceil().max(1.0) as usize;
    let start_ns = to_ns(t_start);
    let mut out = Vec::new();
    let mut reference = signal(t_start)?;
    let mut last_ns = start_ns;
    let mut last_emit: Option<f64> = None;
    let (mut ta, mut la) = (t_start, reference);
    for k in 1..=steps {
        let tb = if k == steps { t_end } else { t_start + k as f64 * dt };
        let lb = signal(tb)?;
        loop {
            let polarity: i8 = if lb >= reference + thresholds.positive {
                1
            } else if lb <= reference - thresholds.negative {
                -1
            } else {
                break;
            };
            let level = reference + polarity as f64 * thresholds.for_polarity(polarity);
            let frac = if lb != la { ((level - la) / (lb - la)).clamp(0.0, 1.0) } else { 1.0 };
            let mut tc = ta + frac * (tb - ta);
            if let Some(prev) = last_emit {
                tc = tc.max(prev + refractory);
            }
            if tc > tb {
                break;
            }
            let mut ns = to_ns(tc);
            if ns <= last_ns {
                ns = last_ns + 1;
            }
            out.push((from_ns(last_ns), from_ns(ns), polarity));
            last_ns = ns;
            last_emit = Some(tc);
            reference = level;
        }
        ta = tb;
        la = lb;
    }
    Ok(out)
}

/// Renders the oracle per pixel on a `dt` grid and emits events for the
/// whole trajectory span.
pub fn simulate(
    scene: &AnalyticScene,
    camera: &Camera,
    traj: &Trajectory,
    thresholds: &ContrastThresholds,
    refractory: f64,
    dt: f64,
) -> Result<EventStream> {
    camera.validate()?;
    if camera.width > u16::MAX as usize || camera.height > u16::MAX as usize {
        return Err(Error::Argument("sensor too large for the event format".into()));
    }
    let (t0, t1) = (traj.start_time(), traj.end_time());
    if traj.len() < 2 {
        return Err(Error::State("event simulation needs a trajectory with at least 2 poses".into()));
    }
    // Poses on the shared sampling grid, computed once for all pixels.
    let steps = ((t1 - t0) / dt).ceil().max(1.0) as usize;
    let grid: Vec<f64> = (0..=steps).map(|k| if k == steps { t1 } else { t0 + k as f64 * dt }).collect();
    let poses = grid.iter().map(|&t| traj.interpolate(t)).collect::<Result<Vec<_>>>()?;
    let per_pixel: Vec<Vec<Event>> = (0..camera.pixel_count())
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % camera.width, i / camera.width);
            let signal = |t: f64| -> Result<f64> {
                let k = grid.partition_point(|&g| g < t).min(steps);
                Ok(pose_log_radiance(scene, camera, &poses[k], (x, y)))
            };
            let crossings = simulate_signal(signal, t0, t1, dt, thresholds, refractory)?;
            Ok(crossings
                .into_iter()
                .map(|(t_prev, t_curr, polarity)| Event { x: x as u16, y: y as u16, polarity, t_prev, t_curr })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut events: Vec<Event> = per_pixel.into_iter().flatten().collect();
    sort_events(&mut events);
    Ok(EventStream { width: camera.width, height: camera.height, thresholds: *thresholds, events })
}

/// Stable sort on `(t_curr, y, x)`.
pub fn sort_events(events: &mut [Event]) {
    events.sort_by(|a, b| {
        a.t_curr.partial_cmp(&b.t_curr).unwrap().then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x))
    });
}

impl EventStream {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events of one pixel in time order.
    pub fn pixel_events(&self, x: usize, y: usize) -> Vec<Event> {
        self.events.iter().filter(|e| e.x as usize == x && e.y as usize == y).copied().collect()
    }

    /// Indices of each pixel's events, row-major by pixel.
    pub fn per_pixel_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.width * self.height];
        for (i, e) in self.events.iter().enumerate() {
            out[e.y as usize * self.width + e.x as usize].push(i);
        }
        out
    }

    /// Sum of `p * C^p` over the pixel's events with `t_curr` in `(t_a, t_b]`.
    pub fn integrate(&self, x: usize, y: usize, t_a: f64, t_b: f64) -> f64 {
        integrate_events(
            self.events.iter().filter(|e| e.x as usize == x && e.y as usize == y),
            &self.thresholds,
            t_a,
            t_b,
        )
    }

    /// Checks that every pixel's `t_prev` equals its previous `t_curr`.
    pub fn check_chaining(&self, start: f64) -> Result<()> {
        let mut last = vec![start; self.width * self.height];
        for (i, e) in self.events.iter().enumerate() {
            let k = e.y as usize * self.width + e.x as usize;
            if e.t_prev != last[k] || !(e.t_prev < e.t_curr) {
                return Err(Error::State(format!("event {i} at ({}, {}) breaks timestamp chaining", e.x, e.y)));
            }
            last[k] = e.t_curr;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + RECORD_BYTES * self.events.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.thresholds.positive as f32).to_le_bytes());
        out.extend_from_slice(&(self.thresholds.negative as f32).to_le_bytes());
        for e in &self.events {
            out.extend_from_slice(&to_ns(e.t_curr).to_le_bytes());
            out.extend_from_slice(&to_ns(e.t_prev).to_le_bytes());
            out.extend_from_slice(&e.x.to_le_bytes());
            out.extend_from_slice(&e.y.to_le_bytes());
            out.push(e.polarity as u8);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<EventStream> {
        let err = |offset: usize, message: &str| Error::Decode { offset, message: message.to_string() };
        if bytes.len() < HEADER_BYTES {
            return Err(err(bytes.len(), "truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(err(0, "bad magic"));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(err(4, &format!("unsupported version {version}")));
        }
        let (width, height) = (u16_at(8) as usize, u16_at(10) as usize);
        let thresholds = ContrastThresholds {
            positive: f32_at(12) as f64,
            negative: f32_at(16) as f64,
            learnable: false,
        };
        if thresholds.validate().is_err() {
            return Err(err(12, "non-positive contrast threshold"));
        }
        let body = bytes.len() - HEADER_BYTES;
        if body % RECORD_BYTES != 0 {
            let offset = HEADER_BYTES + body / RECORD_BYTES * RECORD_BYTES;
            return Err(err(offset, "truncated event record"));
        }
        let mut events = Vec::with_capacity(body / RECORD_BYTES);
        let mut prev_curr = 0u64;
        for k in 0..body / RECORD_BYTES {
            let o = HEADER_BYTES + k * RECORD_BYTES;
            let (t_curr, t_prev) = (u64_at(o), u64_at(o + 8));
            let (x, y) = (u16_at(o + 16), u16_at(o + 18));
            let polarity = bytes[o + 20] as i8;
            if polarity != 1 && polarity != -1 {
                return Err(err(o + 20, "polarity must be +1 or -1"));
            }
            if x as usize >= width || y as usize >= height {
                return Err(err(o + 16, "pixel outside sensor"));
            }
            if t_prev >= t_curr {
                return Err(err(o, "t_prev must precede t_curr"));
            }
            if t_curr < prev_curr {
                return Err(err(o, "records not sorted by t_curr"));
            }
            prev_curr = t_curr;
            events.push(Event { x, y, polarity, t_prev: from_ns(t_prev), t_curr: from_ns(t_curr) });
        }
        Ok(EventStream { width, height, thresholds, events })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EventStream> {
        EventStream::decode(&std::fs::read(path)?)
    }
}

pub fn integrate_events<'a>(
    events: impl IntoIterator<Item = &'a Event>,
    thresholds: &ContrastThresholds,
    t_a: f64,
    t_b: f64,
) -> f64 {
    events
        .into_iter()
        .filter(|e| e.t_curr > t_a && e.t_curr <= t_b)
        .map(|e| e.polarity as f64 * thresholds.for_polarity(e.polarity))
        .sum()
}

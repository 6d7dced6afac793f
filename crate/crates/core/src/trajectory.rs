//! Time-stamped SE(3) camera trajectories.
//!
//! Poses are camera-to-world: `rotation` maps camera axes (x right, y down,
//! z forward) into the world frame and `translation` is the camera centre.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub timestamp: f64,
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>, timestamp: f64) -> Self {
        Pose { rotation, translation, timestamp }
    }

    /// Quaternion as `(w, x, y, z)`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }
}

/// Time derivative of an interpolated pose.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRate {
    /// d/dt of the quaternion components `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub translation: Vector3<f64>,
}

impl PoseRate {
    pub fn zero() -> Self {
        PoseRate { rotation: [0.0; 4], translation: Vector3::zeros() }
    }
}

/// Ordered poses with LERP/SLERP interpolation between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

fn quat_wxyz(q: &Quaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

impl Trajectory {
    pub fn new(mut poses: Vec<Pose>) -> Result<Self> {
        for (i, p) in poses.iter_mut().enumerate() {
            if !p.timestamp.is_finite() || p.timestamp < 0.0 {
                return Err(Error::Argument(format!(
                    "pose {i} has invalid timestamp {}",
                    p.timestamp
                )));
            }
            if !p.translation.iter().all(|v| v.is_finite()) {
                return Err(Error::Argument(format!("pose {i} has a non-finite translation")));
            }
            p.rotation = UnitQuaternion::new_normalize(p.rotation.into_inner());
        }
        for (i, w) in poses.windows(2).enumerate() {
            if w[1].timestamp <= w[0].timestamp {
                return Err(Error::Argument(format!(
                    "timestamps not strictly increasing at pose {}: {} then {}",
                    i + 1,
                    w[0].timestamp,
                    w[1].timestamp
                )));
            }
        }
        Ok(Trajectory { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.poses.first().map_or(0.0, |p| p.timestamp)
    }

    pub fn end_time(&self) -> f64 {
        self.poses.last().map_or(0.0, |p| p.timestamp)
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.poses.iter().map(|p| p.timestamp).collect()
    }

    fn bracket(&self, t: f64) -> Result<usize> {
        if self.poses.len() < 2 {
            return Err(Error::State(format!(
                "interpolation needs at least 2 poses, trajectory has {}",
                self.poses.len()
            )));
        }
        let (t0, t1) = (self.start_time(), self.end_time());
        if !(t >= t0 && t <= t1) {
            return Err(Error::Range(format!("time {t} outside trajectory span [{t0}, {t1}]")));
        }
        let k = self.poses.partition_point(|p| p.timestamp <= t);
        Ok(k.clamp(1, self.poses.len() - 1) - 1)
    }

    /// Pose at `t`: linear translation, shorter-arc SLERP rotation.
    pub fn interpolate(&self, t: f64) -> Result<Pose> {
        Ok(self.interpolate_with_rate(t)?.0)
    }

    /// Pose at `t` together with its time derivative.
    pub fn interpolate_with_rate(&self, t: f64) -> Result<(Pose, PoseRate)> {
        let i = self.bracket(t)?;
        let (a, b) = (&self.poses[i], &self.poses[i + 1]);
        let span = b.timestamp - a.timestamp;
        let s = (t - a.timestamp) / span;
        let dtrans = (b.translation - a.translation) / span;
        let (q, dq_ds) = slerp_with_derivative(&a.rotation, &b.rotation, s);
        let rate = PoseRate {
            rotation: [dq_ds[0] / span, dq_ds[1] / span, dq_ds[2] / span, dq_ds[3] / span],
            translation: dtrans,
        };
        if t == a.timestamp {
            return Ok((Pose { timestamp: t, ..a.clone() }, rate));
        }
        if t == b.timestamp {
            return Ok((Pose { timestamp: t, ..b.clone() }, rate));
        }
        let translation = a.translation + (b.translation - a.translation) * s;
        Ok((Pose { rotation: q, translation, timestamp: t }, rate))
    }

    /// Sample-and-hold lookup of the most recent pose at or before `t`.
    pub fn nearest_before(&self, t: f64) -> Result<Pose> {
        let i = self.bracket(t)?;
        let p = if t == self.poses[i + 1].timestamp { &self.poses[i + 1] } else { &self.poses[i] };
        Ok(Pose { timestamp: t, ..p.clone() })
    }

    pub fn map_poses(&self, f: impl Fn(&Pose) -> Pose) -> Result<Trajectory> {
        Trajectory::new(self.poses.iter().map(f).collect())
    }

    pub fn load(path: &Path) -> Result<Trajectory> {
        let text = std::fs::read_to_string(path)?;
        parse_pose_text(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pose_text())?;
        Ok(())
    }

    /// One `t tx ty tz qw qx qy qz` line per pose.
    pub fn to_pose_text(&self) -> String {
        let mut s = String::new();
        for p in &self.poses {
            let [w, x, y, z] = p.wxyz();
            let tr = p.translation;
            let _ = writeln!(s, "{} {} {} {} {} {} {} {}", p.timestamp, tr.x, tr.y, tr.z, w, x, y, z);
        }
        s
    }
}

pub fn parse_pose_text(text: &str, source: &str) -> Result<Trajectory> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse { path: source.to_string(), line: lineno + 1, message };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|e| err(format!("bad number {tok:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", vals.len())));
        }
        let q = Quaternion::new(vals[4], vals[5], vals[6], vals[7]);
        if q.norm() < 1e-12 {
            return Err(err("zero quaternion".into()));
        }
        poses.push(Pose {
            timestamp: vals[0],
            translation: Vector3::new(vals[1], vals[2], vals[3]),
            rotation: UnitQuaternion::new_normalize(q),
        });
    }
    Trajectory::new(poses)
}

/// SLERP along the shorter arc and its derivative with respect to `s`.
pub fn slerp_with_derivative(
    q0: &UnitQuaternion<f64>,
    q1: &UnitQuaternion<f64>,
    s: f64,
) -> (UnitQuaternion<f64>, [f64; 4]) {
    let a = *q0.quaternion();
    let mut b = *q1.quaternion();
    if a.coords.dot(&b.coords) < 0.0 {
        b = -b;
    }
    let delta = a.conjugate() * b;
    let v = delta.imag();
    let vn = v.norm();
    if vn < 1e-12 {
        let q = a + (b - a) * s;
        let d = b - a;
        return (UnitQuaternion::new_normalize(q), quat_wxyz(&d));
    }
    let phi = vn.atan2(delta.w);
    let axis = v / vn;
    let (sn, cs) = (s * phi).sin_cos();
    let step = Quaternion::from_parts(cs, axis * sn);
    let dstep = Quaternion::from_parts(-phi * sn, axis * (phi * cs));
    let q = a * step;
    let dq = a * dstep;
    (UnitQuaternion::new_normalize(q), quat_wxyz(&dq))
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_angle(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let d = a.quaternion().coords.dot(&b.quaternion().coords).abs().min(1.0);
    2.0 * d.acos()
}

/// Camera-to-world rotation for a camera at `eye` looking at `target` with
/// world `up`, in the x-right / y-down / z-forward convention.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> UnitQuaternion<f64> {
    let forward = (target - eye).normalize();
    let right = forward.cross(up).normalize();
    let down = forward.cross(&right);
    let m = Matrix3::from_columns(&[right, down, forward]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedKind {
    Uniform,
    Oscillating,
}

/// Camera speed profile along an orbit.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpeedProfile {
    pub kind: SpeedKind,
    /// Oscillation frequency in Hz.
    pub frequency: f64,
    /// Ratio between the fastest speed and the base speed (and base to slowest).
    pub span: f64,
}

impl SpeedProfile {
    pub fn uniform() -> Self {
        SpeedProfile { kind: SpeedKind::Uniform, frequency: 1.0, span: 1.0 }
    }

    /// The "hard" setting: speed swings between 1/8x and 8x at 1 Hz.
    pub fn oscillating() -> Self {
        SpeedProfile { kind: SpeedKind::Oscillating, frequency: 1.0, span: 8.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.span >= 1.0) {
            return Err(Error::Argument(format!("speed span must be >= 1, got {}", self.span)));
        }
        if self.kind == SpeedKind::Oscillating && !(self.frequency > 0.0) {
            return Err(Error::Argument(format!(
                "oscillation frequency must be > 0, got {}",
                self.frequency
            )));
        }
        Ok(())
    }

    /// Instantaneous speed multiplier `m(t) = span^sin(2 pi f t)`.
    pub fn multiplier(&self, t: f64) -> f64 {
        match self.kind {
            SpeedKind::Uniform => 1.0,
            SpeedKind::Oscillating => self.span.powf((2.0 * PI * self.frequency * t).sin()),
        }
    }

    /// Base linear speed that sweeps a full circle of `radius` in `duration`.
    pub fn base_speed(&self, radius: f64, duration: f64) -> f64 {
        2.0 * PI * radius / cumulative_multiplier(self, &[duration], 4096)[0]
    }
}

/// `M(t) = integral_0^t m(u) du` at each of `times` (ascending), Simpson's rule
/// with `steps_per_unit` panels per second.
fn cumulative_multiplier(profile: &SpeedProfile, times: &[f64], steps_per_unit: usize) -> Vec<f64> {
    if profile.kind == SpeedKind::Uniform || profile.span == 1.0 {
        return times.to_vec();
    }
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    let mut prev = 0.0;
    for &t in times {
        let len = t - prev;
        if len > 0.0 {
            let panels = ((len * steps_per_unit as f64).ceil() as usize).max(2) & !1usize;
            let panels = panels.max(2);
            let h = len / panels as f64;
            let mut s = profile.multiplier(prev) + profile.multiplier(t);
            for k in 1..panels {
                let w = if k % 2 == 1 { 4.0 } else { 2.0 };
                s += w * profile.multiplier(prev + k as f64 * h);
            }
            acc += s * h / 3.0;
        }
        out.push(acc);
        prev = t;
    }
    out
}

/// Full 360 degree orbit in the z = 0 plane around the origin, camera
/// looking at the origin with +z up. Includes both endpoints, so a
/// 1 s orbit at 250 Hz has 251 poses (250 intervals).
pub fn generate_orbit(
    profile: &SpeedProfile,
    radius: f64,
    duration: f64,
    rate: f64,
) -> Result<Trajectory> {
    profile.validate()?;
    if !(radius > 0.0 && duration > 0.0 && rate > 0.0) {
        return Err(Error::Argument(format!(
            "orbit needs positive radius, duration and rate (got {radius}, {duration}, {rate})"
        )));
    }
    let intervals = ((duration * rate).round() as usize).max(1);
    let times: Vec<f64> =
        (0..=intervals).map(|k| duration * k as f64 / intervals as f64).collect();
    let cumulative = cumulative_multiplier(profile, &times, 65536);
    let total = *cumulative.last().unwrap();
    let up = Vector3::new(0.0, 0.0, 1.0);
    let poses = times
        .iter()
        .zip(&cumulative)
        .map(|(&t, &m)| {
            let phi = 2.0 * PI * m / total;
            let eye = Vector3::new(radius * phi.cos(), radius * phi.sin(), 0.0);
            Pose { rotation: look_at(&eye, &Vector3::zeros(), &up), translation: eye, timestamp: t }
        })
        .collect();
    Trajectory::new(poses)
}

/// Applies independent random rotation (uniform axis, half-normal angle in
/// degrees) and Gaussian translation noise to every pose.
pub fn perturb(traj: &Trajectory, rot_sigma_deg: f64, trans_sigma: f64, seed: u64) -> Result<Trajectory> {
    if !(rot_sigma_deg >= 0.0 && trans_sigma >= 0.0) {
        return Err(Error::Argument("noise sigmas must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let poses = traj
        .poses()
        .iter()
        .map(|p| {
            let mut out = p.clone();
            if rot_sigma_deg > 0.0 {
                let axis = loop {
                    let v = Vector3::new(unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng));
                    if v.norm() > 1e-9 {
                        break Unit::new_normalize(v);
                    }
                };
                let angle = (unit.sample(&mut rng) * rot_sigma_deg).abs().to_radians();
                out.rotation = p.rotation * UnitQuaternion::from_axis_angle(&axis, angle);
            }
            if trans_sigma > 0.0 {
                out.translation += Vector3::new(
                    unit.sample(&mut rng) * trans_sigma,
                    unit.sample(&mut rng) * trans_sigma,
                    unit.sample(&mut rng) * trans_sigma,
                );
            }
            out
        })
        .collect();
    Trajectory::new(poses)
}

/// Similarity transform `x -> scale * R x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sim3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Sim3 {
    pub fn identity() -> Self {
        Sim3 { rotation: UnitQuaternion::identity(), translation: Vector3::zeros(), scale: 1.0 }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * pose.rotation,
            translation: self.apply_point(&pose.translation),
            timestamp: pose.timestamp,
        }
    }

    pub fn apply(&self, traj: &Trajectory) -> Result<Trajectory> {
        traj.map_poses(|p| self.apply_pose(p))
    }
}

/// Pairs `estimated` poses with every reference timestamp inside the
/// estimated span, interpolating where timestamps differ.
pub fn match_poses(estimated: &Trajectory, reference: &Trajectory) -> Result<Vec<(Pose, Pose)>> {
    let (t0, t1) = (estimated.start_time(), estimated.end_time());
    reference
        .poses()
        .iter()
        .filter(|r| r.timestamp >= t0 && r.timestamp <= t1)
        .map(|r| Ok((estimated.interpolate(r.timestamp)?, r.clone())))
        .collect()
}

/// Least-squares similarity transform taking estimated positions onto the
/// reference positions (Umeyama's closed form).
pub fn align(estimated: &Trajectory, reference: &Trajectory) -> Result<Sim3> {
    let pairs = match_poses(estimated, reference)?;
    let src: Vec<Vector3<f64>> = pairs.iter().map(|(e, _)| e.translation).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|(_, r)| r.translation).collect();
    umeyama(&src, &dst)
}

pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3> {
    if src.len() != dst.len() {
        return Err(Error::Argument("alignment point sets differ in length".into()));
    }
    if src.len() < 3 {
        return Err(Error::Argument(format!("alignment needs at least 3 poses, got {}", src.len())));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (sc, dc) = (s - mu_s, d - mu_d);
        cov += dc * sc.transpose();
        var_s += sc.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if var_s <= 1e-300 || sv[0] <= 1e-300 || sv[1] <= 1e-10 * sv[0] {
        return Err(Error::Degenerate("positions are collinear or coincident".into()));
    }
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    let d = Matrix3::from_diagonal(&svd.singular_values);
    let scale = (d * sign).trace() / var_s;
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Sim3 { rotation, translation, scale })
}

/// Quaternion components as a 4-vector `(w, x, y, z)`.
pub fn wxyz_vec(q: &UnitQuaternion<f64>) -> Vector4<f64> {
    let q = q.quaternion();
    Vector4::new(q.w, q.i, q.j, q.k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_pose(q1: UnitQuaternion<f64>, p1: Vector3<f64>) -> Trajectory {
        Trajectory::new(vec![
            Pose::new(UnitQuaternion::identity(), Vector3::zeros(), 0.0),
            Pose::new(q1, p1, 1.0),
        ])
        .unwrap()
    }

    #[test]
    fn endpoints_are_reproduced_exactly() {
        let q1 = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let traj = two_pose(q1, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(traj.interpolate(0.0).unwrap(), traj.poses()[0]);
        assert_eq!(traj.interpolate(1.0).unwrap(), traj.poses()[1]);
    }

    #[test]
    fn slerp_midpoint_of_quarter_turn_is_eighth_turn() {
        let z = Vector3::z_axis();
        let traj = two_pose(UnitQuaternion::from_axis_angle(&z, PI / 2.0), Vector3::zeros());
        let mid = traj.interpolate(0.5).unwrap();
        let expected = UnitQuaternion::from_axis_angle(&z, PI / 4.0);
        assert!(rotation_angle(&mid.rotation, &expected) < 1e-12);
    }

    #[test]
    fn translation_is_linear() {
        let traj = two_pose(UnitQuaternion::identity(), Vector3::new(2.0, 0.0, 0.0));
        let p = traj.interpolate(0.25).unwrap();
        assert_relative_eq!(p.translation, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn shorter_arc_is_taken_for_negated_quaternion() {
        let z = Vector3::z_axis();
        let q1 = UnitQuaternion::from_axis_angle(&z, 0.2);
        // Same rotation, opposite hemisphere representative.
        let neg = UnitQuaternion::new_unchecked(-q1.into_inner());
        let traj = two_pose(neg, Vector3::zeros());
        let mid = traj.interpolate(0.5).unwrap();
        assert!(rotation_angle(&mid.rotation, &UnitQuaternion::from_axis_angle(&z, 0.1)) < 1e-12);
    }

    #[test]
    fn interpolation_errors() {
        let traj = two_pose(UnitQuaternion::identity(), Vector3::zeros());
        assert!(matches!(traj.interpolate(1.5), Err(Error::Range(_))));
        assert!(matches!(traj.interpolate(-0.1), Err(Error::Range(_))));
        let single = Trajectory::new(vec![traj.poses()[0].clone()]).unwrap();
        assert!(matches!(single.interpolate(0.0), Err(Error::State(_))));
    }

    #[test]
    fn non_increasing_timestamps_rejected() {
        let p = Pose::new(UnitQuaternion::identity(), Vector3::zeros(), 1.0);
        assert!(Trajectory::new(vec![p.clone(), p]).is_err());
    }

    #[test]
    fn rate_matches_finite_difference() {
        let q1 = UnitQuaternion::from_euler_angles(0.4, 0.1, -0.9);
        let traj = two_pose(q1, Vector3::new(1.0, -2.0, 0.5));
        let t = 0.37;
        let (_, rate) = traj.interpolate_with_rate(t).unwrap();
        let h = 1e-6;
        let a = wxyz_vec(&traj.interpolate(t + h).unwrap().rotation);
        let b = wxyz_vec(&traj.interpolate(t - h).unwrap().rotation);
        let fd = (a - b) / (2.0 * h);
        for k in 0..4 {
            assert_relative_eq!(rate.rotation[k], fd[k], epsilon = 1e-7);
        }
        assert_relative_eq!(rate.translation, Vector3::new(1.0, -2.0, 0.5), epsilon = 1e-12);
    }

    #[test]
    fn pose_text_round_trip() {
        let traj = generate_orbit(&SpeedProfile::uniform(), 3.0, 0.1, 100.0).unwrap();
        let text = traj.to_pose_text();
        let back = parse_pose_text(&text, "mem").unwrap();
        assert_eq!(back, traj);
        let bad = parse_pose_text("0 1 2 3\n", "mem");
        assert!(matches!(bad, Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn look_at_points_forward_axis_at_target() {
        let eye = Vector3::new(4.0, 0.0, 0.0);
        let q = look_at(&eye, &Vector3::zeros(), &Vector3::z());
        let forward = q * Vector3::z();
        assert_relative_eq!(forward, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-12);
        let down = q * Vector3::y();
        assert_relative_eq!(down, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
    }
}

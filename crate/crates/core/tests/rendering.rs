use enerf::field::WarpMode;
use enerf::model::{softplus_inverse, Model};
use enerf::params::Group;
use enerf::pose_net::PoseSource;
use enerf::presets::{toy_camera, toy_model, toy_orbit};
use enerf::rendering::{plan_samples, query_rays, ray_rngs, ray_values, render_log_radiance, render_with_plans, time_gradient, RayQuery};
use enerf::sampling::SamplePlan;
use enerf::tape::Graph;
use enerf::trajectory::{Pose, SpeedProfile, Trajectory};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Vanilla field whose log radiance is `slope * world_x + offset` behind an
/// opaque first sample. Softplus units run with a large bias so they act as
/// identities.
fn linear_model(slope: f64, offset: f64, sigma_bias: f64) -> Model {
    const LIFT: f64 = 50.0;
    const SCALE: f64 = 10.0;
    let mut cfg = toy_model(false);
    cfg.field.position_scale = SCALE;
    cfg.field.warp = WarpMode::Identity;
    cfg.field.epsilon = 1e-12;
    let mut m = Model::new(cfg, toy_camera(), None, 0).unwrap();
    for b in &mut m.store.blocks {
        if b.group == Group::Vanilla {
            b.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let v = m.vanilla.clone();
    let set = |m: &mut Model, block: usize, idx: usize, val: f64| m.store.blocks[block].value.data[idx] = val;
    set(&mut m, v.trunk[0].w, 0, 1.0);
    set(&mut m, v.trunk[0].b, 0, LIFT);
    for layer in &v.trunk[1..] {
        set(&mut m, layer.w, 0, 1.0);
    }
    set(&mut m, v.sigma.b, 0, sigma_bias);
    set(&mut m, v.feature.w, 0, 1.0);
    set(&mut m, v.view.w, 0, 1.0);
    // raw rgb = a * (x / SCALE + LIFT) + b, so a = slope * SCALE.
    let a = slope * SCALE;
    for c in 0..3 {
        set(&mut m, v.rgb.w, c, a);
        set(&mut m, v.rgb.b, c, offset - a * LIFT);
    }
    m
}

fn moving_camera(speed: f64) -> Trajectory {
    let pose = |t: f64| Pose::new(UnitQuaternion::identity(), Vector3::new(speed * t, 0.0, 0.0), t);
    Trajectory::new(vec![pose(0.0), pose(1.0)]).unwrap()
}

fn plans(model: &Model, source: &PoseSource, queries: &[RayQuery], seed: u64) -> Vec<SamplePlan> {
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g, &[]);
    let rays = query_rays(&mut g, &bound, &model.camera, source, queries, false).unwrap();
    let mut rngs = ray_rngs(seed, 0, queries.len());
    plan_samples(model, &ray_values(&g, &rays), &mut rngs).unwrap()
}

#[test]
fn opaque_field_renders_its_radiance() {
    let c: f64 = 0.6;
    let model = linear_model(0.0, softplus_inverse(c - 1e-12), 1e5);
    let traj = moving_camera(0.0);
    for (x, y) in [(0, 0), (32, 32), (63, 10)] {
        let l = render_log_radiance(&model, &PoseSource::Interpolated(&traj), x, y, 0.5, 3).unwrap();
        assert!((l - c.ln()).abs() < 1e-6, "{l} vs {}", c.ln());
    }
}

#[test]
fn empty_field_renders_the_floor() {
    let mut cfg = toy_model(false);
    cfg.field.epsilon = 1e-3;
    let mut model = Model::new(cfg, toy_camera(), None, 1).unwrap();
    let b = model.vanilla.sigma.b;
    model.store.blocks[b].value.data[0] = -80.0;
    let w = model.vanilla.sigma.w;
    model.store.blocks[w].value.data.iter_mut().for_each(|v| *v = 0.0);
    let traj = toy_orbit(&SpeedProfile::uniform()).unwrap();
    let l = render_log_radiance(&model, &PoseSource::Interpolated(&traj), 20, 40, 0.3, 0).unwrap();
    assert!(l.is_finite());
    assert!((l - 1e-3f64.ln()).abs() < 1e-9, "{l}");
}

#[test]
fn static_camera_has_zero_time_gradient() {
    let model = Model::new(toy_model(false), toy_camera(), None, 2).unwrap();
    let traj = toy_orbit(&SpeedProfile::uniform()).unwrap();
    let fixed = traj.poses()[10].clone();
    let still = Trajectory::new(vec![Pose { timestamp: 0.0, ..fixed.clone() }, Pose { timestamp: 1.0, ..fixed }]).unwrap();
    let g = time_gradient(&model, &PoseSource::Interpolated(&still), 30, 31, 0.4, 0).unwrap();
    assert_eq!(g, 0.0);
}

#[test]
fn nearest_pose_source_has_no_time_gradient() {
    let model = Model::new(toy_model(false), toy_camera(), None, 2).unwrap();
    let traj = toy_orbit(&SpeedProfile::uniform()).unwrap();
    assert!(matches!(
        time_gradient(&model, &PoseSource::Nearest(&traj), 1, 1, 0.5, 0),
        Err(enerf::Error::Capability(_))
    ));
}

#[test]
fn ramp_scene_gradient_equals_slope() {
    let (slope, speed) = (0.7, 2.0);
    let model = linear_model(slope, -15.0, 1e5);
    let traj = moving_camera(speed);
    let source = PoseSource::Interpolated(&traj);
    for (x, y, t) in [(32, 32, 0.2), (5, 50, 0.5), (60, 3, 0.8)] {
        let g = time_gradient(&model, &source, x, y, t, 7).unwrap();
        assert!((g / (slope * speed) - 1.0).abs() < 1e-3, "{g}");
    }
}

#[test]
fn time_gradient_matches_central_differences() {
    let model = Model::new(toy_model(false), toy_camera(), None, 5).unwrap();
    let traj = toy_orbit(&SpeedProfile::uniform()).unwrap();
    let source = PoseSource::Interpolated(&traj);
    let knots = traj.timestamps();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for probe in 0..100 {
        // Stay away from pose knots, where the interpolated path has a kink.
        let k = rng.gen_range(0..knots.len() - 1);
        let t = knots[k] + (knots[k + 1] - knots[k]) * rng.gen_range(0.2..0.8);
        let q = RayQuery { x: rng.gen_range(0..64), y: rng.gen_range(0..64), t };
        let p = plans(&model, &source, &[q], probe);
        let analytic = {
            let mut g = Graph::new();
            let bound = model.store.bind(&mut g, &[]);
            let rays = query_rays(&mut g, &bound, &model.camera, &source, &[q], true).unwrap();
            let out = enerf::rendering::render_planned(&mut g, &bound, &model, &rays, &p, false).unwrap();
            g.value(out.log_radiance.t.unwrap()).item()
        };
        let at = |dt: f64| render_with_plans(&model, &source, &[RayQuery { t: t + dt, ..q }], &p).unwrap()[0];
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(err);
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn parameter_gradients_match_central_differences() {
    let model = Model::new(toy_model(false), toy_camera(), None, 8).unwrap();
    let traj = toy_orbit(&SpeedProfile::uniform()).unwrap();
    let source = PoseSource::Interpolated(&traj);
    let q = RayQuery { x: 30, y: 28, t: 0.41 };
    let p = plans(&model, &source, &[q], 0);
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g, &[Group::Vanilla]);
    let rays = query_rays(&mut g, &bound, &model.camera, &source, &[q], false).unwrap();
    let out = enerf::rendering::render_planned(&mut g, &bound, &model, &rays, &p, false).unwrap();
    let grads = bound.gradients(&model.store, &g.backward(out.log_radiance.v));
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut probe = model.clone();
    for (k, block) in model.store.blocks.iter().enumerate() {
        if block.group != Group::Vanilla {
            continue;
        }
        for _ in 0..3 {
            let i = rng.gen_range(0..block.value.len());
            let x0 = block.value.data[i];
            probe.store.blocks[k].value.data[i] = x0 + h;
            let fp = render_with_plans(&probe, &source, &[q], &p).unwrap()[0];
            probe.store.blocks[k].value.data[i] = x0 - h;
            let fm = render_with_plans(&probe, &source, &[q], &p).unwrap()[0];
            probe.store.blocks[k].value.data[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[k].data[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            assert!(err < 1e-4, "{} [{i}]: analytic {analytic} numeric {numeric}", block.name);
        }
    }
}

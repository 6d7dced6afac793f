use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use enerf::checkpoint;
use enerf::color::ColorFitConfig;
use enerf::events::{simulate, ContrastThresholds, EventStream};
use enerf::metrics::{traj_error, EvalMetrics};
use enerf::model::{ColorMode, Model};
use enerf::pipeline::{fit_color_correction, image_metrics, reference_views, render_color, Manifest, RENDER_CHUNK};
use enerf::pose_net::{correct_trajectory, PoseSource};
use enerf::presets;
use enerf::raster::Image;
use enerf::rendering::{plan_samples, query_rays, ray_rngs, ray_values, render_planned, render_view, RayQuery};
use enerf::scene::{AnalyticScene, Camera};
use enerf::tape::Graph;
use enerf::trainer::{grad_check, sample_batch, GradCheckConfig, TrainConfig, Trainer};
use enerf::trajectory::{generate_orbit, perturb, SpeedProfile, Trajectory};
use enerf::{Error, Result};

#[derive(Parser)]
#[command(name = "enerf", version, about = "Event-camera radiance fields: simulate, train, render and evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a circular orbit around the origin as a pose file.
    Orbit(OrbitArgs),
    /// Simulate an event stream from an analytic scene and a trajectory.
    Simulate(SimulateArgs),
    /// Add rotation and translation noise to a pose file.
    PerturbPoses(PerturbArgs),
    /// Train a model from the events listed in a manifest.
    Train(TrainArgs),
    /// Render colour, depth and log-radiance images from a checkpoint, or oracle views from a manifest.
    Render(RenderArgs),
    /// Write the pose network's corrected trajectory.
    CorrectPoses(CorrectArgs),
    /// Compute PSNR / SSIM between image folders and RE / TE between pose files.
    ///
    /// LPIPS is not reported: it depends on external learned weights.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a small event batch.
    Gradcheck(GradcheckArgs),
    /// Dump the sample placement of one ray as CSV.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Uniform,
    Oscillating,
}

#[derive(Args)]
struct OrbitArgs {
    #[arg(long, value_enum, default_value = "uniform")]
    profile: Profile,
    #[arg(long, default_value_t = presets::TOY_RADIUS)]
    radius: f64,
    /// Seconds for one revolution.
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    /// Poses per second.
    #[arg(long, default_value_t = presets::TOY_RATE)]
    rate: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene JSON.
    #[arg(long)]
    scene: PathBuf,
    /// Pose file (`t tx ty tz qw qx qy qz` per line).
    #[arg(long)]
    poses: PathBuf,
    /// Camera intrinsics JSON; the 64x64 toy camera when omitted.
    #[arg(long)]
    camera: Option<PathBuf>,
    #[arg(long, default_value_t = presets::TOY_THRESHOLD)]
    c_pos: f64,
    #[arg(long, default_value_t = presets::TOY_THRESHOLD)]
    c_neg: f64,
    /// Seconds a pixel stays silent after firing.
    #[arg(long, default_value_t = 0.0)]
    refractory: f64,
    /// Simulation time step in seconds.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    poses: PathBuf,
    /// Rotation noise scale in degrees.
    #[arg(long)]
    rot_deg: f64,
    /// Translation noise standard deviation in scene units.
    #[arg(long)]
    trans: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Training configuration JSON; overrides the manifest's.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sample_budget: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Jointly learn a pose correction on top of the prior poses.
    #[arg(long)]
    pose_net: bool,
    /// Colour correction stored in the checkpoint.
    #[arg(long, value_enum, default_value = "learned")]
    color: Color,
    /// Write a checkpoint every N iterations (next to `--out`).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration loss components.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Color {
    Affine,
    Learned,
}

#[derive(Args)]
struct RenderArgs {
    /// Model to render; omit with `--manifest` to render oracle views.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Supplies the scene, camera, default poses and test times.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Pose file; defaults to the manifest's ground truth.
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Comma-separated timestamps; defaults to the manifest's test times.
    #[arg(long, value_delimiter = ',')]
    times: Vec<f64>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prior pose file the network was trained on.
    #[arg(long)]
    prior: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Folder of predicted PNGs, paired with `--ref-dir` by sorted file name.
    #[arg(long, requires = "ref_dir")]
    pred_dir: Option<PathBuf>,
    #[arg(long)]
    ref_dir: Option<PathBuf>,
    /// Estimated pose file, compared with `--ref-poses`.
    #[arg(long, requires = "ref_poses")]
    est_poses: Option<PathBuf>,
    #[arg(long)]
    ref_poses: Option<PathBuf>,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 3)]
    events: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    pose_net: bool,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    poses: PathBuf,
    #[arg(long)]
    x: usize,
    #[arg(long)]
    y: usize,
    #[arg(long)]
    t: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Orbit(a) => {
            let profile = match a.profile {
                Profile::Uniform => SpeedProfile::uniform(),
                Profile::Oscillating => SpeedProfile::oscillating(),
            };
            generate_orbit(&profile, a.radius, a.duration, a.rate)?.save(&a.out)?;
        }
        Command::Simulate(a) => {
            let scene = AnalyticScene::load(&a.scene)?;
            let camera = match &a.camera {
                Some(p) => serde_json::from_str::<Camera>(&fs::read_to_string(p)?)?,
                None => presets::toy_camera(),
            };
            let traj = Trajectory::load(&a.poses)?;
            let thresholds = ContrastThresholds::new(a.c_pos, a.c_neg)?;
            let stream = simulate(&scene, &camera, &traj, &thresholds, a.refractory, a.dt)?;
            stream.save(&a.out)?;
            println!("{} events", stream.len());
        }
        Command::PerturbPoses(a) => {
            perturb(&Trajectory::load(&a.poses)?, a.rot_deg, a.trans, a.seed)?.save(&a.out)?;
        }
        Command::Train(a) => train(a)?,
        Command::Render(a) => render(a)?,
        Command::CorrectPoses(a) => {
            let (model, _) = checkpoint::load(&a.checkpoint)?;
            let net = model.pose_net.as_ref().ok_or(Error::State("checkpoint has no pose network".into()))?;
            correct_trajectory(&model.store, net, &Trajectory::load(&a.prior)?)?.save(&a.out)?;
        }
        Command::Eval(a) => eval(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::Inspect(a) => inspect(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => manifest.train_config()?,
    };
    if let Some(v) = a.iterations {
        config.iterations = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.sample_budget {
        config.sample_budget = v;
    }
    if let Some(v) = a.lr {
        config.lr_main = v;
    }
    if let Some(v) = a.checkpoint_every {
        config.checkpoint_every = v;
    }
    let stream = manifest.load_events()?;
    let prior = manifest.load_prior()?;
    let model = Model::new(manifest.model_config(a.pose_net), manifest.camera, Some(&prior), config.seed)?;
    let mut trainer = Trainer::new(config, model, prior)?;
    let mut log = a.loss_csv.as_ref().map(fs::File::create).transpose()?.map(std::io::BufWriter::new);
    let out = a.out.clone();
    trainer.run(&stream, log.as_mut().map(|w| w as &mut dyn Write), |t| {
        checkpoint::save(&t.model, t.iteration, &out.with_extension(format!("{}.ckpt", t.iteration)))
    })?;
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    let scene = manifest.load_scene()?;
    let views = reference_views(&scene, &manifest.camera, &manifest.load_ground_truth()?, &manifest.validation_times)?;
    let mode = match a.color {
        Color::Affine => ColorMode::Affine,
        Color::Learned => ColorMode::Learned,
    };
    let mut model = trainer.model;
    if !views.is_empty() {
        let mse = fit_color_correction(&mut model, &views, mode, &ColorFitConfig::default())?;
        println!("colour correction fitted on {} views, mse {mse:.5}", views.len());
    }
    checkpoint::save(&model, trainer.iteration, &a.out)?;
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let manifest = a.manifest.as_deref().map(Manifest::parse).transpose()?;
    let poses = match (&a.poses, &manifest) {
        (Some(p), _) => Trajectory::load(p)?,
        (None, Some(m)) => m.load_ground_truth()?,
        (None, None) => return Err(Error::Argument("render needs --poses or --manifest".into())),
    };
    let times = match (a.times.is_empty(), &manifest) {
        (false, _) => a.times.clone(),
        (true, Some(m)) => m.test_times.clone(),
        (true, None) => poses.timestamps(),
    };
    fs::create_dir_all(&a.out_dir)?;
    match (&a.checkpoint, &manifest) {
        (Some(ck), _) => {
            let (model, _) = checkpoint::load(ck)?;
            for (k, &t) in times.iter().enumerate() {
                let pose = poses.interpolate(t)?;
                let view = render_view(&model, &pose, RENDER_CHUNK, a.seed)?;
                let stem = a.out_dir.join(format!("view_{k:03}"));
                view.log_radiance.save_raw(&stem.with_extension("log.raw"))?;
                view.depth.save_raw(&stem.with_extension("depth.raw"))?;
                normalized(&view.depth).save_png(&a.out_dir.join(format!("depth_{k:03}.png")))?;
                let color = match model.color_mode {
                    Some(_) => render_color(&model, &pose, a.seed)?,
                    None => normalized(&view.log_radiance),
                };
                color.save_png(&stem.with_extension("png"))?;
            }
        }
        (None, Some(m)) => {
            let scene = m.load_scene()?;
            for (k, (_, img)) in reference_views(&scene, &m.camera, &poses, &times)?.iter().enumerate() {
                img.save_png(&a.out_dir.join(format!("view_{k:03}.png")))?;
            }
        }
        (None, None) => return Err(Error::Argument("render needs --checkpoint or --manifest".into())),
    }
    println!("rendered {} views to {}", times.len(), a.out_dir.display());
    Ok(())
}

/// Min-max stretch to `[0, 1]` for display.
fn normalized(img: &Image) -> Image {
    let lo = img.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    img.map(|v| (v - lo) / span)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "png") && !p.file_name().unwrap().to_string_lossy().starts_with("depth_"))
        .collect();
    files.sort();
    Ok(files)
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut metrics = EvalMetrics::default();
    if let (Some(pred), Some(refd)) = (&a.pred_dir, &a.ref_dir) {
        let (pf, rf) = (png_files(pred)?, png_files(refd)?);
        if pf.len() != rf.len() {
            return Err(Error::Argument(format!(
                "image count mismatch: {} in {} vs {} in {}",
                pf.len(),
                pred.display(),
                rf.len(),
                refd.display()
            )));
        }
        let load = |fs: &[PathBuf]| fs.iter().map(|p| Image::load_png(p)).collect::<Result<Vec<_>>>();
        let (p, s) = image_metrics(&load(&pf)?, &load(&rf)?)?;
        metrics.psnr = Some(p);
        metrics.ssim = Some(s);
    }
    if let (Some(est), Some(refp)) = (&a.est_poses, &a.ref_poses) {
        let e = traj_error(&Trajectory::load(est)?, &Trajectory::load(refp)?)?;
        metrics.re_deg = Some(e.rotation_deg);
        metrics.te_units = Some(e.translation);
    }
    if metrics == EvalMetrics::default() {
        return Err(Error::Argument("nothing to evaluate: pass --pred-dir/--ref-dir and/or --est-poses/--ref-poses".into()));
    }
    let json = serde_json::to_string_pretty(&metrics)?;
    match &a.out {
        Some(p) => fs::write(p, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let manifest = Manifest::load(&a.manifest)?;
    let stream: EventStream = manifest.load_events()?;
    let prior = manifest.load_prior()?;
    let mut cfg = manifest.model_config(a.pose_net);
    cfg.thresholds.learnable = true;
    let model = Model::new(cfg, manifest.camera, Some(&prior), a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (batch, _) = sample_batch(&stream, a.events, &mut rng)?;
    let weights = manifest.train_config()?.loss_weights;
    let report = grad_check(&model, &prior, &batch, &weights, &GradCheckConfig { seed: a.seed, ..Default::default() })?;
    for b in &report.blocks {
        println!("{:<28} {:<10} {:.3e}", b.block, b.group.name(), b.max_rel_error);
    }
    println!("{:<28} {:<10} {:.3e}", "d/dt log radiance", "time", report.time_rel_error);
    let worst = report.max_error();
    println!("max relative error {worst:.3e} (tolerance {:.1e})", a.tolerance);
    Ok(if worst < a.tolerance { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn inspect(a: InspectArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let poses = Trajectory::load(&a.poses)?;
    let source = match &model.pose_net {
        Some(net) => PoseSource::Corrected { net, prior: &poses },
        None => PoseSource::Interpolated(&poses),
    };
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g, &[]);
    let rays = query_rays(&mut g, &bound, &model.camera, &source, &[RayQuery { x: a.x, y: a.y, t: a.t }], false)?;
    let mut rngs = ray_rngs(a.seed, 0, 1);
    let plans = plan_samples(&model, &ray_values(&g, &rays), &mut rngs)?;
    let out = render_planned(&mut g, &bound, &model, &rays, &plans, false)?;
    let mut csv = String::from("kind,stage,index,t_start,t_end,weight\n");
    for (s, stage) in plans[0].stages.iter().enumerate() {
        for (i, w) in stage.w.iter().enumerate() {
            csv += &format!("proposal,{s},{i},{},{},{w}\n", stage.t[i], stage.t[i + 1]);
        }
    }
    let w = g.value(out.weights.v);
    let edges = &out.edges[0];
    for (i, w) in w.row_slice(0).iter().enumerate() {
        csv += &format!("vanilla,{},{i},{},{},{w}\n", plans[0].stages.len(), edges[i], edges[i + 1]);
    }
    match &a.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

//! Command-line surface: dataset simulation, calibration runs, evaluation,
//! novel-view rendering and gradient checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use crate::exec::mix_seed;
use crate::geometry::{Quat, SE3Pose, Vec3};
use crate::io::{calib_file, checkpoint, config, dataset, metrics, pfm, ppm, report, traj, DataError};
use crate::optim::train::{self, TrainOptions, TrainSetup};
use crate::render::{render_image, PinholeIntrinsics, RenderConfig};
use crate::sim::{self, PerturbRanges};
use crate::gradcheck;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "rigfield",
    version,
    about = "Joint spatiotemporal camera/LiDAR rig calibration against an implicit scene field"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a synthetic rig dataset with ground truth and perturbed priors
    Simulate(SimulateArgs),
    /// Jointly optimize the scene field and the rig calibration
    Calibrate(CalibrateArgs),
    /// Compare a calibration result directory against a ground-truth file
    Evaluate(EvaluateArgs),
    /// Render a novel view (color PPM and/or depth PFM) from a checkpoint
    Render(RenderArgs),
    /// Validate analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Config file (TOML); defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for clock offsets, priors and sensor noise
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Omit gt_calib.txt (blind evaluation datasets)
    #[arg(long)]
    pub blind: bool,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Dataset directory (from `simulate`)
    #[arg(long)]
    pub data: PathBuf,
    /// Priors file; defaults to <data>/priors.txt
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Config file (TOML); defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for calibration, history, report and checkpoint
    #[arg(long)]
    pub out: PathBuf,
    /// Override the schedule seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Keep extrinsics frozen at the priors (optimize clocks only)
    #[arg(long)]
    pub freeze_spatial: bool,
    /// Keep clock offsets frozen at the priors (optimize extrinsics only)
    #[arg(long)]
    pub freeze_temporal: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Result directory (from `calibrate`)
    #[arg(long)]
    pub result: PathBuf,
    /// Ground-truth calibration file
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Field checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Either a trajectory time `t` (requires --traj) or seven values
    /// `qw qx qy qz tx ty tz`
    #[arg(long)]
    pub pose: String,
    /// Output path: .ppm → color, .pfm → depth, otherwise both are written
    /// as <out>.ppm and <out>.pfm
    #[arg(long)]
    pub out: PathBuf,
    /// Trajectory file for time-valued --pose
    #[arg(long)]
    pub traj: Option<PathBuf>,
    /// Config file for render settings (near/far/samples/background)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 80)]
    pub width: u32,
    #[arg(long, default_value_t = 60)]
    pub height: u32,
    #[arg(long, default_value_t = 60.0)]
    pub hfov: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Which suite to run: all | field | render | calib
    #[arg(long, default_value = "all")]
    pub module: String,
}

/// Errors mapped onto the documented exit codes.
#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Data(DataError),
    Numerical(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Usage(m) => write!(f, "usage error: {m}"),
            AppError::Data(e) => write!(f, "data error: {e}"),
            AppError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> Self {
        AppError::Data(e)
    }
}

impl From<train::TrainError> for AppError {
    fn from(e: train::TrainError) -> Self {
        match &e {
            train::TrainError::Diverged { .. } => AppError::Numerical(e.to_string()),
            train::TrainError::Setup(m) => AppError::Usage(m.clone()),
            _ => AppError::Data(DataError::Parse {
                file: PathBuf::from("<run>"),
                line: 0,
                msg: e.to_string(),
            }),
        }
    }
}

pub fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Calibrate(args) => run_calibrate(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Render(args) => run_render(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}

fn run_simulate(args: SimulateArgs) -> Result<(), AppError> {
    let cfg = config::load_config(args.config.as_deref())?;
    let mut rig = cfg
        .rig
        .to_rig_spec()
        .map_err(AppError::Usage)?;

    // Unsynchronized clocks: draw each non-reference sensor's true offset
    // uniformly around its configured value. Priors always start at zero
    // clock offset, so this draw is the initial temporal error.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[args.seed, 0x51A]));
    if cfg.perturb.time_ms > 0.0 {
        use rand::Rng;
        for s in &mut rig.sensors {
            if !s.reference {
                let half = cfg.perturb.time_ms / 1000.0;
                s.gt_delta += rng.gen_range(-half..half);
            }
        }
    }

    let track = sim::make_trajectory(
        cfg.rig.trajectory,
        cfg.rig.duration,
        cfg.rig.speed,
        cfg.rig.knot_rate,
        cfg.rig.height,
    );
    let scene = sim::default_scene();
    let ds = sim::simulate_rig(&scene, &rig, &track, cfg.rig.duration, &cfg.noise, &mut rng);

    let gt = rig.gt_calibration();
    dataset::write_dataset(&args.out, &ds, (!args.blind).then_some(&gt))?;

    // Spatial priors: perturbed ground truth; clock priors start at zero.
    let spatial_only = PerturbRanges { time_ms: 0.0, ..cfg.perturb };
    let mut priors = sim::perturb(&gt, &spatial_only, &mut rng);
    for s in &mut priors.sensors {
        if !s.reference {
            s.delta = 0.0;
        }
    }
    calib_file::write_calibration(&args.out.join("priors.txt"), &priors)?;
    crate::io::write_bytes(
        &args.out.join("simulate_config.toml"),
        cfg.to_toml_string().as_bytes(),
    )?;

    let frames: usize = ds.sensors.iter().map(|s| s.timestamps.len()).sum();
    println!(
        "dataset written to {}: {} sensors, {frames} frames, {:.1} s",
        args.out.display(),
        ds.sensors.len(),
        ds.duration
    );
    Ok(())
}

fn run_calibrate(args: CalibrateArgs) -> Result<(), AppError> {
    let mut cfg = config::load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.schedule.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.schedule.epochs = epochs;
    }
    if args.freeze_spatial && args.freeze_temporal {
        return Err(AppError::Usage(
            "--freeze-spatial and --freeze-temporal together leave nothing to calibrate".into(),
        ));
    }

    let ds = dataset::load_dataset(&args.data)?;
    let priors_path = args.priors.unwrap_or_else(|| args.data.join("priors.txt"));
    let priors = calib_file::read_calibration(&priors_path)?;

    let setup = TrainSetup {
        field: cfg.field.clone(),
        render: cfg.render.clone(),
        weights: cfg.losses.weights(),
        patches: cfg.losses.patches(),
        schedule: cfg.schedule.clone(),
        options: TrainOptions {
            freeze_spatial: args.freeze_spatial,
            freeze_temporal: args.freeze_temporal,
        },
    };

    std::fs::create_dir_all(&args.out).map_err(|e| DataError::io(&args.out, e))?;
    let epochs = setup.schedule.epochs;
    let mut trainer = train::Trainer::new(setup, &ds, &priors)?;
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let r = trainer.train_epoch(&ds, epoch)?;
        eprintln!(
            "epoch {:>3}/{epochs}: total {:.6} (color {:.6} depth {:.6} ssim {:.6} ds {:.6})",
            epoch + 1,
            r.total,
            r.losses.color,
            r.losses.depth,
            r.losses.ssim,
            r.losses.smooth
        );
        history.push(r);
    }
    let final_calib = train::average_last_snapshots(&history, train::AVERAGE_WINDOW);

    calib_file::write_calibration(&args.out.join("calibration.txt"), &final_calib)?;
    crate::io::write_bytes(
        &args.out.join("history.csv"),
        report::history_to_csv(&history).as_bytes(),
    )?;
    checkpoint::save_checkpoint(&args.out.join("field.ckpt"), &trainer.model)?;
    crate::io::write_bytes(
        &args.out.join("config_used.toml"),
        cfg.to_toml_string().as_bytes(),
    )?;

    let gt_path = args.data.join("gt_calib.txt");
    let gt = gt_path
        .exists()
        .then(|| calib_file::read_calibration(&gt_path))
        .transpose()?;
    let table = report::report_table(&history, gt.as_ref());
    crate::io::write_bytes(&args.out.join("report.txt"), table.as_bytes())?;
    crate::io::write_bytes(
        &args.out.join("curves.svg"),
        report::curves_svg(&history, gt.as_ref()).as_bytes(),
    )?;
    println!("{table}");
    println!("result written to {}", args.out.display());
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<(), AppError> {
    let gt = calib_file::read_calibration(&args.gt)?;
    let rows = report::parse_history_csv(&args.result.join("history.csv"))?;
    let reports = report::rows_to_reports(&rows, &gt);
    if reports.is_empty() {
        return Err(AppError::Data(DataError::parse(
            &args.result.join("history.csv"),
            0,
            "empty history",
        )));
    }
    let table = report::report_table(&reports, Some(&gt));
    println!("per-epoch errors over the last {} epochs (mean±std):", train::AVERAGE_WINDOW);
    println!("{table}");

    let final_path = args.result.join("calibration.txt");
    if final_path.exists() {
        let final_calib = calib_file::read_calibration(&final_path)?;
        let errs = metrics::metrics(&final_calib, &gt)
            .map_err(|e| AppError::Numerical(e.to_string()))?;
        println!("final averaged calibration vs ground truth:");
        println!(
            "{:<12} {:>16} {:>14} {:>15}",
            "sensor", "trans err (cm)", "rot err (deg)", "clock err (ms)"
        );
        for e in errs {
            println!(
                "{:<12} {:>16.3} {:>14.4} {:>15.3}",
                e.name, e.translation_cm, e.rotation_deg, e.temporal_ms
            );
        }
    }
    Ok(())
}

fn parse_pose(args: &RenderArgs) -> Result<SE3Pose, AppError> {
    let toks: Vec<&str> = args.pose.split_whitespace().collect();
    match toks.len() {
        1 => {
            let t: f64 = toks[0]
                .parse()
                .map_err(|_| AppError::Usage(format!("bad pose time `{}`", toks[0])))?;
            let traj_path = args
                .traj
                .as_ref()
                .ok_or_else(|| AppError::Usage("time-valued --pose requires --traj".into()))?;
            let track = traj::read_trajectory(traj_path)?;
            Ok(track.pose_at(t))
        }
        7 => {
            let mut v = [0.0f64; 7];
            for (i, tok) in toks.iter().enumerate() {
                v[i] = tok
                    .parse()
                    .map_err(|_| AppError::Usage(format!("bad pose value `{tok}`")))?;
            }
            Ok(SE3Pose::new(Quat::new(v[0], v[1], v[2], v[3]), Vec3::new(v[4], v[5], v[6])))
        }
        n => Err(AppError::Usage(format!(
            "--pose needs 1 value (time) or 7 values (qw qx qy qz tx ty tz), got {n}"
        ))),
    }
}

fn run_render(args: RenderArgs) -> Result<(), AppError> {
    let model = checkpoint::load_checkpoint(&args.checkpoint)?;
    let render_cfg: RenderConfig = match &args.config {
        Some(p) => config::load_config(Some(p))?.render,
        None => RenderConfig::default(),
    };
    let pose = parse_pose(&args)?;
    let intr = PinholeIntrinsics::from_hfov(args.width, args.height, args.hfov);
    let (colors, depths) = render_image(&model, &intr, &pose, &render_cfg, args.seed)
        .map_err(|e| AppError::Numerical(e.to_string()))?;

    let ext = args.out.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "ppm" => {
            ppm::write_ppm(&args.out, args.width, args.height, &colors)?;
            println!("color image written to {}", args.out.display());
        }
        "pfm" => {
            pfm::write_pfm(&args.out, args.width, args.height, &depths)?;
            println!("depth map written to {}", args.out.display());
        }
        _ => {
            let color_path = args.out.with_extension("ppm");
            let depth_path = args.out.with_extension("pfm");
            ppm::write_ppm(&color_path, args.width, args.height, &colors)?;
            pfm::write_pfm(&depth_path, args.width, args.height, &depths)?;
            println!(
                "color image written to {}, depth map to {}",
                color_path.display(),
                depth_path.display()
            );
        }
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), AppError> {
    let report = gradcheck::run(&args.module).map_err(AppError::Usage)?;
    for c in &report.checks {
        println!(
            "{} {} (max rel err {:.3e}, tolerance {:.0e})",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.max_rel_err,
            c.tolerance
        );
    }
    if report.passed() {
        println!("all {} gradient checks passed", report.checks.len());
        Ok(())
    } else {
        Err(AppError::Numerical("gradient check failure".into()))
    }
}


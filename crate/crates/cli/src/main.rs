mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rsgm::dataset::{load_kitti_sequence, synth_sequence, write_disparity_png, write_sequence, LoadOptions, Sequence, SynthConfig, SynthObject};
use rsgm::detect::{detect_in_diff, draw_boxes, format_detections};
use rsgm::eval::{format_csv, format_table, run_benchmark, BenchmarkConfig, BenchmarkMethod};
use rsgm::geometry::{RigidMotion, StereoCalib};
use rsgm::noise_calib::{estimate_measurement_noise, estimate_process_noise, format_report};
use rsgm::raster::GrayImage;
use rsgm::sgm::{match_full_range, PathCount, PathSet};
use rsgm::temporal::TemporalPipeline;

use config::{ConfigFile, Settings};

/// Reduced-search-space stereo matching with temporal disparity filtering.
#[derive(Debug, Parser)]
#[command(name = "rsgm", version)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PathSetArg {
    Nondiag,
    Diag,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Key-value config file; flags override its entries.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,
    /// Aggregation paths.
    #[arg(long, global = true, value_parser = ["4", "8"])]
    paths: Option<String>,
    /// Direction set used with 4 paths.
    #[arg(long, global = true, value_enum)]
    path_set: Option<PathSetArg>,
    /// Process noise variance (px^2).
    #[arg(long, global = true)]
    q: Option<f64>,
    /// Measurement noise variance (px^2).
    #[arg(long, global = true)]
    r: Option<f64>,
    /// Number of disparity levels.
    #[arg(long, global = true)]
    d_max: Option<usize>,
}

#[derive(Debug, Args)]
struct SeqArgs {
    /// Sequence directory.
    seq: PathBuf,
    /// Pose file, 12 numbers per line (default: <seq>/poses.txt if present).
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Ground-truth disparity folder (default: <seq>/disp_gt if present).
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 320)]
    width: usize,
    #[arg(long, default_value_t = 240)]
    height: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Background plane disparity in the first frame.
    #[arg(long, default_value_t = 20.0)]
    disparity: f64,
    /// Intensity noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Lateral speed of a 40x40 object, px/frame (0 = no object).
    #[arg(long, default_value_t = 0.0)]
    object_speed: f64,
    /// Forward camera motion per frame, meters.
    #[arg(long, default_value_t = 0.0)]
    forward: f64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Temporal pipeline over a sequence.
    Run {
        #[command(flatten)]
        seq: SeqArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write images with detections burned in.
        #[arg(long)]
        overlay: bool,
    },
    /// Full-range matching of a single pair.
    Match {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Output 16-bit disparity PNG.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate process and measurement noise.
    CalibNoise {
        #[command(flatten)]
        seq: SeqArgs,
        /// Report file (also printed).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Moving-object detection between frame K-1 and frame K.
    Detect {
        #[command(flatten)]
        seq: SeqArgs,
        /// Position of frame K in the sequence.
        #[arg(long, default_value_t = 1)]
        frame: usize,
        /// Output directory (detections are printed when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, requires = "out")]
        overlay: bool,
    },
    /// Write a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Accuracy and timing report.
    Eval {
        #[command(flatten)]
        seq: SeqArgs,
        /// Comma-separated: gt, full, reduced, reduced-4nd, reduced-4d, reduced-8.
        #[arg(long, default_value = "gt,full,reduced")]
        methods: String,
        /// Count missing estimates as outliers.
        #[arg(long)]
        strict: bool,
        /// CSV output file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Bad invocation: exits with 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

fn must_exist(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        usage(format!("{} does not exist", p.display()))
    }
}

fn settings(c: &CommonArgs) -> Result<Settings> {
    let file = match &c.config {
        Some(p) => {
            must_exist(p)?;
            ConfigFile::load(p).map_err(|e| UsageError(format!("{e:#}")))?
        }
        None => ConfigFile::default(),
    };
    let flags = ConfigFile {
        q: c.q,
        r: c.r,
        d_max: c.d_max,
        paths: c.paths.as_deref().map(|p| p.parse().expect("clap restricts to 4 or 8")),
        path_set: c.path_set.map(|s| match s {
            PathSetArg::Nondiag => "nondiag".to_string(),
            PathSetArg::Diag => "diag".to_string(),
        }),
        threads: c.threads.map(|t| t as usize),
        ..ConfigFile::default()
    };
    Settings::resolve(&file.overlay(flags)).map_err(|e| UsageError(format!("{e:#}")).into())
}

fn load(args: &SeqArgs, s: &Settings) -> Result<Sequence> {
    must_exist(&args.seq)?;
    for p in [&args.poses, &args.gt].into_iter().flatten() {
        must_exist(p)?;
    }
    let opts = LoadOptions {
        poses: args.poses.clone(),
        gt_dir: args.gt.clone(),
        d_max: s.params.d_max,
    };
    Ok(load_kitti_sequence(&args.seq, &opts)?)
}

fn frame_file(index: usize) -> String {
    format!("{index:010}.png")
}

fn cmd_match(s: &Settings, left: &Path, right: &Path, out: &Path) -> Result<()> {
    must_exist(left)?;
    must_exist(right)?;
    let l = GrayImage::load(left)?;
    let r = GrayImage::load(right)?;
    let map = match_full_range(&l, &r, &s.params)?;
    write_disparity_png(out, &map)?;
    Ok(())
}

fn cmd_run(s: &Settings, args: &SeqArgs, out: &Path, overlay: bool) -> Result<()> {
    let seq = load(args, s)?;
    let calib = seq.calib_or_err()?;
    if seq.frames.iter().skip(1).any(|f| f.pose.is_none()) {
        eprintln!("warning: no poses; assuming a static camera");
    }
    let disp_dir = out.join("disparity");
    fs::create_dir_all(&disp_dir)?;
    let overlay_dir = out.join("overlay");
    if overlay {
        fs::create_dir_all(&overlay_dir)?;
    }
    let mut pipe = TemporalPipeline::new(calib, s.params, s.filter)?;
    let mut detections = String::new();
    for (k, f) in seq.frames.iter().enumerate() {
        let motion = seq.motion(k).unwrap_or_else(RigidMotion::identity);
        let step = pipe.step(&f.left, &f.right, &motion)?;
        let boxes = detect_in_diff(&step.diff, &s.detect);
        write_disparity_png(disp_dir.join(frame_file(f.index)), &step.export)?;
        detections.push_str(&format_detections(f.index, &boxes));
        if overlay {
            draw_boxes(&f.left, &boxes).save(overlay_dir.join(frame_file(f.index)))?;
        }
        eprintln!(
            "frame {}: {:.1}% valid, {} boxes, {:.3} s",
            f.index,
            100.0 * step.export.valid_count() as f64 / step.export.len() as f64,
            boxes.len(),
            step.timings.total().as_secs_f64()
        );
    }
    fs::write(out.join("detections.txt"), detections)?;
    Ok(())
}

fn cmd_calib_noise(s: &Settings, args: &SeqArgs, out: Option<&Path>) -> Result<()> {
    let seq = load(args, s)?;
    let has_poses = seq.frames.iter().all(|f| f.pose.is_some());
    let q = if seq.len() >= 2 && has_poses {
        Some(estimate_process_noise(&seq)?)
    } else {
        eprintln!("warning: process noise needs poses and at least 2 frames; skipped");
        None
    };
    let r = estimate_measurement_noise(&seq, &s.params)?;
    let report = format_report(q.as_ref(), Some(&r));
    print!("{report}");
    if let Some(p) = out {
        fs::write(p, report)?;
    }
    Ok(())
}

fn cmd_detect(s: &Settings, args: &SeqArgs, frame: usize, out: Option<&Path>, overlay: bool) -> Result<()> {
    let seq = load(args, s)?;
    if frame == 0 || frame >= seq.len() {
        return usage(format!("--frame must be in 1..{}", seq.len()));
    }
    let calib = seq.calib_or_err()?;
    let motion = seq.motion(frame).unwrap_or_else(|| {
        eprintln!("warning: no poses; assuming a static camera");
        RigidMotion::identity()
    });
    let mut pipe = TemporalPipeline::new(calib, s.params, s.filter)?;
    let prev = &seq.frames[frame - 1];
    pipe.step(&prev.left, &prev.right, &RigidMotion::identity())?;
    let cur = &seq.frames[frame];
    let step = pipe.step(&cur.left, &cur.right, &motion)?;
    let boxes = detect_in_diff(&step.diff, &s.detect);
    let text = format_detections(cur.index, &boxes);
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("detections.txt"), &text)?;
            if overlay {
                draw_boxes(&cur.left, &boxes).save(dir.join("overlay.png"))?;
            }
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_synth(s: &Settings, a: &SynthArgs) -> Result<()> {
    if a.frames == 0 || a.width < 16 || a.height < 16 {
        return usage("need at least one frame of at least 16x16 pixels");
    }
    let calib = StereoCalib::new(
        0.9 * a.width as f64,
        a.width as f64 / 2.0,
        a.height as f64 / 2.0,
        0.5,
        a.width,
        a.height,
        s.params.d_max,
    )
    .map_err(|e| UsageError(e.to_string()))?;
    let mut cfg = SynthConfig::static_plane(calib, a.disparity, a.frames);
    cfg.seed = a.seed;
    cfg.noise_sigma = a.noise;
    cfg.trajectory = (0..a.frames)
        .map(|k| RigidMotion::translation([0.0, 0.0, a.forward * k as f64].into()))
        .collect();
    if a.object_speed != 0.0 {
        cfg.objects.push(SynthObject {
            x: a.width as f64 / 4.0,
            y: a.height as f64 * 0.6,
            width: 40,
            height: 40,
            disparity_offset: a.disparity,
            velocity: (a.object_speed, 0.0),
        });
    }
    let seq = synth_sequence(&cfg)?;
    write_sequence(&seq, &a.out)?;
    Ok(())
}

fn benchmark_config(name: &str, s: &Settings) -> Result<BenchmarkConfig> {
    let with_paths = |paths, set| {
        let mut p = s.params;
        p.paths = paths;
        p.path_set = set;
        p
    };
    let (method, params) = match name {
        "gt" => (BenchmarkMethod::GroundTruth, s.params),
        "full" => (BenchmarkMethod::FullSpace, s.params),
        "reduced" => (BenchmarkMethod::Reduced, s.params),
        "reduced-4nd" => (BenchmarkMethod::Reduced, with_paths(PathCount::Four, PathSet::NonDiagonal)),
        "reduced-4d" => (BenchmarkMethod::Reduced, with_paths(PathCount::Four, PathSet::Diagonal)),
        "reduced-8" => (BenchmarkMethod::Reduced, with_paths(PathCount::Eight, PathSet::NonDiagonal)),
        other => return usage(format!("unknown method {other:?}")),
    };
    let mut c = BenchmarkConfig::new(name, method, params);
    c.filter = s.filter;
    c.detect = Some(s.detect.clone());
    Ok(c)
}

fn cmd_eval(s: &Settings, args: &SeqArgs, methods: &str, strict: bool, out: Option<&Path>) -> Result<()> {
    let configs = methods
        .split(',')
        .map(|m| {
            let mut c = benchmark_config(m.trim(), s)?;
            c.strict = strict;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let seq = load(args, s)?;
    let reports = run_benchmark(&seq, &configs)?;
    let mut text = format_table(&reports);
    for r in &reports {
        let per_frame: Vec<String> = r
            .frames
            .iter()
            .map(|f| f.outlier_pct().map_or("nan".into(), |v| format!("{v:.2}")))
            .collect();
        let _ = writeln!(text, "{} per-frame outliers %: {}", r.name, per_frame.join(" "));
    }
    print!("{text}");
    if let Some(p) = out {
        fs::write(p, format_csv(&reports))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let s = settings(&cli.common)?;
    if let Some(n) = s.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot start worker threads")?;
    }
    match &cli.command {
        Command::Run { seq, out, overlay } => cmd_run(&s, seq, out, *overlay),
        Command::Match { left, right, out } => cmd_match(&s, left, right, out),
        Command::CalibNoise { seq, out } => cmd_calib_noise(&s, seq, out.as_deref()),
        Command::Detect {
            seq,
            frame,
            out,
            overlay,
        } => cmd_detect(&s, seq, *frame, out.as_deref(), *overlay),
        Command::Synth(a) => cmd_synth(&s, a),
        Command::Eval {
            seq,
            methods,
            strict,
            out,
        } => cmd_eval(&s, seq, methods, *strict, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

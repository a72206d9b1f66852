use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use raymvs_cli::commands;
use raymvs_cli::CliError;

/// Ray-based multi-view stereo on synthetic desk scenes.
#[derive(Parser)]
#[command(name = "raymvs", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view dataset and its ground-truth clouds.
    GenData {
        /// Structured-text config file; an empty file means defaults.
        #[arg(long)]
        config: PathBuf,
        /// Dataset root; scene_<i> directories are created inside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the two-stage model on every scene under the config's data_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory for checkpoint.rmvs and metrics.log.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict coarse, refined, and confidence depth maps for one view.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Reference view index.
        #[arg(long = "ref")]
        reference: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter per-view depth maps and merge them into one point cloud.
    Fuse {
        #[arg(long)]
        scene: PathBuf,
        /// Directory holding refined_<j>.depth and confidence_<j>.depth.
        #[arg(long)]
        depths: PathBuf,
        /// Output .ply path.
        #[arg(long)]
        out: PathBuf,
        /// Keep pixels with confidence at or above this value.
        #[arg(long, default_value_t = 0.3)]
        conf_threshold: f64,
        /// Points closer than this are merged, scene units.
        #[arg(long, default_value_t = 1.0)]
        merge_radius: f64,
        /// Round-trip reprojection tolerance, pixels.
        #[arg(long, default_value_t = 1.0)]
        reproj_tol: f64,
        /// Relative depth agreement tolerance.
        #[arg(long, default_value_t = 0.01)]
        depth_tol: f64,
        /// Views (besides the reference) that must agree.
        #[arg(long, default_value_t = 2)]
        min_views: usize,
    },
    /// Accuracy / completeness between a predicted and a reference cloud.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Distances are clamped here before averaging, scene units.
        #[arg(long, default_value_t = 20.0)]
        clamp: f64,
    },
    /// Mean absolute error and threshold curve between two depth maps.
    EvalDepth {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Comma-separated error thresholds, scene units.
        #[arg(long, default_value = "0.5,1,2,4,8,16")]
        thresholds: String,
    },
    /// Dump one ray's hypothesis depths, signed distances, and labels.
    TraceRay {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long = "ref")]
        reference: usize,
        /// Pixel as X,Y in the reference image.
        #[arg(long)]
        pixel: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a view-attention table and a raster of the sampled epipolar
    /// segment in a source view.
    VizEpipolar {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long = "ref")]
        reference: usize,
        #[arg(long)]
        pixel: String,
        /// Source view whose attention is plotted.
        #[arg(long)]
        src: usize,
        /// Text output path; the raster lands next to it as <out>.png.
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure refinement quality as coarse-depth noise grows.
    NoiseTest {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Comma-separated noise stds, scene units.
        #[arg(long)]
        stds: String,
        #[arg(long)]
        report: PathBuf,
        /// Rays sampled per view.
        #[arg(long, default_value_t = 512)]
        rays: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Restrict to one reference view; all views otherwise.
        #[arg(long = "ref")]
        reference: Option<usize>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out } => commands::gen_data(&config, &out),
        Command::Train {
            config,
            out,
            resume,
        } => commands::train_cmd(&config, &out, resume.as_deref()),
        Command::Infer {
            ckpt,
            scene,
            reference,
            out,
        } => commands::infer(&ckpt, &scene, reference, &out),
        Command::Fuse {
            scene,
            depths,
            out,
            conf_threshold,
            merge_radius,
            reproj_tol,
            depth_tol,
            min_views,
        } => commands::fuse_cmd(
            &scene,
            &depths,
            &out,
            conf_threshold,
            merge_radius,
            reproj_tol,
            depth_tol,
            min_views,
        ),
        Command::Eval {
            pred,
            gt,
            report,
            clamp,
        } => commands::eval(&pred, &gt, &report, clamp),
        Command::EvalDepth {
            pred,
            gt,
            report,
            thresholds,
        } => {
            let t = commands::parse_float_list(&thresholds, "--thresholds")?;
            commands::eval_depth(&pred, &gt, &report, &t)
        }
        Command::TraceRay {
            ckpt,
            scene,
            reference,
            pixel,
            out,
        } => {
            let p = commands::parse_pixel(&pixel)?;
            commands::trace_ray(&ckpt, &scene, reference, p, &out)
        }
        Command::VizEpipolar {
            ckpt,
            scene,
            reference,
            pixel,
            src,
            out,
        } => {
            let p = commands::parse_pixel(&pixel)?;
            commands::viz_epipolar(&ckpt, &scene, reference, p, src, &out)
        }
        Command::NoiseTest {
            ckpt,
            scene,
            stds,
            report,
            rays,
            seed,
            reference,
        } => {
            let s = commands::parse_float_list(&stds, "--stds")?;
            commands::noise_test(&ckpt, &scene, &s, &report, rays, seed, reference)
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("RAYMVS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| CliError::Usage(format!("RAYMVS_THREADS: {raw:?} is not a thread count")))?;
    if n == 0 {
        return Err(CliError::Usage(
            "RAYMVS_THREADS: thread count must be at least 1".into(),
        ));
    }
    // A second build_global in the same process is harmless for the CLI.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn print_err(e: &CliError) {
    let msg = e.message().replace('\n', "; ").replace('"', "'");
    eprintln!("{{\"error\":\"{}\",\"code\":{}}}", msg, e.exit_code());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = init_threads() {
        print_err(&e);
        return ExitCode::from(e.exit_code());
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            print_err(&e);
            ExitCode::from(e.exit_code())
        }
    }
}

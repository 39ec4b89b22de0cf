//! `wtrk`: run the world-centric tracking pipeline, generate synthetic
//! scenes, evaluate outputs against ground truth, or audit gradients.
//!
//! Exit codes: 0 on success, 2 for input errors, 3 for numerical failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wtrk_core::pipeline::{eval_only, run_pipeline, PipelineError, RunOptions};
use wtrk_core::synth::{
    generate, perturb, write_scene, NoiseSpec, ObjectKind, ObjectSpec, SynthConfig,
};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "wtrk",
    version,
    about = "World-centric 3D tracking from 2D tracks, depth, and masks"
)]
struct Cli {
    /// Worker threads; 0 uses all cores. The WTRK_THREADS env var overrides.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the three-stage pipeline on a scene directory
    Run {
        /// Scene directory (tracks.wt, visibility.wt, depth.wt, masks.wt,
        /// intrinsics.wt, config.json)
        input: PathBuf,
        /// Output directory
        #[arg(short, long)]
        out: PathBuf,
        /// Optimize the full static set instead of the quantized subset
        #[arg(long)]
        no_speedup: bool,
        /// Emit per-frame aligned depth maps (aligned_depth.wt)
        #[arg(long)]
        depth_out: bool,
        /// Ground-truth directory; computes metrics into report.json
        #[arg(long, value_name = "GT_DIR")]
        eval: Option<PathBuf>,
        /// Stop after stage N (1..=3)
        #[arg(long, value_name = "N", value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: Option<u8>,
        /// Reuse completed stages from a previous run in the same directory
        #[arg(long)]
        resume: bool,
    },
    /// Generate a synthetic scene with ground truth
    Synth {
        /// Output scene directory
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 500)]
        static_points: usize,
        /// Number of rigid movers (50 points each)
        #[arg(long, default_value_t = 1)]
        movers: usize,
        /// Gaussian track noise, pixels
        #[arg(long, default_value_t = 0.0)]
        track_sigma: f64,
        /// Relative Gaussian depth noise
        #[arg(long, default_value_t = 0.0)]
        depth_sigma: f64,
        /// Fraction of tracks replaced by random-walk outliers
        #[arg(long, default_value_t = 0.0)]
        outlier_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate an output directory against a ground-truth scene directory
    Eval {
        /// Directory with poses.json / traj_*.wt / report.json
        est: PathBuf,
        /// Ground-truth scene directory
        gt: PathBuf,
    },
    /// Compare analytic loss gradients against finite differences
    GradCheck {
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Finite-difference step
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Maximum tolerated relative error
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn pipeline_exit(e: &PipelineError) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_input_error() {
        ExitCode::from(EXIT_INPUT)
    } else {
        ExitCode::from(EXIT_NUMERICAL)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let threads = match std::env::var("WTRK_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                eprintln!("error: WTRK_THREADS must be an integer, got {v:?}");
                return ExitCode::from(EXIT_INPUT);
            }
        },
        Err(_) => cli.threads,
    };
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    }

    match cli.cmd {
        Cmd::Run {
            input,
            out,
            no_speedup,
            depth_out,
            eval,
            stage,
            resume,
        } => {
            let opts = RunOptions {
                no_speedup,
                depth_out,
                eval_dir: eval,
                stage,
                resume,
            };
            match run_pipeline(&input, &out, &opts) {
                Ok(manifest) => {
                    for w in &manifest.warnings {
                        eprintln!("warning: {w}");
                    }
                    println!("{}", serde_json::to_string_pretty(&manifest).unwrap());
                    ExitCode::SUCCESS
                }
                Err(e) => pipeline_exit(&e),
            }
        }
        Cmd::Synth {
            out,
            frames,
            width,
            height,
            static_points,
            movers,
            track_sigma,
            depth_sigma,
            outlier_frac,
            seed,
        } => {
            let objects = (0..movers)
                .map(|k| ObjectSpec {
                    kind: ObjectKind::Rigid,
                    points: 50,
                    center: [0.3 * k as f64 - 0.2, 0.1 * k as f64, -0.8],
                    extent: 0.6,
                    velocity: [0.01, 0.005, 0.0],
                    spin_deg_per_frame: 0.0,
                    hidden: false,
                })
                .collect();
            let cfg = SynthConfig {
                frames,
                width,
                height,
                static_points,
                objects,
                seed,
                ..Default::default()
            };
            let mut scene = match generate(&cfg) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_INPUT);
                }
            };
            let noise = NoiseSpec {
                track_sigma_px: track_sigma,
                depth_sigma_rel: depth_sigma,
                outlier_frac,
            };
            perturb(&mut scene, &noise, seed.wrapping_add(1));
            match write_scene(&scene, &out) {
                Ok(()) => {
                    println!("wrote scene to {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_INPUT)
                }
            }
        }
        Cmd::Eval { est, gt } => match eval_only(&est, &gt) {
            Ok((report, warnings)) => {
                for w in &warnings {
                    eprintln!("warning: {w}");
                }
                println!("{}", serde_json::to_string_pretty(&report).unwrap());
                ExitCode::SUCCESS
            }
            Err(e) => pipeline_exit(&e),
        },
        Cmd::GradCheck {
            trials,
            seed,
            step,
            tol,
        } => {
            let report = wtrk_core::audit::gradient_audit(trials, seed, step);
            for (name, err) in &report.per_loss {
                println!("{name}: max relative error {err:.3e}");
            }
            let max = report.max_rel_err();
            if max < tol {
                println!("ok: {max:.3e} < {tol:.1e} over {trials} states");
                ExitCode::SUCCESS
            } else {
                eprintln!("error: gradient mismatch {max:.3e} >= {tol:.1e}");
                ExitCode::from(EXIT_NUMERICAL)
            }
        }
    }
}

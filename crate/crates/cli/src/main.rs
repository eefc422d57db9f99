use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sandesc::geometry::HarrisConfig;
use sandesc_cli::commands::{
    cmd_eval, cmd_extract, cmd_gen_data, cmd_match, cmd_train, load_config, EvalArgs, ExtractArgs, TrainArgs, VizArgs,
};
use sandesc_cli::dataset::GenDataOptions;
use sandesc_cli::eval::EvalOptions;
use sandesc_cli::extract::DetectorSpec;

#[derive(Parser)]
#[command(
    name = "sandesc",
    version,
    about = "Learned local descriptors: train, extract, match, evaluate"
)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Training configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DetectorKind {
    Grid,
    Harris,
}

#[derive(Args)]
struct DetectorArgs {
    #[arg(long, value_enum, default_value = "harris")]
    detector: DetectorKind,
    /// Grid spacing in pixels.
    #[arg(long, default_value_t = 8)]
    stride: usize,
}

impl DetectorArgs {
    fn spec(&self) -> DetectorSpec {
        match self.detector {
            DetectorKind::Grid => DetectorSpec::Grid { stride: self.stride },
            DetectorKind::Harris => DetectorSpec::Harris(HarrisConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene corpus (reference, targets, ground-truth homographies).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long, default_value_t = 5)]
        pairs: usize,
        #[arg(long, default_value_t = 96)]
        crop: usize,
    },
    /// Train a model, or continue one with --resume.
    Train {
        /// Directory of texture images; procedural textures are used when omitted.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics log (JSON lines); defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train until this step instead of the configured count.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Detect keypoints and write their descriptors.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(long = "n-keypoints", default_value_t = 512)]
        n_keypoints: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mutual-nearest-neighbour matching of two descriptor files.
    Match {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Draw matches: IMAGE_A IMAGE_B OUT_PNG.
        #[arg(long, num_args = 3, value_names = ["IMAGE_A", "IMAGE_B", "OUT_PNG"])]
        viz: Option<Vec<PathBuf>>,
    },
    /// Homography benchmark over a scene corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 512)]
        budget: usize,
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenData {
            out,
            scenes,
            pairs,
            crop,
        } => {
            let warp = load_config(cli.config.as_deref())?.warp();
            let opts = GenDataOptions {
                scenes,
                pairs_per_scene: pairs,
                seed,
                crop,
                warp,
            };
            let dirs = sandesc::par::with_jobs(cli.jobs, || cmd_gen_data(&out, &opts))?;
            eprintln!("wrote {} scenes to {}", dirs.len(), out.display());
        }
        Command::Train {
            data_dir,
            out,
            log,
            resume,
            steps,
        } => {
            let args = TrainArgs {
                config: cli.config,
                data_dir,
                out,
                log,
                resume,
                seed: cli.seed,
                steps,
            };
            let ck = sandesc::par::with_jobs(cli.jobs, || cmd_train(&args))?;
            eprintln!("trained to step {}; wrote {}", ck.step, args.out.display());
        }
        Command::Extract {
            checkpoint,
            image,
            detector,
            n_keypoints,
            out,
        } => {
            let args = ExtractArgs {
                checkpoint,
                image,
                detector: detector.spec(),
                n_keypoints,
                out,
            };
            let (file, warning) = sandesc::par::with_jobs(cli.jobs, || cmd_extract(&args))?;
            if let Some(w) = warning {
                eprintln!("{}", serde_json::json!({ "warning": w }));
            }
            eprintln!("wrote {} descriptors to {}", file.len(), args.out.display());
        }
        Command::Match { a, b, out, viz } => {
            let viz = viz.map(|v| VizArgs {
                image_a: v[0].clone(),
                image_b: v[1].clone(),
                out: v[2].clone(),
            });
            let m = cmd_match(&a, &b, &out, viz.as_ref(), seed)?;
            eprintln!("wrote {} matches to {}", m.len(), out.display());
        }
        Command::Eval {
            checkpoint,
            data_dir,
            budget,
            detector,
            out,
        } => {
            let args = EvalArgs {
                checkpoint,
                data_dir,
                out,
                options: EvalOptions {
                    detector: detector.spec(),
                    budget,
                    seed,
                    jobs: cli.jobs,
                },
            };
            let report = cmd_eval(&args)?;
            let a = &report.aggregate;
            eprintln!(
                "{} pairs: MMA@3 {:.4}, AUC@3 {:.4}; report in {}",
                a.pairs,
                a.mma[2].0,
                a.auc[2].0,
                args.out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

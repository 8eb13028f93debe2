use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sr_core::config::RunConfig;
use sr_core::pipeline::{self, RunDir, SampleArgs};
use sr_core::{par, Error};

/// Class- and time-aware diffusion super resolution for ship images.
#[derive(Parser)]
#[command(name = "sr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run directory; every stage reads and writes only inside it.
    #[arg(long)]
    run_dir: PathBuf,
    /// Run configuration (JSON). Must match the stored one after dataset-build.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Compute device; only `cpu` is available.
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Args)]
struct Sampling {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Sampling {
    fn args(&self) -> SampleArgs {
        SampleArgs {
            steps: self.steps,
            eta: self.eta,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Scan a corpus, create degraded pairs and splits.
    DatasetBuild {
        #[command(flatten)]
        common: Common,
        /// Corpus root with one subdirectory per category.
        #[arg(long, required_unless_present = "synthetic")]
        root: Option<PathBuf>,
        /// Generate a synthetic four-category corpus with this many images per category.
        #[arg(long, conflicts_with = "root")]
        synthetic: Option<usize>,
        #[arg(long)]
        factor: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train the ship classifier on HR images.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
    },
    /// Train the conditional latent diffusion model.
    TrainSr {
        #[command(flatten)]
        common: Common,
        /// Freeze the denoiser and train only the conditioning encoder.
        #[arg(long)]
        strict_paper: bool,
    },
    /// Super-resolve one LR image.
    Upsample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Output path relative to the run directory.
        #[arg(long, default_value = "sr.png")]
        output: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Super-resolve the test split and score every image.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Aggregate evaluation into report.json, grid.png and report.md.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn read_config(path: &Path) -> sr_core::Result<RunConfig> {
    if !path.exists() {
        return Err(Error::Dependency {
            what: "config file".into(),
            path: path.to_path_buf(),
        });
    }
    RunConfig::read(path)
}

/// Check device and any `--config` against the run directory.
fn open(common: &Common) -> sr_core::Result<RunDir> {
    if common.device != "cpu" {
        return Err(Error::Config(format!("device `{}` unavailable; use cpu", common.device)));
    }
    let run = RunDir::new(&common.run_dir);
    if let Some(p) = &common.config {
        run.init(&read_config(p)?)?;
    }
    Ok(run)
}

fn print_json<T: serde::Serialize>(v: &T) -> sr_core::Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn run(cli: Cli) -> sr_core::Result<()> {
    match cli.command {
        Command::DatasetBuild {
            common,
            root,
            synthetic,
            factor,
            seed,
        } => {
            if common.device != "cpu" {
                return Err(Error::Config(format!("device `{}` unavailable; use cpu", common.device)));
            }
            let mut cfg = match (&common.config, synthetic) {
                (Some(p), _) => read_config(p)?,
                (None, Some(_)) => RunConfig::desk(),
                (None, None) => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            if let Some(f) = factor {
                cfg.model.factor = f;
            }
            let run = RunDir::new(&common.run_dir);
            run.init(&cfg)?;
            let root = match (root, synthetic) {
                (Some(r), _) => r,
                (None, Some(n)) => pipeline::synthesize_corpus(&run, n, cfg.seed)?,
                (None, None) => return Err(Error::Argument("--root or --synthetic is required".into())),
            };
            print_json(&pipeline::dataset_build(&run, &root)?)
        }
        Command::TrainClassifier { common } => print_json(&pipeline::train_classifier_stage(&open(&common)?)?),
        Command::TrainSr { common, strict_paper } => {
            let run = open(&common)?;
            print_json(&pipeline::train_sr_stage(&run, strict_paper.then_some(true))?)
        }
        Command::Upsample {
            common,
            input,
            output,
            sampling,
        } => {
            let run = open(&common)?;
            let path = pipeline::upsample_file(&run, &input, &output, sampling.args())?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Evaluate { common, sampling } => {
            let run = open(&common)?;
            let rows = pipeline::evaluate_stage(&run, sampling.args())?;
            let n = rows.len() as f64;
            print_json(&serde_json::json!({
                "images": rows.len(),
                "psnr_model": rows.iter().map(|r| r.psnr_model).sum::<f64>() / n,
                "psnr_reference": rows.iter().map(|r| r.psnr_reference).sum::<f64>() / n,
            }))
        }
        Command::Report { common } => print_json(&pipeline::report_stage(&open(&common)?)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    par::init_workers_from_env();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sr: {e}");
            ExitCode::from(if matches!(e, Error::Dependency { .. }) { 3 } else { 1 })
        }
    }
}

//! `dmcvr <subcommand> --config <file> [--seed N] [--out DIR]`

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmcvr::pipeline::{ExperimentConfig, Method, Pipeline};
use dmcvr::Error;

#[derive(Parser)]
#[command(name = "dmcvr", version, about = "Slice-stack super-resolution with morphology-guided diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Phantoms, sparse test stacks and long-axis planes.
    GenerateData(Common),
    /// Morphology network and evaluator.
    TrainSeg(Common),
    /// Conditional diffusion models.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        /// `dmcvr` or `dmcvr-noMor`; both when omitted.
        #[arg(long)]
        method: Option<String>,
    },
    /// Dense volumes for every test case.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// `dmcvr`, `dmcvr-noMor`, `nn` or `linear`; all when omitted.
        #[arg(long)]
        method: Option<String>,
    },
    /// Metric reports and Markdown tables.
    Evaluate(Common),
    /// PNG grids of slices, labels and plane sections.
    Montage(Common),
    /// All stages in order.
    Run(Common),
}

fn pipeline(c: &Common) -> Result<Pipeline, Error> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    Pipeline::new(cfg)
}

fn methods(name: &Option<String>, default: &[Method]) -> Result<Vec<Method>, Error> {
    match name {
        Some(n) => Ok(vec![Method::parse(n)?]),
        None => Ok(default.to_vec()),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenerateData(c) => pipeline(&c)?.generate_data(),
        Command::TrainSeg(c) => pipeline(&c)?.train_seg(),
        Command::TrainDiffusion { common, method } => {
            let ms = methods(&method, &[Method::Dmcvr, Method::DmcvrNoMor])?;
            if let Some(m) = ms.iter().find(|m| !m.is_diffusion()) {
                return Err(Error::Config(format!("{} is not a diffusion method", m.name())));
            }
            pipeline(&common)?.train_diffusion(&ms)
        }
        Command::Reconstruct { common, method } => {
            let p = pipeline(&common)?;
            for m in methods(&method, &Method::ALL)? {
                p.reconstruct(m)?;
            }
            Ok(())
        }
        Command::Evaluate(c) => {
            let summary = pipeline(&c)?.evaluate()?;
            println!("{}", summary.to_markdown());
            Ok(())
        }
        Command::Montage(c) => pipeline(&c)?.montage(),
        Command::Run(c) => {
            let summary = pipeline(&c)?.run_all()?;
            println!("{}", summary.to_markdown());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

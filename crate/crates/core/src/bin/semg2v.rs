use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semg2v::config::PipelineConfig;
use semg2v::pipeline::{infer_files, Command, Pipeline};
use semg2v::vocoder::DEFAULT_ITERS;
use semg2v::Result;

/// Silent-speech EMG to voice pipeline.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one stage (synth-data, condition, featurize, align, train,
    /// infer, evaluate) or `all`.
    Run {
        stage: String,
        /// Flat `key = value` config file.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Override a config value, e.g. `--set epochs=20`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the resolved configuration.
    Config {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Synthesize speech from raw silent-EMG containers with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ITERS)]
        iters: usize,
        /// Container base paths (`<base>.f32` + `<base>.json`).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn resolve(config: Option<PathBuf>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut cfg = match config {
        Some(p) => PipelineConfig::load(&p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Run { stage, config, overrides } => {
            let command: Command = stage.parse()?;
            let pipeline = Pipeline::new(resolve(config, &overrides)?)?;
            for r in pipeline.run(command)? {
                let state = if r.skipped { "skipped (unchanged)" } else { "done" };
                println!("{:<11} {state}  {}", r.stage.name(), r.dir.display());
            }
        }
        Cmd::Config { config, overrides } => {
            let cfg = resolve(config, &overrides)?;
            cfg.validate()?;
            print!("{}", cfg.to_text());
        }
        Cmd::Infer { checkpoint, out, iters, inputs } => {
            for wav in infer_files(&checkpoint, &inputs, &out, iters)? {
                println!("{}", wav.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stainkit::Error;

use commands::EvaluateArgs;
use config::PipelineConfig;
use manifest::{now, RunManifest};

#[derive(Parser)]
#[command(name = "stainkit", version, about = "Virtual staining of dark-field cell images")]
struct Cli {
    /// TOML pipeline configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Device::Cpu)]
    device: Device,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Device {
    Cpu,
    /// Not available in this build; falls back to the CPU with a warning.
    Accelerator,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an unpaired synthetic dark-field / bright-field dataset.
    SynthData,
    /// Fit the histogram-matching LUT and write enhanced dark-field images.
    Enhance {
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
    },
    /// Pretrain the grayscale-to-color teacher on bright-field images.
    PretrainTeacher {
        /// Dataset directory (bright split) or a directory of PNGs.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the student generator against the frozen teacher.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        lut: PathBuf,
        /// Student checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stain a dark-field PNG or every PNG in a directory.
    Stain {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lut: PathBuf,
        #[arg(long)]
        student: PathBuf,
    },
    /// Compute FID, KID, NIQE and content distance and append a results row.
    Evaluate {
        /// Stained outputs.
        #[arg(long)]
        outputs: PathBuf,
        /// Reference bright-field images (directory or dataset).
        #[arg(long)]
        references: PathBuf,
        /// Enhanced inputs, matched to outputs by file name.
        #[arg(long)]
        enhanced: PathBuf,
        #[arg(long)]
        niqe_model: PathBuf,
        #[arg(long, default_value = "stainkit")]
        method: String,
        /// Results table to append to; defaults to OUT/results.csv.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Fit the NIQE pristine model on bright-field images.
    FitNiqe {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write the feature embedder's weights file.
    ExportEmbedder,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Enhance { .. } => "enhance",
            Command::PretrainTeacher { .. } => "pretrain-teacher",
            Command::Train { .. } => "train",
            Command::Stain { .. } => "stain",
            Command::Evaluate { .. } => "evaluate",
            Command::FitNiqe { .. } => "fit-niqe",
            Command::ExportEmbedder => "export-embedder",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Geometry(_) | Error::InvalidArgument(_) => 2,
        Error::Missing(_) => 3,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        Error::NonFinite(_) | Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn run(cli: &Cli) -> stainkit::Result<()> {
    let started = now();
    let cfg = PipelineConfig::load(cli.config.as_deref())?.resolve(cli.seed)?;
    if cli.device == Device::Accelerator {
        eprintln!("warning: no accelerator backend in this build, running on the CPU");
    }
    let out: &Path = &cli.out;
    let outputs = match &cli.command {
        Command::SynthData => commands::synth_data(&cfg, out)?,
        Command::Enhance { data } => commands::enhance_cmd(&cfg, data, out)?,
        Command::PretrainTeacher { data } => commands::pretrain_teacher_cmd(&cfg, data, out)?,
        Command::Train {
            data,
            teacher,
            lut,
            resume,
        } => commands::train_cmd(&cfg, data, teacher, lut, resume.as_deref(), out)?,
        Command::Stain { input, lut, student } => commands::stain_cmd(input, lut, student, out)?,
        Command::Evaluate {
            outputs,
            references,
            enhanced,
            niqe_model,
            method,
            results,
        } => {
            let args = EvaluateArgs {
                outputs,
                references,
                enhanced,
                niqe_model,
                method,
                results: results.as_deref(),
            };
            commands::evaluate_cmd(&cfg, &args, out)?.1
        }
        Command::FitNiqe { data } => commands::fit_niqe_cmd(&cfg, data, out)?,
        Command::ExportEmbedder => commands::export_embedder_cmd(&cfg, out)?,
    };
    RunManifest {
        subcommand: cli.command.name().to_string(),
        config_path: cli.config.clone(),
        seed: cfg.seed,
        out_dir: cli.out.clone(),
        device: "cpu".into(),
        started_unix: started,
        finished_unix: now(),
        config_hash: cfg.hash(),
        outputs,
    }
    .write(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

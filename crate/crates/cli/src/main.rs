mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsfield_core::vae::EncoderMode;

use crate::config::PipelineConfig;

#[derive(Parser, Debug)]
#[command(name = "gsfield", version, about = "Continuous-field Gaussian splat pipeline")]
struct Cli {
    /// TOML pipeline config; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Validate the config and print the resolved plan without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize a splat into [-0.9, 0.9]³ and clip its scales.
    Preprocess {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scale_clip: Option<f64>,
    },
    /// Draw and label training queries for one splat.
    SampleLabels {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_near: Option<usize>,
        #[arg(long)]
        n_uniform: Option<usize>,
        #[arg(long)]
        d_trunc: Option<f64>,
        /// linear or exponent
        #[arg(long)]
        mapping: Option<String>,
    },
    /// Fit a triplane field directly to one splat.
    FitField {
        input: PathBuf,
        /// Cached labels; drawn from the sampling config when omitted.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the Gaussian VAE on a dataset manifest.
    TrainVae {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        /// attributes or points
        #[arg(long)]
        mode: Option<EncoderMode>,
    },
    /// Train the latent denoiser on VAE latents of a dataset manifest.
    TrainLdm {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// none, partial, or file (third manifest column)
        #[arg(long, default_value = "none")]
        condition: CondKind,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample a latent, decode it and extract a splat.
    Generate(GenerateArgs),
    /// Cut a random chunk from a splat and generate a completion from it.
    Complete {
        input: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Also write the chunk used as the condition.
        #[arg(long)]
        partial_out: Option<PathBuf>,
    },
    /// Predict a splat from a bare point cloud with a points-mode VAE.
    P2g {
        /// Point cloud: `.xyz` text (three numbers per line) or a splat PLY.
        input: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Discretize a field checkpoint into a splat.
    Extract {
        #[arg(long)]
        field: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Evaluate a candidate splat and/or field against a reference splat.
    Metrics {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        candidate: Option<PathBuf>,
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the eight built-in toy shapes and a manifest.
    ToySet {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum CondKind {
    None,
    Partial,
    File,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    ldm: PathBuf,
    #[arg(long)]
    guidance: Option<f64>,
}

#[derive(Args, Debug)]
struct OutputArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of Gaussians to extract.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    depth: Option<u32>,
    #[arg(long)]
    theta: Option<f64>,
    /// Also save the decoded field checkpoint.
    #[arg(long)]
    field_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[group(id = "condition", required = true, multiple = false)]
struct ConditionArgs {
    #[arg(long, group = "condition")]
    uncond: bool,
    /// Condition embedding file.
    #[arg(long, group = "condition")]
    cond: Option<PathBuf>,
    /// Partial splat to complete.
    #[arg(long, group = "condition")]
    partial: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    condition: ConditionArgs,
    #[command(flatten)]
    models: ModelArgs,
    #[command(flatten)]
    output: OutputArgs,
}

/// Failure with an exit code: 1 usage, 2 data, 3 numerical.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn kind(&self) -> &'static str {
        match self.code {
            1 => "usage",
            2 => "data",
            _ => "numerical",
        }
    }
}

impl From<gsfield_core::Error> for CliError {
    fn from(e: gsfield_core::Error) -> Self {
        use gsfield_core::Error as E;
        let code = match e {
            E::Invalid(_) => 1,
            E::Io(_) | E::Format(_) | E::Data(_) | E::Shape { .. } => 2,
            E::Numerical(_) | E::EmptyField => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            return report(&CliError::usage(first));
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> ExitCode {
    let line = serde_json::json!({ "error": { "kind": e.kind(), "code": e.code, "message": e.message } });
    eprintln!("{line}");
    ExitCode::from(e.code)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads == Some(0) {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    let ctx = commands::Context {
        dry_run: cli.dry_run,
    };
    commands::dispatch(cli.command, cfg, &ctx)
}

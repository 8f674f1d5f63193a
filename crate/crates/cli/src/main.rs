//! `storyagent`: batch entry points for the story pipeline.
//!
//! Every command prints exactly one JSON summary line on stdout, always with
//! an `"ok"` key; logs and training telemetry go to stderr. Exit codes: 0
//! success, 1 usage or configuration error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::CliConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] storyagent_core::Error),
    #[error(transparent)]
    Service(#[from] storyagent_service::ServiceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "storyagent", version, about = "Customized story video pipeline")]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every seeded step of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Manage registered subjects.
    #[command(subcommand)]
    Subject(SubjectCommand),
    /// Train the base denoiser on the sprite family.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune LoRA adapters and block embeddings for a subject.
    Finetune {
        #[arg(long)]
        subject: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Also write the customization checkpoint here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Design a script and build the storyboard stills.
    Storyboard {
        #[arg(long)]
        subject: String,
        #[command(flatten)]
        story: StorySource,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Animate a storyboard directory written by `storyboard`.
    Animate {
        #[arg(long)]
        subject: String,
        #[arg(long)]
        board: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Multi-agent pipeline runs.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Compare a subject's customization with untrained adapters on held-out shots.
    Eval {
        #[arg(long)]
        subject: String,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Finite-difference check of the customization gradients; exits 2 above 1e-4.
    Gradcheck {
        /// Check this many randomly chosen scalars instead of all of them.
        #[arg(long)]
        subsample: Option<usize>,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },
    /// Run the HTTP service until interrupted.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum SubjectCommand {
    /// Register a subject from a sprite, synthesizing its reference clips.
    Add {
        #[arg(long)]
        id: String,
        /// RGBA PNG sprite; alpha is the mask.
        #[arg(long, conflicts_with = "family", required_unless_present = "family")]
        sprite: Option<PathBuf>,
        /// Use member N of the built-in sprite family instead of a file.
        #[arg(long)]
        family: Option<usize>,
        /// Number of synthesized reference clips.
        #[arg(long, default_value_t = 4)]
        clips: usize,
    },
    /// List registered subjects.
    List,
}

#[derive(Debug, Subcommand)]
enum PipelineCommand {
    /// Run design, storyboard, animation and review to completion.
    Run {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct StorySource {
    /// Story prompt for the designer.
    #[arg(long)]
    prompt: Option<String>,
    /// Storyboard DSL file, used instead of the designer.
    #[arg(long)]
    script: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let cfg = match &cli.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    }
    .with_seed(cli.seed);
    cfg.validate()?;
    match cli.command {
        Command::Subject(SubjectCommand::Add { id, sprite, family, clips }) => {
            commands::subject_add(&cfg, &id, sprite.as_deref(), family, clips)
        }
        Command::Subject(SubjectCommand::List) => commands::subject_list(&cfg),
        Command::Pretrain { out, steps } => commands::pretrain(cfg, &out, steps),
        Command::Finetune { subject, epochs, lr, out } => commands::finetune(cfg, &subject, epochs, lr, out.as_deref()),
        Command::Storyboard { subject, story, shots, out } => {
            commands::storyboard(cfg, &subject, story.prompt.as_deref(), story.script.as_deref(), shots, &out)
        }
        Command::Animate { subject, board, out, steps } => commands::animate(cfg, &subject, &board, &out, steps),
        Command::Pipeline(PipelineCommand::Run { prompt, subject, shots, steps }) => {
            commands::pipeline_run(cfg, &prompt, &subject, shots, steps)
        }
        Command::Eval { subject, shots, steps } => commands::eval(cfg, &subject, shots, steps),
        Command::Gradcheck { subsample, eps } => commands::gradcheck(&cfg, subsample, eps),
        Command::Serve { bind } => commands::serve(cfg, bind),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    match run(cli) {
        // A command that ran to an unsuccessful outcome (a failed run, a
        // gradient check above tolerance) reports `"ok": false`.
        Ok(summary) => {
            println!("{summary}");
            if summary["ok"] == serde_json::Value::Bool(false) {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            let code = e.exit_code();
            println!("{}", serde_json::json!({ "ok": false, "error": e.to_string(), "exit_code": code }));
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}

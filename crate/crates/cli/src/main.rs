//! `streamdec`: corpus generation, training, decoding, evaluation,
//! ablations and mask dumps from one config file.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use streamdec::seqlayout::LayoutKind;

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "streamdec", version, about = "Streaming decoder-only recognition over discrete speech tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic aligned corpus into the output directory.
    Gen(Common),
    /// Train a model on a corpus; writes checkpoints, metrics and an eval report.
    Train(Common),
    /// Decode a corpus split with a checkpoint; one JSON record per utterance.
    Decode(Common),
    /// Evaluate a checkpoint on a corpus split.
    Eval(Common),
    /// Train and evaluate the ablation variants.
    Ablate(Common),
    /// Attention mask utilities.
    Masks {
        #[command(subcommand)]
        action: MasksCommand,
    },
}

#[derive(Subcommand)]
enum MasksCommand {
    /// Write one utterance's training mask as PBM and CSV.
    Dump(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Tti,
    Bti,
    Nonstreaming,
}

impl From<LayoutArg> for LayoutKind {
    fn from(a: LayoutArg) -> Self {
        match a {
            LayoutArg::Tti => LayoutKind::Tti,
            LayoutArg::Bti => LayoutKind::Bti,
            LayoutArg::Nonstreaming => LayoutKind::NonStreaming,
        }
    }
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config, or a run_manifest.json to replay.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Base seed for corpus generation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Threads for training batch assembly.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    delta: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long, value_enum)]
    layout: Option<LayoutArg>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Utterance id (masks dump).
    #[arg(long)]
    utt: Option<String>,
    /// Mask variant: global, causal or right_chunk (masks dump).
    #[arg(long)]
    variant: Option<String>,
    /// Config override, e.g. `--set train.learning_rate=0.003` or
    /// equivalently `--train.learning_rate=0.003`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut cfg = base.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.corpus.seed = s;
            cfg.train.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.train.workers = w;
        }
        if let Some(d) = self.delta {
            cfg.decode.delta = d;
        }
        if let Some(b) = self.beam {
            cfg.decode.beam = b;
        }
        if let Some(l) = self.layout {
            cfg.train.layout = l.into();
        }
        cfg.decode.mode = cfg.train.layout;
        if let Some(c) = &self.corpus {
            cfg.inputs.corpus = Some(c.clone());
        }
        if let Some(c) = &self.checkpoint {
            cfg.inputs.checkpoint = Some(c.clone());
        }
        if let Some(u) = &self.utt {
            cfg.inputs.utt = Some(u.clone());
        }
        if let Some(v) = &self.variant {
            cfg.inputs.variant = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common) = match &cli.command {
        Command::Gen(c) => ("gen", c),
        Command::Train(c) => ("train", c),
        Command::Decode(c) => ("decode", c),
        Command::Eval(c) => ("eval", c),
        Command::Ablate(c) => ("ablate", c),
        Command::Masks { action: MasksCommand::Dump(c) } => ("masks dump", c),
    };
    let cfg = common.resolve()?;
    let out = &common.out_dir;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let run = match name {
        "gen" => commands::gen(&cfg, out)?,
        "train" => commands::train(&cfg, out)?,
        "decode" => commands::decode(&cfg, out)?,
        "eval" => commands::eval(&cfg, out)?,
        "ablate" => commands::ablate(&cfg, out)?,
        _ => commands::masks_dump(&cfg, out)?,
    };
    manifest::write(out, name, &cfg, &run)
}

/// Dotted `--section.key=value` flags are shorthand for `--set section.key=value`.
fn expand_dotted(args: impl Iterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|kv| kv.split_once('=')) {
            Some((key, _)) if key.contains('.') => {
                out.push("--set".into());
                out.push(a[2..].to_string());
            }
            _ => out.push(a),
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(expand_dotted(std::env::args())) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    return ExitCode::SUCCESS;
                }
                ErrorKind::InvalidSubcommand
                | ErrorKind::MissingSubcommand
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => CliError::UnknownCommand(String::new()),
                _ => CliError::Usage(String::new()),
            }
            .exit_code();
            let rendered = e.render().to_string();
            eprintln!("{}", rendered.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error: {}", msg.lines().map(str::trim).collect::<Vec<_>>().join(" "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

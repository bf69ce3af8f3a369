mod commands;
mod config;
mod datasets;

use std::path::PathBuf;
use std::process::ExitCode;

use cadenza_core::composer::CondMode;
use cadenza_core::understanding::HeadMode;
use clap::{Parser, Subcommand, ValueEnum};

use config::PipelineConfig;

#[derive(Parser)]
#[command(
    name = "cadenza",
    version,
    about = "Text-controlled symbolic music generation"
)]
struct Cli {
    /// TOML pipeline configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Heads {
    Multi,
    One,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Prefix,
    Embedding,
    #[value(name = "cond_layernorm")]
    CondLayernorm,
}

#[derive(Subcommand)]
enum Command {
    /// Cut clips from the MIDI corpus (or draw procedural ones), extract
    /// their attributes and tokenize them.
    Extract {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize a balanced text-to-attribute dataset from templates.
    SynthText {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the text-to-attribute model on the text dataset.
    TrainText2attr {
        #[arg(long)]
        heads: Option<Heads>,
        #[arg(long = "checkpoint-t2a")]
        checkpoint: Option<PathBuf>,
    },
    /// Train the attribute-to-music model on the clip dataset.
    TrainAttr2music {
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long = "checkpoint-a2m")]
        checkpoint: Option<PathBuf>,
    },
    /// Write a MIDI file from text, or from attribute values directly, plus
    /// a JSON sidecar.
    Generate {
        #[arg(
            long,
            conflicts_with = "attributes",
            required_unless_present = "attributes"
        )]
        text: Option<String>,
        /// `{"attribute": "value", ...}` inline or as a file path.
        #[arg(long)]
        attributes: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "checkpoint-t2a")]
        checkpoint_t2a: Option<PathBuf>,
        #[arg(long = "checkpoint-a2m")]
        checkpoint_a2m: Option<PathBuf>,
    },
    /// Score predictions or trained models.
    Evaluate {
        #[command(subcommand)]
        target: EvalTarget,
    },
    /// Attribute-value histograms of a dataset.
    Stats {
        /// Clip or text dataset, or JSONL attribute vectors; defaults to
        /// the configured text dataset.
        file: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EvalTarget {
    /// ASA and per-attribute accuracy of predicted against gold vectors.
    Vectors {
        pred: PathBuf,
        gold: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The text-to-attribute model on the validation split of the text
    /// dataset.
    Text2attr {
        #[arg(long = "checkpoint-t2a")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Control accuracy of the attribute-to-music model on held-out clips.
    Attr2music {
        #[arg(long = "checkpoint-a2m")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    match cli.command {
        Command::Extract { out } => commands::extract(&cfg, out),
        Command::SynthText { out } => commands::synth_text(&cfg, out),
        Command::TrainText2attr { heads, checkpoint } => {
            if let Some(h) = heads {
                cfg.text2attr.model.mode = match h {
                    Heads::Multi => HeadMode::Multi,
                    Heads::One => HeadMode::One,
                };
            }
            commands::train_text2attr(&cfg, checkpoint)
        }
        Command::TrainAttr2music { mode, checkpoint } => {
            if let Some(m) = mode {
                cfg.attr2music.model.mode = match m {
                    Mode::Prefix => CondMode::Prefix,
                    Mode::Embedding => CondMode::Embedding,
                    Mode::CondLayernorm => CondMode::CondLayernorm,
                };
            }
            commands::train_attr2music(&cfg, checkpoint)
        }
        Command::Generate {
            text,
            attributes,
            out,
            checkpoint_t2a,
            checkpoint_a2m,
        } => commands::generate(
            &cfg,
            commands::GenerateArgs {
                text,
                attributes,
                out,
                checkpoint_t2a,
                checkpoint_a2m,
            },
        ),
        Command::Evaluate { target } => match target {
            EvalTarget::Vectors { pred, gold, out } => {
                commands::evaluate_vectors(&cfg, &pred, &gold, out)
            }
            EvalTarget::Text2attr { checkpoint, out } => {
                commands::evaluate_text2attr(&cfg, checkpoint, out)
            }
            EvalTarget::Attr2music { checkpoint, out } => {
                commands::evaluate_attr2music(&cfg, checkpoint, out)
            }
        },
        Command::Stats { file, out } => commands::stats(&cfg, file, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

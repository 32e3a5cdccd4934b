use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serde_json::Value;

use trajq_cli::{
    cmd_attention, cmd_eval, cmd_inspect_replay, cmd_play, cmd_reorder_file, cmd_train, exit_code, parse_overrides, AttentionArgs,
    EvalArgs, RunConfig, EXIT_USAGE,
};
use trajq_core::trajectory::{DEFAULT_MAX_SENTENCES, PAD_TOKEN};

/// Deep Q-learning agents for scriptable text games.
///
/// Log verbosity follows the TRAJQ_LOG environment variable (e.g. `info`).
#[derive(Debug, Parser)]
#[command(name = "trajq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; same as `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override such as `train.batch_size=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut ov = parse_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            ov.push(("train.seed".into(), Value::from(s)));
        }
        if let Some(d) = &self.out_dir {
            ov.push(("output_dir".into(), Value::from(d.to_string_lossy().into_owned())));
        }
        Ok(RunConfig::load(&self.config, &ov)?)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an agent; writes metrics.jsonl and ckpt-<step>.bin.
    Train(RunArgs),
    /// Evaluate a checkpoint and print the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        game: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 100)]
        max_steps: u32,
        #[arg(long, default_value_t = DEFAULT_MAX_SENTENCES)]
        max_sentences: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CoNLL-U parses, when the agent was trained on reordered text.
        #[arg(long)]
        parses: Option<PathBuf>,
    },
    /// Play a game interactively; type `quit` to leave.
    Play {
        #[arg(long)]
        game: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reorder CoNLL-U sentences into padded head-and-children blocks.
    Reorder {
        conllu: PathBuf,
        /// Largest convolution width; blocks are separated by width-1 pads.
        #[arg(long, default_value_t = 3)]
        width: usize,
        #[arg(long, default_value = PAD_TOKEN)]
        pad: String,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out greedily and emit the top spans behind each decision.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        game: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: u32,
        #[arg(long, default_value_t = 3)]
        topk: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MAX_SENTENCES)]
        max_sentences: usize,
        #[arg(long)]
        parses: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train for the configured steps and dump the replay memory as JSONL.
    InspectReplay {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train(args) => {
            cmd_train(&args.resolve()?)?;
        }
        Command::Eval { checkpoint, game, episodes, epsilon, max_steps, max_sentences, seed, parses } => {
            let args = EvalArgs { checkpoint, game, episodes, epsilon, max_steps, max_sentences, seed, parses };
            cmd_eval(&args, &mut out)?;
        }
        Command::Play { game, seed } => {
            let stdin = io::stdin();
            cmd_play(&game, seed, &mut stdin.lock(), &mut out)?;
        }
        Command::Reorder { conllu, width, pad, out: path } => {
            cmd_reorder_file(&conllu, width, &pad, path.as_deref(), &mut out)?;
        }
        Command::Attention { checkpoint, game, steps, topk, seed, max_sentences, parses, out: path } => {
            let args = AttentionArgs { checkpoint, game, steps, topk, seed, max_sentences, parses };
            cmd_attention(&args, path.as_deref(), &mut out)?;
        }
        Command::InspectReplay { run, out: path } => {
            cmd_inspect_replay(&run.resolve()?, &path)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TRAJQ_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

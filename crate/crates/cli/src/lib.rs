//! Commands behind the `trajq` binary. Each takes its arguments and output
//! sinks explicitly so it can run in-process under test.

pub mod config;

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

use trajq_core::deptree::{read_conllu, reorder_tree, DepParses};
use trajq_core::game::GameSpec;
use trajq_core::replay::ReplayMemory;
use trajq_core::trainer::checkpoint::write_atomic;
use trajq_core::trainer::{
    evaluate, run_training, Checkpoint, EvalOptions, EvalReport, MetricRecord, StateBuilder, TrainObserver, TrainSetup,
    TrainSummary,
};
use trajq_core::trajectory::{Vocab, PAD_TOKEN};

pub use config::RunConfig;

/// A bad invocation or config; maps to exit status 2.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

fn load_game(path: &Path) -> Result<GameSpec> {
    if !path.is_file() {
        return Err(UsageError(format!("game file {} does not exist", path.display())).into());
    }
    GameSpec::load(path).map_err(|e| UsageError(e.to_string()).into())
}

fn load_parses(path: &Path) -> Result<DepParses> {
    let f = File::open(path).map_err(|e| UsageError(format!("cannot open parses {}: {e}", path.display())))?;
    DepParses::from_conllu(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Whole-number points print without a fractional part.
pub fn fmt_points(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Streams metrics to a temporary file that becomes `metrics.jsonl` on
/// success and writes one checkpoint file per evaluation.
struct DirObserver {
    dir: PathBuf,
    metrics_tmp: PathBuf,
    metrics: BufWriter<File>,
    replay_out: Option<PathBuf>,
}

impl DirObserver {
    fn new(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let metrics_tmp = dir.join(".metrics.jsonl.tmp");
        let metrics = BufWriter::new(File::create(&metrics_tmp)?);
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics_tmp,
            metrics,
            replay_out: None,
        })
    }

    fn finish(mut self) -> io::Result<()> {
        self.metrics.flush()?;
        self.metrics.get_ref().sync_all()?;
        fs::rename(&self.metrics_tmp, self.dir.join("metrics.jsonl"))
    }
}

impl TrainObserver for DirObserver {
    fn metric(&mut self, record: &MetricRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")
    }

    fn checkpoint(&mut self, step: u64, ckpt: &Checkpoint) -> io::Result<()> {
        write_atomic(&self.dir.join(format!("ckpt-{step}.bin")), &ckpt.to_bytes())
    }

    fn finished(&mut self, memory: &ReplayMemory) -> io::Result<()> {
        if let Some(path) = &self.replay_out {
            let mut buf = Vec::new();
            memory.dump_jsonl(&mut buf)?;
            write_atomic(path, &buf)?;
        }
        Ok(())
    }
}

fn train_with(cfg: &RunConfig, replay_out: Option<PathBuf>) -> Result<TrainSummary> {
    let spec = load_game(&cfg.game)?;
    let parses = match (&cfg.reorder.enabled, &cfg.reorder.parses) {
        (true, Some(p)) => Some(load_parses(p)?),
        _ => None,
    };
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| UsageError(format!("output directory {} is not writable: {e}", cfg.output_dir.display())))?;
    let resolved = serde_json::to_vec_pretty(cfg)?;
    write_atomic(&cfg.output_dir.join("config.json"), &resolved)?;
    let mut obs = DirObserver::new(&cfg.output_dir)?;
    obs.replay_out = replay_out;
    let setup = TrainSetup {
        spec: &spec,
        train: cfg.train.clone(),
        encoder: cfg.encoder.clone(),
        shaping: cfg.shaping.clone(),
        parses: parses.as_ref(),
    };
    let (_, summary) = run_training(&setup, &mut obs)?;
    obs.finish()?;
    Ok(summary)
}

/// Train and write `metrics.jsonl`, `ckpt-<step>.bin` and the resolved
/// `config.json` into the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let summary = train_with(cfg, None)?;
    log::info!(
        "trained {} steps over {} episodes, {} updates",
        summary.steps,
        summary.episodes,
        summary.updates
    );
    Ok(summary)
}

/// Train for the configured steps and dump the final replay memory.
pub fn cmd_inspect_replay(cfg: &RunConfig, out: &Path) -> Result<()> {
    train_with(cfg, Some(out.to_path_buf()))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub game: PathBuf,
    pub episodes: usize,
    pub epsilon: f64,
    pub max_steps: u32,
    pub max_sentences: usize,
    pub seed: u64,
    pub parses: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&args.epsilon) {
        return Err(UsageError(format!("epsilon {} is outside [0, 1]", args.epsilon)).into());
    }
    let spec = load_game(&args.game)?;
    let parses = args.parses.as_deref().map(load_parses).transpose()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let vocab = Vocab::from_game(&spec);
    ckpt.check_compatible(vocab.len(), spec.num_actions())?;
    let net = ckpt.network()?;
    let report = evaluate(
        &net,
        &spec,
        &vocab,
        &EvalOptions {
            episodes: args.episodes,
            epsilon: args.epsilon,
            max_steps: args.max_steps,
            max_sentences: args.max_sentences,
            seed: args.seed,
            parses: parses.as_ref(),
        },
    )?;
    serde_json::to_writer(&mut *out, &report)?;
    writeln!(out)?;
    Ok(report)
}

/// Interactive session: print masters with the running score, read one
/// action per line, `quit` to leave.
pub fn cmd_play(game: &Path, seed: u64, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let spec = load_game(game)?;
    let (mut env, master) = spec.reset(seed);
    writeln!(out, "{master} (Score: {}, Moves: {})", fmt_points(env.score()), env.moves())?;
    let mut line = String::new();
    while !env.is_terminated() {
        write!(out, "> ")?;
        out.flush()?;
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if text.eq_ignore_ascii_case("quit") {
            return Ok(());
        }
        let Some(a) = spec.action_id(&text.to_lowercase()) else {
            writeln!(out, "Unknown action {text:?}. Available actions:")?;
            for a in spec.actions() {
                writeln!(out, "  {a}")?;
            }
            continue;
        };
        let r = env.step(a)?;
        writeln!(out, "{} (Score: {}, Moves: {})", r.master, fmt_points(env.score()), r.moves)?;
    }
    writeln!(out, "The game is over.")?;
    Ok(())
}

/// One reordered sentence per line for every tree in the CoNLL-U input.
pub fn cmd_reorder(input: impl BufRead, width: usize, pad: &str, out: &mut dyn Write) -> Result<()> {
    if width == 0 {
        return Err(UsageError("width must be positive".into()).into());
    }
    let trees = read_conllu(input)?;
    for t in &trees {
        writeln!(out, "{}", reorder_tree(t, pad, width).join(" "))?;
    }
    Ok(())
}

pub fn cmd_reorder_file(path: &Path, width: usize, pad: &str, out_path: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let f = File::open(path).map_err(|e| UsageError(format!("cannot open {}: {e}", path.display())))?;
    let mut buf = Vec::new();
    cmd_reorder(BufReader::new(f), width, pad, &mut buf).with_context(|| format!("reordering {}", path.display()))?;
    match out_path {
        Some(p) => write_atomic(p, &buf)?,
        None => stdout.write_all(&buf)?,
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SpanRecord {
    pub start: usize,
    pub end: usize,
    pub tokens: Vec<String>,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionRecord {
    pub step: u32,
    pub action: String,
    pub spans: Vec<SpanRecord>,
}

#[derive(Debug, Clone)]
pub struct AttentionArgs {
    pub checkpoint: PathBuf,
    pub game: PathBuf,
    pub steps: u32,
    pub topk: usize,
    pub seed: u64,
    pub max_sentences: usize,
    pub parses: Option<PathBuf>,
}

/// Greedy rollout that records the top spans behind every decision.
pub fn attention_records(args: &AttentionArgs) -> Result<Vec<AttentionRecord>> {
    if args.topk == 0 {
        return Err(UsageError("--topk must be positive".into()).into());
    }
    let spec = load_game(&args.game)?;
    let parses = args.parses.as_deref().map(load_parses).transpose()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let vocab = Vocab::from_game(&spec);
    ckpt.check_compatible(vocab.len(), spec.num_actions())?;
    let net = ckpt.network()?;
    if !net.config().has_trace() {
        anyhow::bail!("attention needs a max-pooling CNN checkpoint; this one has no max-pool trace");
    }
    let (mut env, master) = spec.reset(args.seed);
    let mut sb = StateBuilder::new(&vocab, parses.as_ref(), net.config(), args.max_sentences);
    sb.start(master);
    let mut records = Vec::new();
    while !env.is_terminated() && env.moves() < args.steps {
        let ids: Vec<usize> = sb.ids().iter().map(|&i| i as usize).collect();
        let pos: Vec<usize> = (0..ids.len()).collect();
        let q = net.encode(&ids, &pos)?.q;
        let a = trajq_core::encoder::argmax(&q);
        let spans = net
            .attention(&ids, &pos, a, args.topk)?
            .into_iter()
            .map(|s| SpanRecord {
                tokens: ids[s.start..=s.end]
                    .iter()
                    .map(|&i| vocab.token(i).unwrap_or(PAD_TOKEN).to_string())
                    .collect(),
                start: s.start,
                end: s.end,
                weight: s.weight,
            })
            .collect();
        records.push(AttentionRecord {
            step: env.moves(),
            action: spec.actions()[a].clone(),
            spans,
        });
        let r = env.step(a)?;
        sb.push(&spec.actions()[a], &r.master);
    }
    Ok(records)
}

pub fn cmd_attention(args: &AttentionArgs, out_path: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let mut buf = Vec::new();
    for r in attention_records(args)? {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    match out_path {
        Some(p) => write_atomic(p, &buf)?,
        None => stdout.write_all(&buf)?,
    }
    Ok(())
}

/// Parse every `key=value` flag.
pub fn parse_overrides(raw: &[String]) -> Result<Vec<(String, Value)>, UsageError> {
    raw.iter().map(|r| config::parse_override(r)).collect()
}

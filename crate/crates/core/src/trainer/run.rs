use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::deptree::DepParses;
use crate::encoder::{EncoderConfig, QNetwork};
use crate::game::GameSpec;
use crate::numerics::AdamState;
use crate::replay::{importance_scale, ReplayMemory, ReplaySample, SamplerKind};
use crate::reward::{RewardShaper, ShapingConfig};
use crate::trajectory::{tokenize, Tag, Trajectory, Vocab};

use super::td::{act, ids_of, td_step, TdSample};
use super::{Checkpoint, TrainConfig, TrainError};

/// Independent random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 0,
    Action = 1,
    Replay = 2,
    Episodes = 3,
    Eval = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

/// Words that pin down a ChaCha8 generator: seed, stream, word position.
pub fn rng_words(r: &ChaCha8Rng) -> Vec<u64> {
    let seed = r.get_seed();
    let mut w: Vec<u64> = seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    w.push(r.get_stream());
    let pos = r.get_word_pos();
    w.push(pos as u64);
    w.push((pos >> 64) as u64);
    w
}

pub fn rng_from_words(w: &[u64]) -> Option<ChaCha8Rng> {
    if w.len() != 7 {
        return None;
    }
    let mut seed = [0u8; 32];
    for (i, x) in w[..4].iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&x.to_le_bytes());
    }
    let mut r = ChaCha8Rng::from_seed(seed);
    r.set_stream(w[4]);
    r.set_word_pos(u128::from(w[5]) | (u128::from(w[6]) << 64));
    Some(r)
}

/// Builds the token-id state from the running trajectory.
#[derive(Debug, Clone)]
pub struct StateBuilder<'a> {
    vocab: &'a Vocab,
    parses: Option<&'a DepParses>,
    width: usize,
    token_cap: usize,
    traj: Trajectory,
}

impl<'a> StateBuilder<'a> {
    pub fn new(vocab: &'a Vocab, parses: Option<&'a DepParses>, encoder: &EncoderConfig, max_sentences: usize) -> Self {
        Self {
            vocab,
            parses,
            width: encoder.max_kernel(),
            token_cap: encoder.token_cap,
            traj: Trajectory::new(max_sentences),
        }
    }

    fn master_tokens(&self, text: &str) -> Vec<String> {
        let toks = tokenize(text);
        match self.parses {
            Some(p) => p.reorder_tokens(&toks, self.width),
            None => toks,
        }
    }

    pub fn start(&mut self, master: &str) {
        self.traj = Trajectory::new(self.traj.max_sentences());
        let toks = self.master_tokens(master);
        self.traj.append_tokens(toks, Tag::Master);
    }

    pub fn push(&mut self, action: &str, master: &str) {
        self.traj.append(action, Tag::Action);
        let toks = self.master_tokens(master);
        self.traj.append_tokens(toks, Tag::Master);
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }

    /// Token ids, never empty.
    pub fn ids(&self) -> Arc<[u32]> {
        let (ids, _) = self.traj.to_ids(self.vocab, self.token_cap);
        if ids.is_empty() {
            return Arc::from(vec![Vocab::START as u32]);
        }
        ids.into_iter().map(|i| i as u32).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Raw game points per episode.
    pub scores: Vec<f64>,
    pub mean_score: f64,
    pub steps: u64,
    pub repeat_bad_rate: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOptions<'a> {
    pub episodes: usize,
    pub epsilon: f64,
    pub max_steps: u32,
    pub max_sentences: usize,
    pub seed: u64,
    pub parses: Option<&'a DepParses>,
}

/// Play `episodes` with frozen parameters and report unshaped scores.
pub fn evaluate(net: &QNetwork<f32>, spec: &GameSpec, vocab: &Vocab, opts: &EvalOptions<'_>) -> Result<EvalReport, TrainError> {
    if net.num_actions() != spec.num_actions() || net.vocab_size() != vocab.len() {
        return Err(TrainError::Incompatible(format!(
            "network has {} actions and {} tokens, game has {} and {}",
            net.num_actions(),
            net.vocab_size(),
            spec.num_actions(),
            vocab.len()
        )));
    }
    let mut rng = stream_rng(opts.seed, Stream::Eval);
    let mut shaper = RewardShaper::new(ShapingConfig::default());
    let mut scores = Vec::with_capacity(opts.episodes);
    let mut steps = 0;
    for _ in 0..opts.episodes {
        let (mut env, master) = spec.reset(rng.gen());
        let mut sb = StateBuilder::new(vocab, opts.parses, net.config(), opts.max_sentences);
        sb.start(master);
        shaper.new_episode();
        while !env.is_terminated() && env.moves() < opts.max_steps {
            let ids = sb.ids();
            let a = act(spec.num_actions(), opts.epsilon, &mut rng, || {
                let (i, p) = ids_of(&ids);
                net.encode(&i, &p).map(|e| e.q)
            })?;
            let res = env.step(a)?;
            shaper.shape(a, &res.master, res.reward);
            sb.push(&spec.actions()[a], &res.master);
            steps += 1;
        }
        scores.push(env.score());
    }
    let mean_score = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
    Ok(EvalReport {
        scores,
        mean_score,
        steps,
        repeat_bad_rate: shaper.take_repeat_rate().unwrap_or(0.0),
    })
}

/// One line of the metrics stream. Every key is always written.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub step: u64,
    pub episode: u64,
    pub epsilon: f64,
    pub loss: Option<f64>,
    pub eval_mean_score: Option<f64>,
    pub eval_scores: Option<Vec<f64>>,
    pub repeat_bad_rate: Option<f64>,
}

/// Receives metrics and checkpoints as training proceeds.
pub trait TrainObserver {
    fn metric(&mut self, _record: &MetricRecord) -> std::io::Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _step: u64, _ckpt: &Checkpoint) -> std::io::Result<()> {
        Ok(())
    }

    /// Checked after every evaluation; `true` ends training early.
    fn should_stop(&mut self, _report: &EvalReport) -> bool {
        false
    }

    /// Called once after the last step with the final replay contents.
    fn finished(&mut self, _memory: &ReplayMemory) -> std::io::Result<()> {
        Ok(())
    }
}

/// Collects everything in memory.
#[derive(Debug, Default)]
pub struct Recorder {
    pub metrics: Vec<MetricRecord>,
    pub checkpoints: Vec<(u64, Checkpoint)>,
    pub keep_checkpoints: bool,
}

impl TrainObserver for Recorder {
    fn metric(&mut self, record: &MetricRecord) -> std::io::Result<()> {
        self.metrics.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, step: u64, ckpt: &Checkpoint) -> std::io::Result<()> {
        if self.keep_checkpoints {
            self.checkpoints.push((step, ckpt.clone()));
        }
        Ok(())
    }
}

/// Everything a training run needs besides the observer.
#[derive(Debug, Clone)]
pub struct TrainSetup<'a> {
    pub spec: &'a GameSpec,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub shaping: ShapingConfig,
    pub parses: Option<&'a DepParses>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub final_eval: Option<EvalReport>,
    /// Repeated bad tries over all training steps.
    pub repeat_bad_rate: f64,
}

struct EpisodeStats {
    loss_sum: f64,
    loss_count: u64,
}

/// Train on `setup.spec`, reporting through `observer`.
///
/// The result is a pure function of the game, the configs and the seed.
pub fn run_training(setup: &TrainSetup<'_>, observer: &mut dyn TrainObserver) -> Result<(QNetwork<f32>, TrainSummary), TrainError> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.encoder.validate()?;
    setup.shaping.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let spec = setup.spec;
    let vocab = Vocab::from_game(spec);
    let n_actions = spec.num_actions();

    let init_seed = stream_rng(cfg.seed, Stream::Init).gen();
    let mut net: QNetwork<f32> = QNetwork::new(setup.encoder.clone(), vocab.len(), n_actions, init_seed)?;
    let mut target = cfg.target_network.then(|| net.clone());
    let mut adam = AdamState::new(net.params());
    let mut memory = ReplayMemory::new(cfg.replay_capacity, cfg.per.clone())?;
    let mut act_rng = stream_rng(cfg.seed, Stream::Action);
    let mut replay_rng = stream_rng(cfg.seed, Stream::Replay);
    let mut episode_rng = stream_rng(cfg.seed, Stream::Episodes);
    let mut shaper = RewardShaper::new(setup.shaping.clone());
    let mut all_steps = 0u64;
    let mut all_repeated = 0u64;

    let mut episode = 0u64;
    let mut updates = 0u64;
    let mut final_eval = None;
    let mut steps_done = cfg.total_steps;
    let (mut env, master) = spec.reset(episode_rng.gen());
    let mut sb = StateBuilder::new(&vocab, setup.parses, &setup.encoder, cfg.max_sentences);
    sb.start(master);
    let mut state = sb.ids();
    let mut stats = EpisodeStats { loss_sum: 0.0, loss_count: 0 };

    for step in 0..cfg.total_steps {
        let epsilon = cfg.epsilon_at(step);
        let a = act(n_actions, epsilon, &mut act_rng, || {
            let (i, p) = ids_of(&state);
            net.encode(&i, &p).map(|e| e.q)
        })?;
        let res = env.step(a)?;
        let shaped = shaper.shape(a, &res.master, res.reward);
        sb.push(&spec.actions()[a], &res.master);
        let next = sb.ids();
        memory.push(ReplaySample {
            state: state.clone(),
            action: a,
            reward: shaped.reward,
            next_state: next.clone(),
            terminal: res.terminal,
        })?;
        state = next;

        if step + 1 >= cfg.observation_steps && memory.len() >= cfg.batch_size.min(memory.capacity()) {
            let batch = memory.sample(cfg.sampler, cfg.batch_size, &mut replay_rng)?;
            let b = cfg.per.b_at(step.saturating_sub(cfg.observation_steps), cfg.epsilon_decay_steps);
            let samples: Vec<TdSample<'_>> = batch
                .indices
                .iter()
                .zip(&batch.probabilities)
                .map(|(&idx, &p)| {
                    let s = memory.get(idx).expect("freshly sampled index is live");
                    let scale = match cfg.sampler {
                        SamplerKind::Per => importance_scale(p, memory.len(), b),
                        _ => Ok(1.0),
                    };
                    scale.map(|scale| TdSample {
                        state: &s.state,
                        action: s.action,
                        reward: s.reward,
                        next_state: &s.next_state,
                        terminal: s.terminal,
                        scale,
                    })
                })
                .collect::<Result<_, _>>()?;
            let out = td_step(&mut net, target.as_ref(), &mut adam, &samples, cfg.gamma, cfg.learning_rate, cfg.exec)?;
            if cfg.sampler == SamplerKind::Per {
                memory.update_priorities(&batch.indices, &out.deltas);
            }
            stats.loss_sum += out.loss;
            stats.loss_count += 1;
            updates += 1;
            if let Some(t) = target.as_mut() {
                if updates.is_multiple_of(cfg.target_sync) {
                    *t = net.clone();
                }
            }
        }

        let global = step + 1;
        if res.terminal || env.moves() >= cfg.max_episode_steps {
            let steps = shaper.steps();
            let rate = shaper.take_repeat_rate();
            all_steps += steps;
            all_repeated += rate.map_or(0, |r| (r * steps as f64).round() as u64);
            observer.metric(&MetricRecord {
                step: global,
                episode,
                epsilon,
                loss: (stats.loss_count > 0).then(|| stats.loss_sum / stats.loss_count as f64),
                eval_mean_score: None,
                eval_scores: None,
                repeat_bad_rate: rate,
            })?;
            episode += 1;
            stats = EpisodeStats { loss_sum: 0.0, loss_count: 0 };
            let (e, master) = spec.reset(episode_rng.gen());
            env = e;
            shaper.new_episode();
            sb.start(master);
            state = sb.ids();
        }

        if global % cfg.eval_period == 0 {
            let ckpt = Checkpoint::capture(&net, &adam, global, rng_words(&act_rng))?;
            observer
                .checkpoint(global, &ckpt)
                .map_err(|source| TrainError::CheckpointWrite { step: global, source })?;
            let report = evaluate(
                &net,
                spec,
                &vocab,
                &EvalOptions {
                    episodes: cfg.eval_episodes,
                    epsilon: cfg.eval_epsilon,
                    max_steps: cfg.max_episode_steps,
                    max_sentences: cfg.max_sentences,
                    seed: cfg.seed ^ global.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    parses: setup.parses,
                },
            )?;
            log::info!("step {global}: eval mean {:.3} over {:?}", report.mean_score, report.scores);
            observer.metric(&MetricRecord {
                step: global,
                episode,
                epsilon: cfg.epsilon_at(global),
                loss: None,
                eval_mean_score: Some(report.mean_score),
                eval_scores: Some(report.scores.clone()),
                repeat_bad_rate: Some(report.repeat_bad_rate),
            })?;
            let stop = observer.should_stop(&report);
            final_eval = Some(report);
            if stop {
                steps_done = global;
                break;
            }
        }
    }
    all_steps += shaper.steps();
    all_repeated += shaper.repeated();
    observer.finished(&memory)?;
    Ok((
        net,
        TrainSummary {
            steps: steps_done,
            episodes: episode,
            updates,
            final_eval,
            repeat_bad_rate: if all_steps == 0 { 0.0 } else { all_repeated as f64 / all_steps as f64 },
        },
    ))
}

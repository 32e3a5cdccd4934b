//! Trajectory encoders and the Q head.
//!
//! The CNN encoder embeds tokens (word table, plus a learned position table
//! when enabled), runs one bank of filters per kernel size with `k - 1`
//! start-token rows on the left, pools each bank over time and concatenates
//! the pooled vectors in ascending kernel-size order. The LSTM encoder uses
//! the final hidden state instead. A single affine layer maps the state
//! vector to one score per catalog action.
//!
//! With max pooling every state entry is a single window of the input, which
//! [`AttentionTrace`] records for trace-back.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{lstm_final, NumericsError, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::trajectory::{Vocab, DEFAULT_TOKEN_CAP};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("empty token sequence")]
    EmptyInput,
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("{len} tokens exceed the cap of {cap}")]
    TooLong { len: usize, cap: usize },
    #[error("{ids} token ids but {positions} positions")]
    PositionCount { ids: usize, positions: usize },
    #[error("state vector has {got} entries, head expects {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("action {action} outside catalog of {actions}")]
    ActionOutOfRange { action: usize, actions: usize },
    #[error("attention trace-back needs max pooling")]
    NoTrace,
    #[error("parameter {name}: {message}")]
    Parameter { name: String, message: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Cnn,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub embed_dim: usize,
    pub kernel_sizes: Vec<usize>,
    pub filters_per_size: usize,
    pub pooling: Pooling,
    pub position_embeddings: bool,
    pub token_cap: usize,
    pub lstm_hidden: usize,
    /// ReLU between the state vector and the Q head.
    pub head_relu: bool,
    /// Half-width of the uniform initialisation.
    pub init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Cnn,
            embed_dim: 64,
            kernel_sizes: vec![3, 4, 5],
            filters_per_size: 32,
            pooling: Pooling::Max,
            position_embeddings: true,
            token_cap: DEFAULT_TOKEN_CAP,
            lstm_hidden: 64,
            head_relu: false,
            init_scale: 0.05,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        if self.token_cap == 0 {
            return bad("token_cap must be positive");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be finite and non-negative");
        }
        match self.kind {
            EncoderKind::Cnn => {
                if self.kernel_sizes.is_empty() {
                    return bad("at least one kernel size is required");
                }
                if self.kernel_sizes.contains(&0) {
                    return bad("kernel sizes must be positive");
                }
                let mut sorted = self.kernel_sizes.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != self.kernel_sizes.len() {
                    return bad("kernel sizes must be distinct");
                }
                if self.filters_per_size == 0 {
                    return bad("filters_per_size must be positive");
                }
            }
            EncoderKind::Lstm => {
                if self.lstm_hidden == 0 {
                    return bad("lstm_hidden must be positive");
                }
            }
        }
        Ok(())
    }

    fn sorted_kernels(&self) -> Vec<usize> {
        let mut k = self.kernel_sizes.clone();
        k.sort_unstable();
        k
    }

    /// Width of the encoded state vector.
    pub fn state_width(&self) -> usize {
        match self.kind {
            EncoderKind::Cnn => self.kernel_sizes.len() * self.filters_per_size,
            EncoderKind::Lstm => self.lstm_hidden,
        }
    }

    /// Largest kernel size; the block separator width for dependency
    /// reordering is one less than this.
    pub fn max_kernel(&self) -> usize {
        self.kernel_sizes.iter().copied().max().unwrap_or(1)
    }

    /// Whether max-pool trace-back is available.
    pub fn has_trace(&self) -> bool {
        self.kind == EncoderKind::Cnn && self.pooling == Pooling::Max
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvIds {
    width: usize,
    filters: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct LstmIds {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Ids {
    word: ParamId,
    position: Option<ParamId>,
    convs: Vec<ConvIds>,
    lstm: Option<LstmIds>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub state: Var,
    pub q: Var,
    /// One pooled vector per kernel size (CNN only).
    pub pools: Vec<Var>,
}

/// Values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding<R> {
    pub state: Vec<R>,
    pub q: Vec<R>,
    pub trace: Option<AttentionTrace>,
}

/// Where each max-pooled state entry came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterTrace {
    /// Index into the state vector.
    pub filter: usize,
    pub kernel: usize,
    /// Output column of the maximum, which is also the last token of its window.
    pub argmax: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub filters: Vec<FilterTrace>,
    /// Number of input tokens.
    pub len: usize,
}

/// Inclusive token range with its share of the decision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub weight: f64,
}

impl FilterTrace {
    /// Token range of the window; start-token padding is clamped away.
    pub fn span(&self) -> (usize, usize) {
        ((self.argmax + 1).saturating_sub(self.kernel), self.argmax)
    }
}

/// The `k` token spans with the largest contribution `pooled value x head
/// weight` to the score of one action. Filters sharing a span add up.
/// Weights are contributions divided by the sum of their magnitudes over
/// the returned spans, so they come out in descending order.
pub fn attention_topk(trace: &AttentionTrace, head_row: &[f64], k: usize) -> Result<Vec<Span>, EncoderError> {
    if head_row.len() != trace.filters.len() {
        return Err(EncoderError::WidthMismatch {
            expected: trace.filters.len(),
            got: head_row.len(),
        });
    }
    let mut by_span: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for f in &trace.filters {
        *by_span.entry(f.span()).or_insert(0.0) += f.value * head_row[f.filter];
    }
    let mut ranked: Vec<((usize, usize), f64)> = by_span.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    let total: f64 = ranked.iter().map(|(_, c)| c.abs()).sum();
    Ok(ranked
        .into_iter()
        .map(|((start, end), c)| Span {
            start,
            end,
            weight: if total > 0.0 { c / total } else { 0.0 },
        })
        .collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<R: PartialOrd + Copy>(xs: &[R]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Trajectory encoder plus Q head.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork<R: Real> {
    config: EncoderConfig,
    vocab_size: usize,
    num_actions: usize,
    params: ParamStore<R>,
    ids: Ids,
}

impl<R: Real> QNetwork<R> {
    /// Fresh network with every parameter drawn uniformly from
    /// `[-init_scale, init_scale)`.
    pub fn new(config: EncoderConfig, vocab_size: usize, num_actions: usize, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        if vocab_size <= Vocab::UNKNOWN {
            return Err(EncoderError::Config(format!("vocabulary of {vocab_size} lacks reserved tokens")));
        }
        if num_actions == 0 {
            return Err(EncoderError::Config("action catalog is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.init_scale;
        let d = config.embed_dim;
        let mut params = ParamStore::new();
        let word = params.add("embed.word", Tensor::uniform(&[vocab_size, d], s, &mut rng));
        let position = config
            .position_embeddings
            .then(|| params.add("embed.position", Tensor::uniform(&[config.token_cap, d], s, &mut rng)));
        let mut convs = Vec::new();
        let mut lstm = None;
        match config.kind {
            EncoderKind::Cnn => {
                let nf = config.filters_per_size;
                for width in config.sorted_kernels() {
                    let filters = params.add(format!("conv.k{width}.filters"), Tensor::uniform(&[nf, width, d], s, &mut rng));
                    let bias = params.add(format!("conv.k{width}.bias"), Tensor::uniform(&[nf], s, &mut rng));
                    convs.push(ConvIds { width, filters, bias });
                }
            }
            EncoderKind::Lstm => {
                let h = config.lstm_hidden;
                let w = params.add("lstm.w", Tensor::uniform(&[4 * h, d], s, &mut rng));
                let u = params.add("lstm.u", Tensor::uniform(&[4 * h, h], s, &mut rng));
                let b = params.add("lstm.b", Tensor::uniform(&[4 * h], s, &mut rng));
                lstm = Some(LstmIds { w, u, b });
            }
        }
        let width = config.state_width();
        let head_w = params.add("head.weight", Tensor::uniform(&[num_actions, width], s, &mut rng));
        let head_b = params.add("head.bias", Tensor::uniform(&[num_actions], s, &mut rng));
        Ok(Self {
            config,
            vocab_size,
            num_actions,
            params,
            ids: Ids {
                word,
                position,
                convs,
                lstm,
                head_w,
                head_b,
            },
        })
    }

    /// Network with the given tensors, which must match the layout
    /// [`QNetwork::new`] produces for the same arguments, name for name.
    pub fn from_params(
        config: EncoderConfig,
        vocab_size: usize,
        num_actions: usize,
        mut tensors: BTreeMap<String, Tensor<R>>,
    ) -> Result<Self, EncoderError> {
        let mut net = Self::new(config, vocab_size, num_actions, 0)?;
        let ids: Vec<ParamId> = net.params.ids().collect();
        for id in ids {
            let name = net.params.name(id).to_string();
            let t = tensors.remove(&name).ok_or_else(|| EncoderError::Parameter {
                name: name.clone(),
                message: "missing".into(),
            })?;
            if t.shape() != net.params.get(id).shape() {
                return Err(EncoderError::Parameter {
                    message: format!("shape {:?}, expected {:?}", t.shape(), net.params.get(id).shape()),
                    name,
                });
            }
            *net.params.get_mut(id) = t;
        }
        if let Some(name) = tensors.into_keys().next() {
            return Err(EncoderError::Parameter {
                name,
                message: "not part of this network".into(),
            });
        }
        Ok(net)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    pub fn state_width(&self) -> usize {
        self.config.state_width()
    }

    /// Same network in another precision.
    pub fn cast<S: Real>(&self) -> QNetwork<S> {
        QNetwork {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            num_actions: self.num_actions,
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Head weights for one action, in state-vector order.
    pub fn head_row(&self, action: usize) -> Result<Vec<f64>, EncoderError> {
        if action >= self.num_actions {
            return Err(EncoderError::ActionOutOfRange {
                action,
                actions: self.num_actions,
            });
        }
        Ok(self.params.get(self.ids.head_w).row(action).iter().map(|x| x.to_f64_lossy()).collect())
    }

    fn check_input(&self, ids: &[usize], positions: &[usize]) -> Result<(), EncoderError> {
        if ids.is_empty() {
            return Err(EncoderError::EmptyInput);
        }
        if ids.len() > self.config.token_cap {
            return Err(EncoderError::TooLong {
                len: ids.len(),
                cap: self.config.token_cap,
            });
        }
        if ids.len() != positions.len() {
            return Err(EncoderError::PositionCount {
                ids: ids.len(),
                positions: positions.len(),
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(EncoderError::TokenOutOfRange {
                id,
                vocab: self.vocab_size,
            });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.token_cap) {
            return Err(EncoderError::Config(format!("position {p} beyond token cap")));
        }
        Ok(())
    }

    /// Input rows: word embeddings plus position embeddings when enabled.
    pub fn embed_on(&self, tape: &mut Tape<'_, R>, ids: &[usize], positions: &[usize]) -> Result<Var, EncoderError> {
        self.check_input(ids, positions)?;
        let word = tape.param(self.ids.word);
        let mut x = tape.gather(word, ids)?;
        if let Some(pid) = self.ids.position {
            let table = tape.param(pid);
            let p = tape.gather(table, positions)?;
            x = tape.add(x, p)?;
        }
        Ok(x)
    }

    /// Full forward pass on `tape`, which may hold any parameter store with
    /// this network's layout.
    pub fn forward(&self, tape: &mut Tape<'_, R>, ids: &[usize], positions: &[usize]) -> Result<Forward, EncoderError> {
        let x = self.embed_on(tape, ids, positions)?;
        self.forward_embedded(tape, x)
    }

    /// Forward pass from precomputed `L x D` input rows.
    pub fn forward_embedded(&self, tape: &mut Tape<'_, R>, x: Var) -> Result<Forward, EncoderError> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.embed_dim {
            return Err(NumericsError::ShapeMismatch(format!(
                "input rows {shape:?}, expected L x {}",
                self.config.embed_dim
            ))
            .into());
        }
        if shape[0] == 0 {
            return Err(EncoderError::EmptyInput);
        }
        let mut pools = Vec::new();
        let state = match &self.ids.lstm {
            Some(l) => {
                let (w, u, b) = (tape.param(l.w), tape.param(l.u), tape.param(l.b));
                lstm_final(tape, x, w, u, b)?
            }
            None => {
                let word = tape.param(self.ids.word);
                let pad = tape.row(word, Vocab::START)?;
                for c in &self.ids.convs {
                    let (f, b) = (tape.param(c.filters), tape.param(c.bias));
                    let fm = tape.conv1d(x, pad, f, b)?;
                    pools.push(match self.config.pooling {
                        Pooling::Max => tape.max_pool(fm)?,
                        Pooling::Mean => tape.mean_pool(fm)?,
                    });
                }
                tape.concat(&pools)
            }
        };
        let q = self.head_on(tape, state)?;
        Ok(Forward { state, q, pools })
    }

    fn head_on(&self, tape: &mut Tape<'_, R>, state: Var) -> Result<Var, EncoderError> {
        let width = tape.value(state).len();
        if width != self.state_width() {
            return Err(EncoderError::WidthMismatch {
                expected: self.state_width(),
                got: width,
            });
        }
        let h = if self.config.head_relu { tape.relu(state) } else { state };
        let (w, b) = (tape.param(self.ids.head_w), tape.param(self.ids.head_b));
        Ok(tape.affine(w, b, h)?)
    }

    fn read(&self, tape: &Tape<'_, R>, fwd: &Forward) -> Encoding<R> {
        let trace = self.config.has_trace().then(|| {
            let mut filters = Vec::new();
            for (c, &pool) in self.ids.convs.iter().zip(&fwd.pools) {
                let arg = tape.argmax(pool).expect("max-pool node");
                for (j, &a) in arg.iter().enumerate() {
                    filters.push(FilterTrace {
                        filter: filters.len(),
                        kernel: c.width,
                        argmax: a,
                        value: tape.value(pool).data()[j].to_f64_lossy(),
                    });
                }
            }
            AttentionTrace {
                filters,
                len: 0,
            }
        });
        Encoding {
            state: tape.value(fwd.state).data().to_vec(),
            q: tape.value(fwd.q).data().to_vec(),
            trace,
        }
    }

    /// State vector, Q-values and (for max pooling) the attention trace.
    pub fn encode(&self, ids: &[usize], positions: &[usize]) -> Result<Encoding<R>, EncoderError> {
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward(&mut tape, ids, positions)?;
        let mut enc = self.read(&tape, &fwd);
        if let Some(t) = enc.trace.as_mut() {
            t.len = ids.len();
        }
        Ok(enc)
    }

    /// Input rows as a plain tensor.
    pub fn embed(&self, ids: &[usize], positions: &[usize]) -> Result<Tensor<R>, EncoderError> {
        let mut tape = Tape::new(&self.params);
        let x = self.embed_on(&mut tape, ids, positions)?;
        Ok(tape.value(x).clone())
    }

    /// [`QNetwork::encode`] from explicit input rows.
    pub fn encode_embedded(&self, rows: &Tensor<R>) -> Result<Encoding<R>, EncoderError> {
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(rows.clone());
        let fwd = self.forward_embedded(&mut tape, x)?;
        let mut enc = self.read(&tape, &fwd);
        if let Some(t) = enc.trace.as_mut() {
            t.len = rows.shape()[0];
        }
        Ok(enc)
    }

    /// Pre-pooling `K x L` feature maps, one per kernel size (CNN only).
    pub fn feature_maps_embedded(&self, rows: &Tensor<R>) -> Result<Vec<Tensor<R>>, EncoderError> {
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(rows.clone());
        let word = tape.param(self.ids.word);
        let pad = tape.row(word, Vocab::START)?;
        let mut out = Vec::new();
        for c in &self.ids.convs {
            let (f, b) = (tape.param(c.filters), tape.param(c.bias));
            let fm = tape.conv1d(x, pad, f, b)?;
            out.push(tape.value(fm).clone());
        }
        Ok(out)
    }

    pub fn feature_maps(&self, ids: &[usize], positions: &[usize]) -> Result<Vec<Tensor<R>>, EncoderError> {
        self.feature_maps_embedded(&self.embed(ids, positions)?)
    }

    /// Affine head applied to a state vector.
    pub fn q_values(&self, state: &[R]) -> Result<Vec<R>, EncoderError> {
        let mut tape = Tape::new(&self.params);
        let s = tape.constant(Tensor::vector(state.to_vec()));
        let q = self.head_on(&mut tape, s)?;
        Ok(tape.value(q).data().to_vec())
    }

    /// Top-`k` spans behind the score of `action`.
    pub fn attention(&self, ids: &[usize], positions: &[usize], action: usize, k: usize) -> Result<Vec<Span>, EncoderError> {
        let enc = self.encode(ids, positions)?;
        let trace = enc.trace.ok_or(EncoderError::NoTrace)?;
        attention_topk(&trace, &self.head_row(action)?, k)
    }
}

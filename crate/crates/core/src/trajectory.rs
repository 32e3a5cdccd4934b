//! Trajectories: the chronological master/action history used as DQN state.

use std::collections::{HashMap, VecDeque};
use std::io::{self, BufRead, Write};

use crate::game::GameSpec;

/// Start-of-sentence token used to left-pad convolutions.
pub const START_TOKEN: &str = "S";
/// Block separator inserted by dependency reordering.
pub const PAD_TOKEN: &str = "O";
pub const UNKNOWN_TOKEN: &str = "UNK";

pub const DEFAULT_MAX_SENTENCES: usize = 21;
pub const DEFAULT_TOKEN_CAP: usize = 1024;

/// Lowercase, split on whitespace, and split punctuation off into separate
/// tokens. Apostrophes and hyphens inside a word stay part of it ("can't",
/// "mother-of-pearl").
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().flat_map(char::to_lowercase).collect();
        let mut cur = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let inner = i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric();
            let joiner = matches!(c, '\'' | '\u{2019}' | '-') && inner;
            if c.is_alphanumeric() || joiner {
                cur.push(if c == '\u{2019}' { '\'' } else { c });
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Closed token vocabulary. Reserved tokens are uppercase, so they can never
/// collide with the output of [`tokenize`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const START: usize = 0;
    pub const PAD: usize = 1;
    pub const UNKNOWN: usize = 2;

    fn reserved() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [START_TOKEN, PAD_TOKEN, UNKNOWN_TOKEN] {
            v.insert(t);
        }
        v
    }

    fn insert(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    /// Reserved tokens followed by every token of `texts`, in first-seen order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::reserved();
        for text in texts {
            for tok in tokenize(text) {
                v.insert(&tok);
            }
        }
        v
    }

    /// Every master and action the game can produce.
    pub fn from_game(spec: &GameSpec) -> Self {
        let actions = spec.actions().iter().map(String::as_str);
        Self::from_texts(spec.all_masters().into_iter().chain(actions))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNKNOWN)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line; line number is the id.
    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> io::Result<Self> {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for line in r.lines() {
            let line = line?;
            if v.index.contains_key(&line) {
                return Err(io::Error::new(io::ErrorKind::InvalidData, format!("duplicate token {line:?}")));
            }
            v.insert(&line);
        }
        for (want, id) in [(START_TOKEN, Self::START), (PAD_TOKEN, Self::PAD), (UNKNOWN_TOKEN, Self::UNKNOWN)] {
            if v.token(id) != Some(want) {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("reserved token {want} must be on line {}", id + 1),
                ));
            }
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Master,
    Action,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tag: Tag,
    pub tokens: Vec<String>,
}

/// Bounded chronological list of sentences; the oldest are dropped first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    sentences: VecDeque<Sentence>,
    max_sentences: usize,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_SENTENCES)
    }
}

impl Trajectory {
    pub fn new(max_sentences: usize) -> Self {
        assert!(max_sentences >= 1, "trajectory bound must be positive");
        Self {
            sentences: VecDeque::new(),
            max_sentences,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn max_sentences(&self) -> usize {
        self.max_sentences
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.sentences.iter()
    }

    pub fn append(&mut self, text: &str, tag: Tag) {
        self.append_tokens(tokenize(text), tag);
    }

    pub fn append_tokens(&mut self, tokens: Vec<String>, tag: Tag) {
        self.sentences.push_back(Sentence { tag, tokens });
        while self.sentences.len() > self.max_sentences {
            self.sentences.pop_front();
        }
    }

    pub fn with_sentence(mut self, text: &str, tag: Tag) -> Self {
        self.append(text, tag);
        self
    }

    /// Rewrite every sentence through `f`.
    pub fn map_sentences(&self, mut f: impl FnMut(&Sentence) -> Sentence) -> Self {
        Self {
            sentences: self.sentences.iter().map(&mut f).collect(),
            max_sentences: self.max_sentences,
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().flat_map(|s| s.tokens.iter().map(String::as_str))
    }

    /// Token ids of the concatenated sentences, keeping at most the last
    /// `max_tokens`, and positions `0..L` of what is kept.
    pub fn to_ids(&self, vocab: &Vocab, max_tokens: usize) -> (Vec<usize>, Vec<usize>) {
        assert!(max_tokens >= 1, "token cap must be positive");
        let total: usize = self.sentences.iter().map(|s| s.tokens.len()).sum();
        let skip = total.saturating_sub(max_tokens);
        let ids: Vec<usize> = self.tokens().skip(skip).map(|t| vocab.id(t)).collect();
        let positions = (0..ids.len()).collect();
        (ids, positions)
    }
}

//! Reward shaping: raw points plus penalties, clipped to the Huber range.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapingError {
    #[error("clip bounds [{0}, {1}] are not increasing")]
    ClipBounds(f64, f64),
    #[error("{0} must not be positive")]
    PositivePenalty(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingConfig {
    pub step_penalty: f64,
    /// Matched case-insensitively as substrings of the master.
    pub negative_patterns: Vec<String>,
    pub negative_penalty: f64,
    pub repeat_penalty: f64,
    /// When false the repeat penalty is not added, but repeated bad tries
    /// are still counted.
    pub repeat_enabled: bool,
    pub clip: (f64, f64),
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            step_penalty: -0.1,
            negative_patterns: vec!["you don't".into(), "you can't".into()],
            negative_penalty: -1.0,
            repeat_penalty: -0.1,
            repeat_enabled: true,
            clip: (-1.0, 1.0),
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<(), ShapingError> {
        let (lo, hi) = self.clip;
        if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
            return Err(ShapingError::ClipBounds(lo, hi));
        }
        for (name, v) in [
            ("step_penalty", self.step_penalty),
            ("negative_penalty", self.negative_penalty),
            ("repeat_penalty", self.repeat_penalty),
        ] {
            if v > 0.0 {
                return Err(ShapingError::PositivePenalty(name));
            }
        }
        Ok(())
    }
}

/// Case-insensitive substring match against any pattern.
pub fn detect_negative_master(text: &str, patterns: &[String]) -> bool {
    let lower = text.to_lowercase().replace('\u{2019}', "'");
    patterns.iter().any(|p| lower.contains(&p.to_lowercase()))
}

/// `raw + step + negative + repeat`, clamped to the clip range.
pub fn shape_and_clip(raw: f64, negative: bool, repeat_penalty: f64, cfg: &ShapingConfig) -> f64 {
    let mut r = raw + cfg.step_penalty + repeat_penalty;
    if negative {
        r += cfg.negative_penalty;
    }
    r.clamp(cfg.clip.0, cfg.clip.1)
}

/// Consecutive identical `(action, master)` steps with a negative reward.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RepeatTracker {
    last: Option<(usize, String)>,
    count: u32,
}

impl RepeatTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    /// Penalty for this step. `reward` is the shaped reward before any
    /// repeat penalty. The count grows while the same bad step repeats and
    /// resets on anything else.
    pub fn update(&mut self, action: usize, master: &str, reward: f64, unit: f64) -> f64 {
        let same = self
            .last
            .as_ref()
            .is_some_and(|(a, m)| *a == action && m == master);
        if same && reward < 0.0 {
            self.count += 1;
        } else {
            self.count = 0;
        }
        self.last = Some((action, master.to_string()));
        f64::from(self.count) * unit
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Outcome of shaping one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shaped {
    pub reward: f64,
    pub negative: bool,
    /// A repeated bad try, whether or not its penalty was applied.
    pub repeated_bad: bool,
}

/// Per-episode shaping state.
#[derive(Debug, Clone)]
pub struct RewardShaper {
    cfg: ShapingConfig,
    tracker: RepeatTracker,
    steps: u64,
    repeated: u64,
}

impl RewardShaper {
    pub fn new(cfg: ShapingConfig) -> Self {
        Self {
            cfg,
            tracker: RepeatTracker::new(),
            steps: 0,
            repeated: 0,
        }
    }

    pub fn config(&self) -> &ShapingConfig {
        &self.cfg
    }

    pub fn shape(&mut self, action: usize, master: &str, raw: f64) -> Shaped {
        let negative = detect_negative_master(master, &self.cfg.negative_patterns);
        let before = raw + self.cfg.step_penalty + if negative { self.cfg.negative_penalty } else { 0.0 };
        let penalty = self.tracker.update(action, master, before, self.cfg.repeat_penalty);
        let repeated_bad = self.tracker.count() > 0;
        let applied = if self.cfg.repeat_enabled { penalty } else { 0.0 };
        self.steps += 1;
        if repeated_bad {
            self.repeated += 1;
        }
        Shaped {
            reward: shape_and_clip(raw, negative, applied, &self.cfg),
            negative,
            repeated_bad,
        }
    }

    /// Start a new episode; counters keep running.
    pub fn new_episode(&mut self) {
        self.tracker.reset();
    }

    /// Fraction of shaped steps that were repeated bad tries, and reset the
    /// counters. `None` when no step was shaped.
    pub fn take_repeat_rate(&mut self) -> Option<f64> {
        let rate = (self.steps > 0).then(|| self.repeated as f64 / self.steps as f64);
        self.steps = 0;
        self.repeated = 0;
        rate
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn repeated(&self) -> u64 {
        self.repeated
    }
}

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::replay::{PerConfig, SamplerKind};
use crate::trajectory::DEFAULT_MAX_SENTENCES;

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Environment steps collected before the first update.
    pub observation_steps: u64,
    pub replay_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: u64,
    pub max_episode_steps: u32,
    /// Evaluate and checkpoint every this many steps.
    pub eval_period: u64,
    pub eval_episodes: usize,
    pub eval_epsilon: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub sampler: SamplerKind,
    pub per: PerConfig,
    pub target_network: bool,
    pub target_sync: u64,
    pub seed: u64,
    /// Training stops after this many environment steps.
    pub total_steps: u64,
    pub max_sentences: usize,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_game()
    }
}

impl TrainConfig {
    /// Whole-game schedule.
    pub fn full_game() -> Self {
        Self {
            observation_steps: 50_000,
            replay_capacity: 500_000,
            epsilon_start: 1.0,
            epsilon_end: 0.0001,
            epsilon_decay_steps: 2_000_000,
            max_episode_steps: 600,
            eval_period: 5_000,
            eval_episodes: 10,
            eval_epsilon: 0.05,
            gamma: 0.95,
            batch_size: 32,
            learning_rate: 1e-5,
            sampler: SamplerKind::FixedWeight,
            per: PerConfig::default(),
            target_network: false,
            target_sync: 5_000,
            seed: 0,
            total_steps: 2_000_000,
            max_sentences: DEFAULT_MAX_SENTENCES,
            exec: Exec::default(),
        }
    }

    pub fn egg() -> Self {
        Self {
            observation_steps: 5_000,
            replay_capacity: 50_000,
            epsilon_decay_steps: 500_000,
            max_episode_steps: 100,
            total_steps: 500_000,
            ..Self::full_game()
        }
    }

    /// The egg schedule with observation, replay and decay doubled.
    pub fn troll() -> Self {
        let egg = Self::egg();
        Self {
            observation_steps: 2 * egg.observation_steps,
            replay_capacity: 2 * egg.replay_capacity,
            epsilon_decay_steps: 2 * egg.epsilon_decay_steps,
            max_episode_steps: 150,
            total_steps: 1_000_000,
            ..egg
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "egg" => Some(Self::egg()),
            "troll" => Some(Self::troll()),
            "full" | "full_game" => Some(Self::full_game()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.observation_steps > self.epsilon_decay_steps {
            return bad("observation_steps must not exceed epsilon_decay_steps".into());
        }
        if self.batch_size == 0 || self.batch_size > self.replay_capacity {
            return bad(format!(
                "batch_size {} must be in 1..=replay_capacity ({})",
                self.batch_size, self.replay_capacity
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        for (name, e) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("eval_epsilon", self.eval_epsilon),
        ] {
            if !(0.0..=1.0).contains(&e) {
                return bad(format!("{name} {e} outside [0, 1]"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.max_episode_steps == 0 {
            return bad("max_episode_steps must be positive".into());
        }
        if self.eval_period == 0 {
            return bad("eval_period must be positive".into());
        }
        if self.max_sentences == 0 {
            return bad("max_sentences must be positive".into());
        }
        if self.target_network && self.target_sync == 0 {
            return bad("target_sync must be positive".into());
        }
        self.per.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`, then constant.
    pub fn epsilon_at(&self, step: u64) -> f64 {
        epsilon_at(step, self.epsilon_start, self.epsilon_end, self.epsilon_decay_steps)
    }
}

pub fn epsilon_at(step: u64, start: f64, end: f64, decay_steps: u64) -> f64 {
    if decay_steps == 0 || step >= decay_steps {
        return end;
    }
    start + (end - start) * (step as f64 / decay_steps as f64)
}

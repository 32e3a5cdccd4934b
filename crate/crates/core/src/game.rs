//! Finite-state text games.
//!
//! A [`GameSpec`] is a stochastic transducer: in a state, an action id picks
//! a distribution over branches, each carrying the master text to print, the
//! points it scores and the next state. Pairs with no declared transition
//! fall back to a self-loop that prints the default failure master.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_FAILURE_MASTER: &str = "You can't do that.";

const PROBABILITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("game spec is not valid JSON for the schema: {0}")]
    Schema(String),
    #[error("cannot read game spec {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("branch probabilities for ({state}, {action}) sum to {sum}, expected 1")]
    ProbabilitySum { state: String, action: String, sum: f64 },
    #[error("branch probability {p} for ({state}, {action}) is outside [0, 1]")]
    Probability { state: String, action: String, p: f64 },
    #[error("transition ({state}, {action}) points to undeclared state {next:?}")]
    DanglingState { state: String, action: String, next: String },
    #[error("transition references undeclared state {0:?}")]
    UnknownState(String),
    #[error("transition in state {state:?} references unknown action {action:?}")]
    UnknownAction { state: String, action: String },
    #[error("transition ({state}, {action}) is declared twice")]
    DuplicateTransition { state: String, action: String },
    #[error("transition ({state}, {action}) has no branches")]
    NoBranches { state: String, action: String },
    #[error("initial state {0:?} is not declared")]
    MissingInitialState(String),
    #[error("initial state {0:?} is terminal")]
    TerminalInitialState(String),
    #[error("action catalog is empty")]
    NoActions,
    #[error("action {0:?} appears twice in the catalog")]
    DuplicateAction(String),
    #[error("episode already terminated")]
    Terminated,
    #[error("action id {id} out of range for {count} actions")]
    ActionOutOfRange { id: usize, count: usize },
}

/// Identifier of a state inside one [`GameSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub probability: f64,
    pub next: StateId,
    pub master: String,
    pub reward: f64,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    state_names: Vec<String>,
    terminal: Vec<bool>,
    actions: Vec<String>,
    transitions: HashMap<(StateId, usize), Vec<Branch>>,
    initial_state: StateId,
    initial_master: String,
    default_failure_master: String,
}

// On-disk schema.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDoc {
    actions: Vec<String>,
    initial_state: String,
    initial_master: String,
    #[serde(default = "default_failure")]
    default_failure_master: String,
    states: BTreeMap<String, StateDoc>,
    transitions: Vec<TransitionDoc>,
}

fn default_failure() -> String {
    DEFAULT_FAILURE_MASTER.to_string()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateDoc {
    #[serde(default)]
    terminal: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransitionDoc {
    state: String,
    action: String,
    branches: Vec<BranchDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchDoc {
    p: f64,
    next: String,
    master: String,
    #[serde(default)]
    reward: f64,
}

impl GameSpec {
    pub fn from_json(text: &str) -> Result<Self, GameError> {
        let doc: SpecDoc = serde_json::from_str(text).map_err(|e| GameError::Schema(e.to_string()))?;
        Self::from_doc(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GameError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GameError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    fn from_doc(doc: SpecDoc) -> Result<Self, GameError> {
        if doc.actions.is_empty() {
            return Err(GameError::NoActions);
        }
        let mut action_ids = HashMap::new();
        for (i, a) in doc.actions.iter().enumerate() {
            if action_ids.insert(a.as_str(), i).is_some() {
                return Err(GameError::DuplicateAction(a.clone()));
            }
        }
        let state_names: Vec<String> = doc.states.keys().cloned().collect();
        let terminal: Vec<bool> = doc.states.values().map(|s| s.terminal).collect();
        let state_ids: HashMap<&str, StateId> = state_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), StateId(i)))
            .collect();

        let initial_state = *state_ids
            .get(doc.initial_state.as_str())
            .ok_or_else(|| GameError::MissingInitialState(doc.initial_state.clone()))?;
        if terminal[initial_state.0] {
            return Err(GameError::TerminalInitialState(doc.initial_state));
        }

        let mut transitions = HashMap::new();
        for t in doc.transitions {
            let state = *state_ids
                .get(t.state.as_str())
                .ok_or_else(|| GameError::UnknownState(t.state.clone()))?;
            let action = *action_ids
                .get(t.action.as_str())
                .ok_or_else(|| GameError::UnknownAction {
                    state: t.state.clone(),
                    action: t.action.clone(),
                })?;
            if t.branches.is_empty() {
                return Err(GameError::NoBranches {
                    state: t.state,
                    action: t.action,
                });
            }
            let mut sum = 0.0;
            let mut branches = Vec::with_capacity(t.branches.len());
            for b in t.branches {
                if !(0.0..=1.0).contains(&b.p) {
                    return Err(GameError::Probability {
                        state: t.state,
                        action: t.action,
                        p: b.p,
                    });
                }
                let next = *state_ids.get(b.next.as_str()).ok_or_else(|| GameError::DanglingState {
                    state: t.state.clone(),
                    action: t.action.clone(),
                    next: b.next.clone(),
                })?;
                sum += b.p;
                branches.push(Branch {
                    probability: b.p,
                    next,
                    master: b.master,
                    reward: b.reward,
                    terminal: terminal[next.0],
                });
            }
            if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
                return Err(GameError::ProbabilitySum {
                    state: t.state,
                    action: t.action,
                    sum,
                });
            }
            if transitions.insert((state, action), branches).is_some() {
                return Err(GameError::DuplicateTransition {
                    state: t.state,
                    action: t.action,
                });
            }
        }

        Ok(Self {
            state_names,
            terminal,
            actions: doc.actions,
            transitions,
            initial_state,
            initial_master: doc.initial_master,
            default_failure_master: doc.default_failure_master,
        })
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn action_id(&self, text: &str) -> Option<usize> {
        self.actions.iter().position(|a| a == text)
    }

    pub fn num_states(&self) -> usize {
        self.state_names.len()
    }

    pub fn state_name(&self, id: StateId) -> &str {
        &self.state_names[id.0]
    }

    pub fn state_id(&self, name: &str) -> Option<StateId> {
        self.state_names.iter().position(|n| n == name).map(StateId)
    }

    pub fn is_terminal(&self, id: StateId) -> bool {
        self.terminal[id.0]
    }

    pub fn initial_state(&self) -> StateId {
        self.initial_state
    }

    pub fn initial_master(&self) -> &str {
        &self.initial_master
    }

    pub fn default_failure_master(&self) -> &str {
        &self.default_failure_master
    }

    /// Declared branches for `(state, action)`, or `None` for the default
    /// self-loop.
    pub fn branches(&self, state: StateId, action: usize) -> Option<&[Branch]> {
        self.transitions.get(&(state, action)).map(Vec::as_slice)
    }

    /// Every master text the game can print, in a stable order.
    pub fn all_masters(&self) -> Vec<&str> {
        let mut keys: Vec<_> = self.transitions.keys().collect();
        keys.sort();
        let mut out = vec![self.initial_master.as_str(), self.default_failure_master.as_str()];
        for k in keys {
            out.extend(self.transitions[k].iter().map(|b| b.master.as_str()));
        }
        out
    }

    pub fn reset(&self, seed: u64) -> (EpisodeHandle<'_>, &str) {
        (
            EpisodeHandle {
                spec: self,
                state: self.initial_state,
                score: 0.0,
                moves: 0,
                terminated: false,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            &self.initial_master,
        )
    }
}

/// Outcome of one [`EpisodeHandle::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub master: String,
    /// Change of the cumulative score caused by this step.
    pub reward: f64,
    pub terminal: bool,
    pub moves: u32,
}

/// One running episode. Owns its random stream.
#[derive(Debug, Clone)]
pub struct EpisodeHandle<'g> {
    spec: &'g GameSpec,
    state: StateId,
    score: f64,
    moves: u32,
    terminated: bool,
    rng: ChaCha8Rng,
}

impl<'g> EpisodeHandle<'g> {
    pub fn spec(&self) -> &'g GameSpec {
        self.spec
    }

    pub fn state(&self) -> StateId {
        self.state
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn moves(&self) -> u32 {
        self.moves
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult, GameError> {
        if self.terminated {
            return Err(GameError::Terminated);
        }
        let count = self.spec.num_actions();
        if action >= count {
            return Err(GameError::ActionOutOfRange { id: action, count });
        }
        let (master, reward, next) = match self.spec.branches(self.state, action) {
            None => (self.spec.default_failure_master.clone(), 0.0, self.state),
            Some(branches) => {
                let b = draw_branch(branches, self.rng.gen::<f64>());
                (b.master.clone(), b.reward, b.next)
            }
        };
        self.state = next;
        self.score += reward;
        self.moves += 1;
        self.terminated = self.spec.is_terminal(next);
        Ok(StepResult {
            master,
            reward,
            terminal: self.terminated,
            moves: self.moves,
        })
    }
}

fn draw_branch(branches: &[Branch], u: f64) -> &Branch {
    let mut acc = 0.0;
    for b in branches {
        acc += b.probability;
        if u < acc {
            return b;
        }
    }
    // u landed in the rounding slack above the cumulative sum
    branches.iter().rev().find(|b| b.probability > 0.0).unwrap_or(&branches[branches.len() - 1])
}

impl fmt::Display for StepResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.master)
    }
}

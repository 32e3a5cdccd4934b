//! Deep Q-learning laboratory for scriptable text games.
//!
//! The crate is organised bottom-up:
//!
//! * [`game`] runs finite-state text games described in JSON.
//! * [`trajectory`] turns the master/action history into token ids.
//! * [`deptree`] reads CoNLL-U parses and reorders sentences into
//!   head-plus-children blocks.
//! * [`numerics`] holds the tensor type, the differentiation tape and Adam.
//! * [`encoder`] is the CNN / LSTM Q-network and its max-pool trace-back.
//! * [`replay`] is the replay memory with uniform, reward-weighted and
//!   priority sampling.
//! * [`reward`] shapes and clips raw game points.
//! * [`trainer`] is the epsilon-greedy training loop, evaluation and
//!   checkpoints.
//!
//! Minibatch work is spread over a rayon pool when the `parallel` feature is
//! on (the default); see [`exec`].

pub mod deptree;
pub mod encoder;
pub mod exec;
pub mod game;
pub mod numerics;
pub mod replay;
pub mod reward;
pub mod trainer;
pub mod trajectory;

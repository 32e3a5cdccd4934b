use rand::Rng;

use crate::encoder::{argmax, EncoderError, QNetwork};
use crate::exec::Exec;
use crate::numerics::{AdamState, ParamGrads, Real, Tape, Tensor};

use super::TrainError;

/// One transition of a TD minibatch.
#[derive(Debug, Clone, Copy)]
pub struct TdSample<'a> {
    pub state: &'a [u32],
    pub action: usize,
    pub reward: f64,
    pub next_state: &'a [u32],
    pub terminal: bool,
    /// Importance weight applied to this sample's loss.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdOutcome {
    /// Mean of the scaled Huber losses.
    pub loss: f64,
    /// `Q(s, a) - target` per sample.
    pub deltas: Vec<f64>,
}

/// Epsilon-greedy choice: with probability `epsilon` a uniform action,
/// otherwise the greedy one (lowest index on ties). `q` is only evaluated
/// when the greedy branch is taken.
pub fn act<R, G, F>(num_actions: usize, epsilon: f64, rng: &mut G, q: F) -> Result<usize, EncoderError>
where
    R: Real,
    G: Rng + ?Sized,
    F: FnOnce() -> Result<Vec<R>, EncoderError>,
{
    let u: f64 = rng.gen();
    if u < epsilon {
        return Ok(rng.gen_range(0..num_actions));
    }
    Ok(argmax(&q()?))
}

pub(crate) fn ids_of(tokens: &[u32]) -> (Vec<usize>, Vec<usize>) {
    (tokens.iter().map(|&t| t as usize).collect(), (0..tokens.len()).collect())
}

/// Largest Q-value of a state under `net`.
pub fn max_q<R: Real>(net: &QNetwork<R>, tokens: &[u32]) -> Result<f64, EncoderError> {
    let (ids, pos) = ids_of(tokens);
    let q = net.encode(&ids, &pos)?.q;
    Ok(q[argmax(&q)].to_f64_lossy())
}

struct PerSample<R> {
    grads: ParamGrads<R>,
    loss: f64,
    delta: f64,
}

/// TD target: `r` for terminal samples, otherwise `r + gamma * max Q(s')`
/// with the bootstrap taken from `target` (or `net`) as a constant.
pub fn td_target<R: Real>(net: &QNetwork<R>, target: Option<&QNetwork<R>>, s: &TdSample<'_>, gamma: f64) -> Result<f64, EncoderError> {
    if s.terminal {
        return Ok(s.reward);
    }
    Ok(s.reward + gamma * max_q(target.unwrap_or(net), s.next_state)?)
}

fn sample_grads<R: Real>(net: &QNetwork<R>, target: Option<&QNetwork<R>>, s: &TdSample<'_>, gamma: f64, n: usize) -> Result<PerSample<R>, EncoderError> {
    let y = td_target(net, target, s, gamma)?;
    let (ids, pos) = ids_of(s.state);
    let mut tape = Tape::new(net.params());
    let fwd = net.forward(&mut tape, &ids, &pos)?;
    let qa = tape.pick(fwd.q, s.action)?;
    let t = tape.constant(Tensor::scalar(R::from_f64_lossy(y)));
    let d = tape.sub(qa, t)?;
    let h = tape.huber(d);
    let delta = tape.value(d).data()[0].to_f64_lossy();
    let loss = s.scale * tape.value(h).data()[0].to_f64_lossy();
    let mut grads = tape.backward(h)?.into_param_grads();
    grads.scale(R::from_f64_lossy(s.scale / n as f64));
    Ok(PerSample { grads, loss, delta })
}

/// One Adam step on the mean importance-scaled Huber TD loss of `batch`.
///
/// Per-sample gradients are computed through `exec` and summed in batch
/// order, so the update does not depend on the execution mode.
pub fn td_step<R: Real>(
    net: &mut QNetwork<R>,
    target: Option<&QNetwork<R>>,
    adam: &mut AdamState<R>,
    batch: &[TdSample<'_>],
    gamma: f64,
    learning_rate: f64,
    exec: Exec,
) -> Result<TdOutcome, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    for s in batch {
        if s.action >= net.num_actions() {
            return Err(EncoderError::ActionOutOfRange {
                action: s.action,
                actions: net.num_actions(),
            }
            .into());
        }
    }
    let n = batch.len();
    let shared: &QNetwork<R> = net;
    let results = exec.map(batch, |s| sample_grads(shared, target, s, gamma, n));
    let mut total = ParamGrads::empty(shared.params().len());
    let mut loss = 0.0;
    let mut deltas = Vec::with_capacity(n);
    for r in results {
        let r = r?;
        total.accumulate(&r.grads);
        loss += r.loss;
        deltas.push(r.delta);
    }
    adam.step(net.params_mut(), &total, learning_rate)?;
    Ok(TdOutcome {
        loss: loss / n as f64,
        deltas,
    })
}

use std::rc::Rc;

use crate::diff::{Eager, Tensor};
use crate::error::Result;
use crate::model::forward::{bind, next_token_log_probs, Bound, Trainable};
use crate::model::ModelState;

/// Greedy decoder over a fixed snapshot of a state (LoRA used iff `state.lora_enabled`).
pub struct Decoder<'a> {
    state: &'a ModelState,
    weights: Bound<Rc<Tensor>>,
}

impl<'a> Decoder<'a> {
    pub fn new(state: &'a ModelState) -> Self {
        let weights = bind(&mut Eager, state, state.lora_enabled, Trainable::Nothing);
        Decoder { state, weights }
    }

    /// Appends argmax tokens to `prompt` until `stop` is produced, `max_new`
    /// tokens were emitted, or the context is full. Returns the new tokens
    /// without the stop token. Ties resolve to the lowest id.
    pub fn greedy(&self, prompt: &[usize], max_new: usize, stop: usize) -> Result<Vec<usize>> {
        let cfg = &self.state.config;
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && seq.len() < cfg.context_len {
            let lp = next_token_log_probs(&mut Eager, cfg, &self.weights, &seq)?;
            let next = argmax(lp.data());
            if next == stop {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(state: &ModelState, prompt: &[usize], max_new: usize, stop: usize) -> Result<Vec<usize>> {
    Decoder::new(state).greedy(prompt, max_new, stop)
}

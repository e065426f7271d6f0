//! Tiny decoder-only transformer whose attention projections carry optional
//! LoRA pairs. Disabling the pairs yields the reference model.

mod checkpoint;
mod config;
mod decode;
mod forward;
mod state;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::{ModelConfig, Projection};
pub use decode::{argmax, greedy_decode, Decoder};
pub use forward::{
    bind, forward_log_probs, hidden, log_probs, lora_forward, next_token_log_probs, Bound,
    Trainable,
};
pub use state::{
    init_lora, init_model, lora_named, lora_values_mut, merge_lora, trainable_parameters,
    Backbone, Block, BlockLora, LoraPair, MergeStatus, ModelState,
};

#[cfg(test)]
mod tests;

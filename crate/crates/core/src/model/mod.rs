//! Conditional generator `p(r | c, z)`: a small causal transformer whose
//! input embeddings carry a two-row addressee table.

mod checkpoint;
mod decode;
mod optim;
mod params;
mod transformer;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, FORMAT_VERSION,
};
pub use decode::{beam_decode, greedy_decode, sequence_logprob, BeamOutput};
pub use optim::{clip_grad_norm, optimizer_step, AdamConfig, AdamState};
pub use params::{GeneratorParams, LayerParams, ModelConfig, Scalar, Tensor};
pub use transformer::{
    loss_and_grads, next_token_log_probs, response_loglik, response_token_logprobs,
};

//! Small encoder-decoder transformer with explicit backward passes.

pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod tensor;
pub mod transformer;

pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader};
pub use layers::{ffn, layer_norm, scaled_dot_attention, LAYER_NORM_EPS};
pub use params::{ModelConfig, Params};
pub use tensor::Mat;
pub use transformer::{
    batch_loss, batch_pass, embed, encode_source, forward, next_token_log_probs, BatchPass, EmbeddingSeq, Example,
    ForwardTrace, Gradients,
};

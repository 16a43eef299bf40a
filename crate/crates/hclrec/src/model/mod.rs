//! Model parameters, encoder forward/backward, and level-routing blocks.

pub mod encoder;
pub mod ops;
pub mod params;

pub use encoder::{
    block_forward, embed, embed_backward, encode, encode_backward, hierarchical_backward,
    hierarchical_forward, last_real_positions, predict_scores, sequence_representation,
    sequence_representation_backward, Aggregation, BlockCache, EncodeCache, HiddenStates,
};
pub use ops::DropoutCtx;
pub use params::{
    expected_param_count, load_checkpoint, save_checkpoint, BlockParams, CheckpointMeta,
    EncoderLayerParams, LayerNormParams, ModelDims, ModelParams, PffnParams,
};

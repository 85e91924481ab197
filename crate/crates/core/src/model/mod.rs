//! Model construction: split backbones, metamorphosis modules, task heads and
//! the attack decoder.

mod backbone;
mod decoder;
mod feature;
mod heads;
mod metamorph;

pub use backbone::{
    build_backbone, build_consumer_stage, build_encoder, build_split_backbone, BackboneSpec, BlockDescriptor,
    BlockKind, BlockStack, Stage,
};
pub use decoder::{build_decoder, Decoder};
pub use feature::{checked_byte_len, DType, FeatureTensor};
pub use heads::{Head, TaskKind};
pub use metamorph::{AttentionHook, Crossing, Metamorph, MetamorphConfig, MetamorphTrace};

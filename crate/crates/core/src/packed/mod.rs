//! Bit-packed inference: XNOR-popcount convolutions with batch norm folded
//! into per-channel thresholds, and the BNNF file format.

mod bits;
pub mod format;
mod layer;
mod model;

pub use bits::{
    pack_bits, tail_mask, words_for, xnor_popcount_dot, xor_popcount_columns_kernel,
    xor_popcount_kernel, PackedBits, XorPopcount, XorPopcountColumns, WORD_BITS,
};
pub use layer::{
    fuse_bn_sign, packed_conv_forward, ChannelSign, FusedLayer, LayerOutput, PackedFeatureMap,
};
pub use model::{export_model, verify, PackedBlock, PackedModel, RealConv, VerifyReport};

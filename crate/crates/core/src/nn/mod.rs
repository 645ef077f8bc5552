pub mod blocks;
pub mod params;

pub use blocks::{
    init_params, BlockSpec, ChannelAttention, Conv, DepthwiseConv, Direction, Dsc, Embedding, Ffn, Hfb, LayerNorm,
    Mdta, Module, Rcab, Resample, SpatialConv, TransformerBlock,
};
pub use params::{Bound, Init, ParamEntry, ParameterStore};
